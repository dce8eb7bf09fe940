use super::*;
use crate::pipeline::synth::{synth_panorama, SynthSceneSpec};

fn tiny() -> RunConfig {
    RunConfig {
        t: 50,
        sample_steps: 4,
        d_model: 8,
        d_state: 2,
        vcr_blocks: 1,
        unet_width: 8,
        d_time: 8,
        gma_width: 4,
        ..RunConfig::default()
    }
}

fn opts(seed: u64) -> SampleOptions {
    SampleOptions { steps: 4, cfg_scale: 2.5, seed }
}

#[test]
fn ring_offsets_for_six_views() {
    let start = ViewCoords::new(0.0, 0.0, 90.0).unwrap();
    let plan = plan_views(start, 90.0, 6, true).unwrap();
    let lons: Vec<f64> = plan.views[..6].iter().map(|v| v.lon).collect();
    assert_eq!(lons, vec![0.0, 60.0, -60.0, 120.0, -120.0, -180.0]);
    assert_eq!(plan.views[0], start);
    assert_eq!(plan.views.len(), 8);
    assert!((plan.overlap - 1.0 / 3.0).abs() < 1e-12);
    assert!(plan.coverage(256, 128).iter().all(|&c| c));
    assert!(plan.coverage(128, 64).iter().all(|&c| c));
}

#[test]
fn plan_rejects_thin_overlap_and_offsets_from_start() {
    let start = ViewCoords::new(0.0, 0.0, 90.0).unwrap();
    assert!(plan_views(start, 90.0, 4, false).is_err());
    assert!(plan_views(start, 90.0, 5, false).is_err());
    let s = ViewCoords::new(170.0, 0.0, 90.0).unwrap();
    let plan = plan_views(s, 90.0, 6, false).unwrap();
    assert_eq!(plan.views[1].lon, -130.0);
    assert_eq!(plan.views[2].lon, 110.0);
    let tilted = ViewCoords::new(0.0, 40.0, 90.0).unwrap();
    assert!(plan_views(tilted, 90.0, 6, true).is_err());
}

#[test]
fn fully_known_view_is_unchanged() {
    let models = Models::new(&tiny()).unwrap();
    let (pano, _) = synth_panorama(&SynthSceneSpec::random(3), 128, 64).unwrap();
    let out = outpaint_step(&models, &pano, ViewCoords::new(30.0, 0.0, 90.0).unwrap(), "", opts(1)).unwrap();
    let mean = out.pixels.zip_map(&pano.pixels, |a, b| (a - b).abs()).unwrap().mean();
    assert!(mean <= 2.0 / 255.0, "{mean}");
}

#[test]
fn outpaint_grows_mask_and_is_deterministic() {
    let models = Models::new(&tiny()).unwrap();
    let (full, _) = synth_panorama(&SynthSceneSpec::random(4), 128, 64).unwrap();
    let seed = extract_nfov(&full, ViewCoords::new(0.0, 0.0, 90.0).unwrap(), 64).unwrap();
    let seed = NFoVView::new(seed.coords, seed.image, None).unwrap();
    let pano = composite_nfov(&EquirectImage::blank(128, 64, 3).unwrap(), &seed).unwrap();
    let next = ViewCoords::new(60.0, 0.0, 90.0).unwrap();
    let a = outpaint_step(&models, &pano, next, "a warm scene", opts(5)).unwrap();
    let b = outpaint_step(&models, &pano, next, "a warm scene", opts(5)).unwrap();
    assert_eq!(a, b);
    let (m0, m1) = (pano.mask.as_ref().unwrap(), a.mask.as_ref().unwrap());
    assert!(m0.data().iter().zip(m1.data()).all(|(x, y)| *y >= *x));
    assert!(a.known_count() > pano.known_count());
    for (i, &m) in m0.data().iter().enumerate() {
        if m > 0.5 {
            assert_eq!(&a.pixels.data()[i * 3..i * 3 + 3], &pano.pixels.data()[i * 3..i * 3 + 3]);
        }
    }
    let far = ViewCoords::new(-180.0, 0.0, 60.0).unwrap();
    assert!(matches!(outpaint_step(&models, &pano, far, "", opts(5)), Err(crate::Error::Contract(_))));
}

#[test]
fn generation_modes_complete_the_panorama() {
    let cfg = RunConfig { sample_steps: 2, ..tiny() };
    let models = Models::new(&cfg).unwrap();
    let (full, _) = synth_panorama(&SynthSceneSpec::random(5), 128, 64).unwrap();
    let seed = extract_nfov(&full, ViewCoords::new(0.0, 0.0, 90.0).unwrap(), 64).unwrap();
    let seed = NFoVView::new(seed.coords, seed.image, None).unwrap();
    for (view, text) in [(Some(&seed), ""), (None, "a dusk scene"), (Some(&seed), "a dusk scene")] {
        let g = generate_panorama(&models, view, text, &cfg).unwrap();
        assert_eq!(g.panorama.unknown_count(), 0);
        assert!(g.panorama.pixels.all_finite());
    }
    assert!(generate_panorama(&models, None, "  ", &cfg).is_err());
}

#[test]
fn outputs_are_written() {
    let cfg = RunConfig { sample_steps: 2, ..tiny() };
    let models = Models::new(&cfg).unwrap();
    let g = generate_panorama(&models, None, "a snow scene", &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &g, &cfg, "a snow scene").unwrap();
    for f in ["panorama.png", "mask.png", "meta.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let meta = std::fs::read_to_string(dir.path().join("meta.txt")).unwrap();
    assert!(meta.contains("sample_steps = 2"));
    assert!(meta.contains("view 1"));
}
