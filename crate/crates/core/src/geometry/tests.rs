use rand::{RngExt, SeedableRng};

use super::*;
use crate::rng::SeededRng;

fn constant(w: usize, h: usize, rgb: [f64; 3]) -> EquirectImage {
    let t = Tensor::from_fn(&[h, w, 3], |i| rgb[i % 3]);
    EquirectImage::new(t, None).unwrap()
}

fn norm(d: Vec3) -> f64 {
    dot(d, d).sqrt()
}

#[test]
fn center_pixel_looks_forward() {
    let d = dir_from_equirect(128, 64, 256, 128).unwrap();
    // half a pixel off the exact axis
    assert!((d[2] - 1.0).abs() < 1e-3);
    assert!(d[0].abs() < 0.02 && d[1].abs() < 0.02);
}

#[test]
fn top_row_approaches_north_pole() {
    let d = dir_from_equirect(10, 0, 256, 128).unwrap();
    assert!(d[1] > 0.999);
}

#[test]
fn out_of_range_pixel_is_rejected() {
    assert!(matches!(dir_from_equirect(256, 0, 256, 128), Err(Error::Contract(_))));
    assert!(matches!(dir_from_equirect(0, 128, 256, 128), Err(Error::Contract(_))));
}

#[test]
fn directions_are_unit_norm() {
    let mut rng = SeededRng::seed_from_u64(3);
    for _ in 0..1000 {
        let u = rng.random_range(0..512);
        let v = rng.random_range(0..256);
        let d = dir_from_equirect(u, v, 512, 256).unwrap();
        assert!((norm(d) - 1.0).abs() <= 1e-12);
    }
    let c = ViewCoords::new(37.0, -20.0, 75.0).unwrap();
    for row in 0..16 {
        for col in 0..16 {
            assert!((norm(c.ray(row, col, 16)) - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn equirect_from_dir_inverts_pixel_centers() {
    for (u, v) in [(0, 5), (17, 40), (255, 127), (128, 64)] {
        let d = dir_from_equirect(u, v, 256, 128).unwrap();
        let (x, y) = equirect_from_dir(d, 256, 128);
        assert!((x - u as f64).abs() < 1e-9 && (y - v as f64).abs() < 1e-9, "{u} {v} -> {x} {y}");
    }
}

#[test]
fn wrap_sample_identity_is_exact() {
    let img = test_pattern(64, 32).unwrap();
    let mut a = [0.0; 3];
    let mut b = [0.0; 3];
    for y in [0.0, 3.3, 17.8, 31.0] {
        bilinear(&img.pixels, -0.25, y, true, &mut a);
        bilinear(&img.pixels, 64.0 - 0.25, y, true, &mut b);
        assert_eq!(a, b);
    }
}

#[test]
fn view_coords_ranges() {
    assert!(ViewCoords::new(180.0, 0.0, 90.0).is_err());
    assert!(ViewCoords::new(-180.0, 0.0, 90.0).is_ok());
    assert!(ViewCoords::new(0.0, 91.0, 90.0).is_err());
    assert!(ViewCoords::new(0.0, 0.0, 0.0).is_err());
    assert!(ViewCoords::new(0.0, 0.0, 121.0).is_err());
    assert_eq!(wrap_lon(180.0), -180.0);
    assert_eq!(wrap_lon(-190.0), 170.0);
}

#[test]
fn constant_equirect_gives_constant_faces_and_back() {
    let img = constant(64, 32, [0.2, 0.5, 0.9]);
    let cube = equirect_to_cubemap(&img, 8).unwrap();
    for f in &cube.faces {
        for (i, v) in f.data().iter().enumerate() {
            assert!((v - [0.2, 0.5, 0.9][i % 3]).abs() < 1e-12);
        }
    }
    let back = cubemap_to_equirect(&cube, 64, 32).unwrap();
    assert!(back.pixels.max_abs_diff(&img.pixels) < 1e-12);
}

#[test]
fn front_face_center_samples_equirect_center() {
    let img = test_pattern(256, 128).unwrap();
    let cube = equirect_to_cubemap(&img, 64).unwrap();
    // the four central face pixels surround the forward axis, as do the four
    // central equirect pixels
    let face = cube.face(Face::F);
    let mut face_avg = [0.0; 3];
    let mut eq_avg = [0.0; 3];
    for (r, c) in [(31, 31), (31, 32), (32, 31), (32, 32)] {
        for k in 0..3 {
            face_avg[k] += face.at(&[r, c, k]) / 4.0;
        }
    }
    for (v, u) in [(63, 127), (63, 128), (64, 127), (64, 128)] {
        for k in 0..3 {
            eq_avg[k] += img.pixels.at(&[v, u, k]) / 4.0;
        }
    }
    for k in 0..3 {
        assert!((face_avg[k] - eq_avg[k]).abs() < 1e-3);
    }
}

#[test]
fn round_trip_psnr_outside_caps() {
    let img = test_pattern(256, 128).unwrap();
    let cube = equirect_to_cubemap(&img, 64).unwrap();
    let back = cubemap_to_equirect(&cube, 256, 128).unwrap();
    let psnr = psnr_rows(&img.pixels, &back.pixels, 13..115).unwrap();
    assert!(psnr >= 30.0, "psnr {psnr}");
}

#[test]
fn face_assignment_is_deterministic_with_priority() {
    // exact diagonal between F and R goes to F, between R and B to R
    assert_eq!(Face::for_dir([1.0, 0.0, 1.0]), Face::F);
    assert_eq!(Face::for_dir([1.0, 0.0, -1.0]), Face::R);
    assert_eq!(Face::for_dir([-1.0, 0.0, -1.0]), Face::B);
    assert_eq!(Face::for_dir([-1.0, 1.0, 0.0]), Face::L);
    assert_eq!(Face::for_dir([0.0, 1.0, -1.0]), Face::B);
    assert_eq!(Face::for_dir([0.0, 1.0, 0.0]), Face::U);
    let img = test_pattern(64, 32).unwrap();
    let cube = equirect_to_cubemap(&img, 16).unwrap();
    let a = cubemap_to_equirect(&cube, 64, 32).unwrap();
    let b = cubemap_to_equirect(&cube, 64, 32).unwrap();
    assert_eq!(a, b);
}

#[test]
fn face_coords_match_axes() {
    for f in Face::ALL {
        let c = f.coords();
        let (fw, _, _) = c.basis();
        assert_eq!(Face::for_dir(fw), f);
        assert!((f.axis_component(fw) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn nfov_of_constant_is_constant() {
    let img = constant(64, 32, [0.3, 0.3, 0.3]);
    let v = extract_nfov(&img, ViewCoords::new(0.0, 0.0, 90.0).unwrap(), 16).unwrap();
    assert!(v.image.data().iter().all(|x| (x - 0.3).abs() < 1e-12));
}

#[test]
fn nfov_center_matches_equirect_sample() {
    let img = test_pattern(256, 128).unwrap();
    for (lon, lat) in [(0.0, 0.0), (45.0, 20.0), (-120.0, -35.0)] {
        let c = ViewCoords::new(lon, lat, 60.0).unwrap();
        // odd size puts a pixel exactly on the optical axis
        let v = extract_nfov(&img, c, 17).unwrap();
        let (u, y) = equirect_from_dir(dir_from_lonlat(f64::to_radians(lon), f64::to_radians(lat)), 256, 128);
        let mut want = [0.0; 3];
        bilinear(&img.pixels, u, y, true, &mut want);
        for k in 0..3 {
            assert!((v.image.at(&[8, 8, k]) - want[k]).abs() < 1e-12);
        }
    }
}

fn footprint(w: usize, h: usize, c: &ViewCoords, size: usize) -> Vec<bool> {
    let mut hit = vec![false; w * h];
    for row in 0..size {
        for col in 0..size {
            let (u, v) = equirect_from_dir(c.ray(row, col, size), w, h);
            let (x0, y0) = (u.floor() as isize, v.floor() as isize);
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let x = (x0 + dx).rem_euclid(w as isize) as usize;
                let y = (y0 + dy).clamp(0, h as isize - 1) as usize;
                hit[y * w + x] = true;
            }
        }
    }
    hit
}

#[test]
fn opposite_views_touch_disjoint_source_pixels() {
    let (w, h) = (256, 128);
    for fov in [60.0, 90.0] {
        let a = footprint(w, h, &ViewCoords::new(0.0, 0.0, fov).unwrap(), 64);
        let b = footprint(w, h, &ViewCoords::new(-180.0, 0.0, fov).unwrap(), 64);
        assert!(a.iter().zip(&b).all(|(x, y)| !(x & y)), "fov {fov}");
    }
}

#[test]
fn extract_then_composite_changes_little() {
    let img = test_pattern(256, 128).unwrap();
    let c = ViewCoords::new(30.0, 10.0, 90.0).unwrap();
    let v = extract_nfov(&img, c, 64).unwrap();
    let out = composite_nfov(&img, &v).unwrap();
    let inside = frustum_pixels(256, 128, &c);
    let mut total = 0.0;
    let mut n = 0;
    for (i, &hit) in inside.iter().enumerate() {
        let (a, b) = (&img.pixels.data()[i * 3..i * 3 + 3], &out.pixels.data()[i * 3..i * 3 + 3]);
        if hit {
            total += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
            n += 3;
        } else {
            assert_eq!(a, b);
        }
    }
    assert!(n > 0 && total / n as f64 <= 2.0 / 255.0);
    // second application is a no-op on top of the first
    assert_eq!(composite_nfov(&out, &v).unwrap(), out);
}

#[test]
fn composite_into_blank_then_extract_recovers_view() {
    let img = test_pattern(256, 128).unwrap();
    let c = ViewCoords::new(-60.0, 0.0, 90.0).unwrap();
    let v = extract_nfov(&img, c, 32).unwrap();
    let blank = EquirectImage::blank(256, 128, 3).unwrap();
    let filled = composite_nfov(&blank, &v).unwrap();
    assert!(filled.known_count() > 0);
    let again = extract_nfov(&filled, c, 32).unwrap();
    // borders touch unwritten pixels; compare the interior
    let mut worst: f64 = 0.0;
    for r in 2..30 {
        for col in 2..30 {
            for k in 0..3 {
                worst = worst.max((again.image.at(&[r, col, k]) - v.image.at(&[r, col, k])).abs());
            }
        }
    }
    assert!(worst < 0.02, "{worst}");
    assert!(again.mask.unwrap().data()[16 * 32 + 16] == 1.0);
}

#[test]
fn mask_stays_binary_through_resampling() {
    let mut img = test_pattern(64, 32).unwrap();
    img.mask = Some(Tensor::from_fn(&[32, 64], |i| ((i / 7) % 2) as f64));
    let cube = equirect_to_cubemap(&img, 8).unwrap();
    for m in cube.masks.as_ref().unwrap() {
        assert!(m.data().iter().all(|&x| x == 0.0 || x == 1.0));
    }
    let back = cubemap_to_equirect(&cube, 64, 32).unwrap();
    assert!(back.mask.unwrap().data().iter().all(|&x| x == 0.0 || x == 1.0));
}

#[test]
fn coord_channels_axes_and_norms() {
    let f = coord_channels(CoordSource::Face(Face::F), 9).unwrap();
    let u = coord_channels(CoordSource::Face(Face::U), 9).unwrap();
    for k in 0..3 {
        assert!((f.at(&[4, 4, k]) - [0.0, 0.0, 1.0][k]).abs() < 1e-12);
        assert!((u.at(&[4, 4, k]) - [0.0, 1.0, 0.0][k]).abs() < 1e-12);
    }
    let v = coord_channels(CoordSource::View(ViewCoords::new(10.0, 5.0, 70.0).unwrap()), 12).unwrap();
    for px in v.data().chunks(3) {
        assert!((norm([px[0], px[1], px[2]]) - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn equirect_requires_twice_as_wide() {
    assert!(EquirectImage::new(Tensor::zeros(&[4, 4, 3]), None).is_err());
    assert!(equirect_to_cubemap(&constant(8, 4, [0.0; 3]), 3).is_err());
}
