//! C ABI over the panorama geometry, the scan kernels and the out-painting
//! pipeline.
//!
//! Every fallible call returns an [`OpamaStatus`]. On failure the message is
//! kept per thread and read with [`opama_last_error`]. Objects cross the
//! boundary as opaque pointers created by `*_new`/`*_load` functions and
//! released with the matching `*_free`. Images are row-major, channels-last
//! `double` arrays in `[0, 1]`; masks are `uint8_t`, nonzero meaning known.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use opama::geometry::io::{load_equirect, save_mask, save_rgb};
use opama::geometry::{extract_nfov, EquirectImage, NFoVView, ViewCoords};
use opama::pipeline::{generate_panorama, Models, RunConfig};
use opama::ssm::{scan_parallel, scan_seq, zoh, ScanDims};
use opama::tensor::checkpoint::Checkpoint;
use opama::tensor::Tensor;
use opama::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpamaStatus {
    Ok = 0,
    NullArgument = 1,
    Contract = 2,
    Dimension = 3,
    Domain = 4,
    Config = 5,
    Io = 6,
    Checkpoint = 7,
    Panic = 8,
}

/// An equirectangular RGB image with an optional validity mask.
pub struct OpamaEquirect(EquirectImage);

/// A run configuration.
pub struct OpamaConfig(RunConfig);

/// Models built from a configuration, optionally loaded from a checkpoint.
pub struct OpamaModels(Models);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> OpamaStatus {
    match e {
        Error::Dimension(_) => OpamaStatus::Dimension,
        Error::Contract(_) => OpamaStatus::Contract,
        Error::Domain(_) => OpamaStatus::Domain,
        Error::Config(_) => OpamaStatus::Config,
        Error::Checkpoint(_) => OpamaStatus::Checkpoint,
        Error::Image(_) | Error::Io(_) => OpamaStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> OpamaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            OpamaStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            OpamaStatus::NullArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            OpamaStatus::Panic
        }
    }
}

fn nonnull<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    // SAFETY: callers pass pointers obtained from this library or valid for reads.
    unsafe { p.as_ref() }.ok_or(Fail::Null(what))
}

fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    // SAFETY: callers pass pointers valid for writes.
    unsafe { p.as_mut() }.ok_or(Fail::Null(what))
}

fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: the caller guarantees `len` readable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: the caller guarantees `len` writable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn string<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: the caller passes a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) };
    s.to_str().map_err(|_| Fail::Lib(Error::Contract(format!("{what} is not valid UTF-8"))))
}

fn opt_string<'a>(p: *const c_char, what: &'static str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        string(p, what).map(Some)
    }
}

fn mask_tensor(mask: &[u8], h: usize, w: usize) -> Result<Tensor, Error> {
    Tensor::new(&[h, w], mask.iter().map(|&m| if m != 0 { 1.0 } else { 0.0 }).collect())
}

fn expect_len(got: usize, want: usize, what: &str) -> Result<(), Fail> {
    if got != want {
        return Err(Fail::Lib(Error::Dimension(format!("{what} holds {got} values, need {want}"))));
    }
    Ok(())
}

fn boxed<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    *out_ptr(out, "out")? = Box::into_raw(Box::new(v));
    Ok(())
}

fn free<T>(p: *mut T) {
    if !p.is_null() {
        // SAFETY: `p` came from `Box::into_raw` in this library and is freed once.
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn opama_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn opama_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Zero-order-hold discretization of one diagonal entry: `a_bar = exp(delta·a)`
/// and `b_factor` with `B̄ = b_factor·B`.
#[no_mangle]
pub extern "C" fn opama_zoh(a: f64, delta: f64, a_bar: *mut f64, b_factor: *mut f64) -> OpamaStatus {
    guard(|| {
        if !(delta > 0.0 && delta.is_finite() && a.is_finite()) {
            return Err(Fail::Lib(Error::Contract(format!("zoh needs finite a and delta > 0, got a={a} delta={delta}"))));
        }
        let (ab, k) = zoh(a, delta);
        *out_ptr(a_bar, "a_bar")? = ab;
        *out_ptr(b_factor, "b_factor")? = k;
        Ok(())
    })
}

/// Run the diagonal selective scan. `a_bar`, `b_bar` are `[l, d, n]`, `c` is
/// `[l, n]`, `x` and `y` are `[l, d]`, `h0` (nullable) and `h_last` are
/// `[d, n]`. A nonzero `parallel` selects the associative form.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub extern "C" fn opama_scan(
    l: usize,
    d: usize,
    n: usize,
    a_bar: *const f64,
    b_bar: *const f64,
    c: *const f64,
    x: *const f64,
    h0: *const f64,
    parallel: i32,
    y: *mut f64,
    h_last: *mut f64,
) -> OpamaStatus {
    guard(|| {
        if d == 0 || n == 0 {
            return Err(Fail::Lib(Error::Contract("scan needs d >= 1 and n >= 1".into())));
        }
        let dims = ScanDims { l, d, n };
        let a = slice(a_bar, l * d * n, "a_bar")?;
        let b = slice(b_bar, l * d * n, "b_bar")?;
        let c = slice(c, l * n, "c")?;
        let x = slice(x, l * d, "x")?;
        let h0 = if h0.is_null() { None } else { Some(slice(h0, d * n, "h0")?) };
        let y = slice_mut(y, l * d, "y")?;
        let h = slice_mut(h_last, d * n, "h_last")?;
        if parallel != 0 {
            scan_parallel(dims, a, b, c, x, h0, y, h);
        } else {
            scan_seq(dims, a, b, c, x, h0, y, h);
        }
        Ok(())
    })
}

/// Wrap `height·width·3` pixels and an optional `height·width` mask.
#[no_mangle]
pub extern "C" fn opama_equirect_new(
    width: usize,
    height: usize,
    rgb: *const f64,
    mask: *const u8,
    out: *mut *mut OpamaEquirect,
) -> OpamaStatus {
    guard(|| {
        let pixels = Tensor::new(&[height, width, 3], slice(rgb, height * width * 3, "rgb")?.to_vec())?;
        let mask = if mask.is_null() { None } else { Some(mask_tensor(slice(mask, height * width, "mask")?, height, width)?) };
        boxed(out, OpamaEquirect(EquirectImage::new(pixels, mask)?))
    })
}

/// An all-unknown black image.
#[no_mangle]
pub extern "C" fn opama_equirect_blank(width: usize, height: usize, out: *mut *mut OpamaEquirect) -> OpamaStatus {
    guard(|| boxed(out, OpamaEquirect(EquirectImage::blank(width, height, 3)?)))
}

/// Read a PNG or PPM file, plus an optional mask image (nullable path).
#[no_mangle]
pub extern "C" fn opama_equirect_load(path: *const c_char, mask_path: *const c_char, out: *mut *mut OpamaEquirect) -> OpamaStatus {
    guard(|| {
        let path = string(path, "path")?;
        let mask = opt_string(mask_path, "mask_path")?;
        boxed(out, OpamaEquirect(load_equirect(path, mask.map(Path::new))?))
    })
}

/// Write the pixels and, with a non-null `mask_path`, the mask.
#[no_mangle]
pub extern "C" fn opama_equirect_save(img: *const OpamaEquirect, path: *const c_char, mask_path: *const c_char) -> OpamaStatus {
    guard(|| {
        let img = &nonnull(img, "img")?.0;
        save_rgb(string(path, "path")?, &img.pixels)?;
        if let Some(m) = opt_string(mask_path, "mask_path")? {
            save_mask(m, &img.mask_or_ones())?;
        }
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn opama_equirect_free(img: *mut OpamaEquirect) {
    free(img)
}

/// Width and height of `img` (either output pointer may be null).
#[no_mangle]
pub extern "C" fn opama_equirect_size(img: *const OpamaEquirect, width: *mut usize, height: *mut usize) -> OpamaStatus {
    guard(|| {
        let img = &nonnull(img, "img")?.0;
        if let Ok(w) = out_ptr(width, "width") {
            *w = img.width();
        }
        if let Ok(h) = out_ptr(height, "height") {
            *h = img.height();
        }
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn opama_equirect_unknown_count(img: *const OpamaEquirect, count: *mut usize) -> OpamaStatus {
    guard(|| {
        *out_ptr(count, "count")? = nonnull(img, "img")?.0.unknown_count();
        Ok(())
    })
}

/// Copy the `height·width·3` pixels into `rgb`; `len` must match.
#[no_mangle]
pub extern "C" fn opama_equirect_pixels(img: *const OpamaEquirect, rgb: *mut f64, len: usize) -> OpamaStatus {
    guard(|| {
        let data = nonnull(img, "img")?.0.pixels.data();
        expect_len(len, data.len(), "rgb")?;
        slice_mut(rgb, len, "rgb")?.copy_from_slice(data);
        Ok(())
    })
}

/// Copy the `height·width` mask into `mask` as 0/1 bytes.
#[no_mangle]
pub extern "C" fn opama_equirect_mask(img: *const OpamaEquirect, mask: *mut u8, len: usize) -> OpamaStatus {
    guard(|| {
        let m = nonnull(img, "img")?.0.mask_or_ones();
        expect_len(len, m.numel(), "mask")?;
        for (o, &v) in slice_mut(mask, len, "mask")?.iter_mut().zip(m.data()) {
            *o = u8::from(v > 0.5);
        }
        Ok(())
    })
}

/// Perspective view of `size × size` pixels at (`lon`, `lat`) degrees; `rgb`
/// receives `size·size·3` values and `mask` (nullable) `size·size` bytes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub extern "C" fn opama_extract_nfov(
    img: *const OpamaEquirect,
    lon: f64,
    lat: f64,
    fov: f64,
    size: usize,
    rgb: *mut f64,
    mask: *mut u8,
) -> OpamaStatus {
    guard(|| {
        let img = &nonnull(img, "img")?.0;
        let view = extract_nfov(img, ViewCoords::new(lon, lat, fov)?, size)?;
        slice_mut(rgb, size * size * 3, "rgb")?.copy_from_slice(view.image.data());
        if !mask.is_null() {
            let m = view.mask.unwrap_or_else(|| Tensor::full(&[size, size], 1.0));
            for (o, &v) in slice_mut(mask, size * size, "mask")?.iter_mut().zip(m.data()) {
                *o = u8::from(v > 0.5);
            }
        }
        Ok(())
    })
}

/// Default configuration.
#[no_mangle]
pub extern "C" fn opama_config_default(out: *mut *mut OpamaConfig) -> OpamaStatus {
    guard(|| boxed(out, OpamaConfig(RunConfig::default())))
}

/// Parse `key = value` configuration text; missing keys take defaults.
#[no_mangle]
pub extern "C" fn opama_config_parse(text: *const c_char, out: *mut *mut OpamaConfig) -> OpamaStatus {
    guard(|| boxed(out, OpamaConfig(RunConfig::parse(string(text, "text")?)?)))
}

#[no_mangle]
pub extern "C" fn opama_config_set_seed(cfg: *mut OpamaConfig, seed: u64) -> OpamaStatus {
    guard(|| {
        out_ptr(cfg, "cfg")?.0.seed = seed;
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn opama_config_free(cfg: *mut OpamaConfig) {
    free(cfg)
}

/// Freshly initialized models, or trained ones when `ckpt_path` is non-null.
#[no_mangle]
pub extern "C" fn opama_models_new(cfg: *const OpamaConfig, ckpt_path: *const c_char, out: *mut *mut OpamaModels) -> OpamaStatus {
    guard(|| {
        let cfg = &nonnull(cfg, "cfg")?.0;
        let models = match opt_string(ckpt_path, "ckpt_path")? {
            Some(p) => Models::from_checkpoint(cfg, &Checkpoint::load(Path::new(p))?)?,
            None => Models::new(cfg)?,
        };
        boxed(out, OpamaModels(models))
    })
}

#[no_mangle]
pub extern "C" fn opama_models_free(models: *mut OpamaModels) {
    free(models)
}

/// Grow a full panorama. `seed_rgb` (nullable) is a `seed_size × seed_size`
/// view centred at (`seed_lon`, `seed_lat`) with the configured fov; `text`
/// may be null. At least one of them must be given.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub extern "C" fn opama_generate(
    models: *const OpamaModels,
    cfg: *const OpamaConfig,
    seed_rgb: *const f64,
    seed_size: usize,
    seed_lon: f64,
    seed_lat: f64,
    text: *const c_char,
    out: *mut *mut OpamaEquirect,
) -> OpamaStatus {
    guard(|| {
        let models = &nonnull(models, "models")?.0;
        let cfg = &nonnull(cfg, "cfg")?.0;
        let text = opt_string(text, "text")?.unwrap_or("");
        let seed = if seed_rgb.is_null() {
            None
        } else {
            let px = slice(seed_rgb, seed_size * seed_size * 3, "seed_rgb")?.to_vec();
            let image = Tensor::new(&[seed_size, seed_size, 3], px)?;
            Some(NFoVView::new(ViewCoords::new(seed_lon, seed_lat, cfg.view_fov)?, image, None)?)
        };
        let g = generate_panorama(models, seed.as_ref(), text, cfg)?;
        boxed(out, OpamaEquirect(g.panorama))
    })
}
