//! Conversions among the panorama representations: equirectangular images,
//! unit sphere directions, cubemaps, and perspective (NFoV) views.
//!
//! Conventions: longitude (azimuth) in `[-180, 180)`, latitude (elevation) in
//! `[-90, 90]`, `+y` up and `+z` forward at `(0, 0)`. Equirect pixel `(u, v)`
//! has its center at longitude `2π(u + ½)/W − π` and latitude
//! `π/2 − π(v + ½)/H`. Continuous sample coordinates put pixel centers on
//! integers. Colors resample bilinearly (wrapping in x, clamping in y);
//! masks resample by nearest neighbour so they stay binary.

pub mod io;
mod sample;

pub use sample::{bilinear, nearest};

use std::f64::consts::PI;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn normalize(v: Vec3) -> Vec3 {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Unit direction for longitude/latitude in radians.
pub fn dir_from_lonlat(lon: f64, lat: f64) -> Vec3 {
    [lat.cos() * lon.sin(), lat.sin(), lat.cos() * lon.cos()]
}

/// `(lon, lat)` in radians of a direction.
pub fn lonlat_from_dir(d: Vec3) -> (f64, f64) {
    let lon = d[0].atan2(d[2]);
    let lat = (d[1] / dot(d, d).sqrt()).clamp(-1.0, 1.0).asin();
    (lon, lat)
}

/// Direction through the center of equirect pixel `(u, v)`.
pub fn dir_from_equirect(u: usize, v: usize, width: usize, height: usize) -> Result<Vec3> {
    ensure!(u < width && v < height, Contract, "pixel ({}, {}) outside {}x{} image", u, v, width, height);
    let lon = 2.0 * PI * (u as f64 + 0.5) / width as f64 - PI;
    let lat = PI / 2.0 - PI * (v as f64 + 0.5) / height as f64;
    Ok(dir_from_lonlat(lon, lat))
}

/// Continuous equirect sample coordinates (pixel centers on integers) of a
/// direction.
pub fn equirect_from_dir(d: Vec3, width: usize, height: usize) -> (f64, f64) {
    let (lon, lat) = lonlat_from_dir(d);
    let u = (lon + PI) * width as f64 / (2.0 * PI) - 0.5;
    let v = (PI / 2.0 - lat) * height as f64 / PI - 0.5;
    (u, v)
}

/// Wrap degrees into `[-180, 180)`.
pub fn wrap_lon(deg: f64) -> f64 {
    let w = (deg + 180.0).rem_euclid(360.0) - 180.0;
    if w >= 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// Camera placement on the sphere, in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewCoords {
    pub lon: f64,
    pub lat: f64,
    pub fov: f64,
}

pub const DEFAULT_FOV: f64 = 90.0;

impl ViewCoords {
    pub fn new(lon: f64, lat: f64, fov: f64) -> Result<Self> {
        let c = ViewCoords { lon, lat, fov };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!((-180.0..180.0).contains(&self.lon), Contract, "longitude {} outside [-180, 180)", self.lon);
        ensure!((-90.0..=90.0).contains(&self.lat), Contract, "latitude {} outside [-90, 90]", self.lat);
        ensure!(self.fov > 0.0 && self.fov <= 120.0, Contract, "fov {} outside (0, 120]", self.fov);
        Ok(())
    }

    /// Forward, right and up unit vectors (zero roll).
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let (lon, lat) = (self.lon.to_radians(), self.lat.to_radians());
        let f = dir_from_lonlat(lon, lat);
        let r = [lon.cos(), 0.0, -lon.sin()];
        let u = [-lat.sin() * lon.sin(), lat.cos(), -lat.sin() * lon.cos()];
        (f, r, u)
    }

    fn half_extent(&self) -> f64 {
        (self.fov.to_radians() / 2.0).tan()
    }

    /// Unit ray through the center of view pixel `(row, col)` of a
    /// `size × size` pinhole image.
    pub fn ray(&self, row: usize, col: usize, size: usize) -> Vec3 {
        let (f, r, u) = self.basis();
        self.ray_with(row, col, size, (f, r, u))
    }

    fn ray_with(&self, row: usize, col: usize, size: usize, (f, r, u): (Vec3, Vec3, Vec3)) -> Vec3 {
        let t = self.half_extent();
        let x = ((col as f64 + 0.5) / size as f64 * 2.0 - 1.0) * t;
        let y = (1.0 - (row as f64 + 0.5) / size as f64 * 2.0) * t;
        normalize([f[0] + x * r[0] + y * u[0], f[1] + x * r[1] + y * u[1], f[2] + x * r[2] + y * u[2]])
    }

    /// Continuous `(row, col)` of a direction in the view, or `None` outside
    /// the frustum.
    pub fn project(&self, d: Vec3, size: usize) -> Option<(f64, f64)> {
        self.project_with(d, size, self.basis())
    }

    fn project_with(&self, d: Vec3, size: usize, (f, r, u): (Vec3, Vec3, Vec3)) -> Option<(f64, f64)> {
        let z = dot(d, f);
        if z <= 0.0 {
            return None;
        }
        let t = self.half_extent();
        let px = dot(d, r) / z / t;
        let py = dot(d, u) / z / t;
        if px.abs() > 1.0 || py.abs() > 1.0 {
            return None;
        }
        let s = size as f64;
        Some(((1.0 - py) / 2.0 * s - 0.5, (px + 1.0) / 2.0 * s - 0.5))
    }
}

/// Full-sphere equirectangular image with an optional validity mask
/// (`1` = known, `0` = unknown; `None` = fully known).
#[derive(Clone, Debug, PartialEq)]
pub struct EquirectImage {
    /// `[H, W, C]`, values in `[0, 1]`.
    pub pixels: Tensor,
    /// `[H, W]` of 0/1.
    pub mask: Option<Tensor>,
}

impl EquirectImage {
    pub fn new(pixels: Tensor, mask: Option<Tensor>) -> Result<Self> {
        ensure!(pixels.rank() == 3, Dimension, "equirect pixels must be [H, W, C], got {:?}", pixels.shape());
        let (h, w) = (pixels.shape()[0], pixels.shape()[1]);
        ensure!(w == 2 * h && h > 0, Contract, "equirect image must have W == 2H, got {}x{}", w, h);
        if let Some(m) = &mask {
            ensure!(m.shape() == [h, w], Dimension, "mask {:?} for {}x{} image", m.shape(), w, h);
        }
        Ok(EquirectImage { pixels, mask })
    }

    /// An all-unknown black canvas.
    pub fn blank(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[height, width, channels]), Some(Tensor::zeros(&[height, width])))
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn is_known(&self, v: usize, u: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m.data()[v * self.width() + u] > 0.5)
    }

    pub fn known_count(&self) -> usize {
        match &self.mask {
            None => self.width() * self.height(),
            Some(m) => m.data().iter().filter(|&&v| v > 0.5).count(),
        }
    }

    pub fn unknown_count(&self) -> usize {
        self.width() * self.height() - self.known_count()
    }

    /// Mask with missing = fully known.
    pub fn mask_or_ones(&self) -> Tensor {
        self.mask.clone().unwrap_or_else(|| Tensor::full(&[self.height(), self.width()], 1.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Face {
    F,
    L,
    B,
    R,
    U,
    D,
}

impl Face {
    /// Listing order used for per-face conditioning rows.
    pub const ALL: [Face; 6] = [Face::F, Face::L, Face::B, Face::R, Face::U, Face::D];
    /// Tie-break priority when a ray is equidistant to several faces.
    pub const PRIORITY: [Face; 6] = [Face::F, Face::R, Face::B, Face::L, Face::U, Face::D];

    pub fn index(self) -> usize {
        Face::ALL.iter().position(|&f| f == self).unwrap()
    }

    /// The 90° camera that renders this face.
    pub fn coords(self) -> ViewCoords {
        let (lon, lat) = match self {
            Face::F => (0.0, 0.0),
            Face::R => (90.0, 0.0),
            Face::B => (-180.0, 0.0),
            Face::L => (-90.0, 0.0),
            Face::U => (0.0, 90.0),
            Face::D => (0.0, -90.0),
        };
        ViewCoords { lon, lat, fov: 90.0 }
    }

    /// Signed coordinate of `d` along this face's outward axis.
    fn axis_component(self, d: Vec3) -> f64 {
        match self {
            Face::F => d[2],
            Face::B => -d[2],
            Face::R => d[0],
            Face::L => -d[0],
            Face::U => d[1],
            Face::D => -d[1],
        }
    }

    /// Face whose axis is most aligned with `d`; ties go to the earlier
    /// face in [`Face::PRIORITY`].
    pub fn for_dir(d: Vec3) -> Face {
        let mut best = Face::F;
        let mut best_v = f64::NEG_INFINITY;
        for f in Face::PRIORITY {
            let v = f.axis_component(d);
            if v > best_v {
                best = f;
                best_v = v;
            }
        }
        best
    }

    pub fn name(self) -> &'static str {
        match self {
            Face::F => "F",
            Face::L => "L",
            Face::B => "B",
            Face::R => "R",
            Face::U => "U",
            Face::D => "D",
        }
    }
}

/// Six square faces indexed by [`Face::index`].
#[derive(Clone, Debug, PartialEq)]
pub struct CubeMap {
    pub face_size: usize,
    /// Each `[S, S, C]`.
    pub faces: Vec<Tensor>,
    /// Each `[S, S]`, present when the source had a mask.
    pub masks: Option<Vec<Tensor>>,
}

impl CubeMap {
    pub fn new(faces: Vec<Tensor>, masks: Option<Vec<Tensor>>) -> Result<Self> {
        ensure!(faces.len() == 6, Contract, "a cubemap has 6 faces, got {}", faces.len());
        let shape = faces[0].shape().to_vec();
        ensure!(shape.len() == 3 && shape[0] == shape[1], Dimension, "cube faces must be square [S, S, C], got {:?}", shape);
        for f in &faces {
            ensure!(f.shape() == shape, Dimension, "cube faces disagree: {:?} vs {:?}", f.shape(), shape);
        }
        if let Some(ms) = &masks {
            ensure!(ms.len() == 6, Contract, "need 6 face masks");
            for m in ms {
                ensure!(m.shape() == [shape[0], shape[0]], Dimension, "face mask {:?}", m.shape());
            }
        }
        Ok(CubeMap { face_size: shape[0], faces, masks })
    }

    pub fn face(&self, f: Face) -> &Tensor {
        &self.faces[f.index()]
    }

    pub fn face_mask(&self, f: Face) -> Option<&Tensor> {
        self.masks.as_ref().map(|m| &m[f.index()])
    }

    pub fn channels(&self) -> usize {
        self.faces[0].shape()[2]
    }
}

/// A perspective view cut from the sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct NFoVView {
    pub coords: ViewCoords,
    /// `[S, S, C]`.
    pub image: Tensor,
    /// `[S, S]`, present when the source had a mask.
    pub mask: Option<Tensor>,
}

impl NFoVView {
    pub fn new(coords: ViewCoords, image: Tensor, mask: Option<Tensor>) -> Result<Self> {
        coords.validate()?;
        ensure!(
            image.rank() == 3 && image.shape()[0] == image.shape()[1],
            Dimension,
            "view image must be square [S, S, C], got {:?}",
            image.shape()
        );
        if let Some(m) = &mask {
            ensure!(m.shape() == &image.shape()[..2], Dimension, "view mask {:?}", m.shape());
        }
        Ok(NFoVView { coords, image, mask })
    }

    pub fn size(&self) -> usize {
        self.image.shape()[0]
    }
}

fn render_view(img: &EquirectImage, coords: &ViewCoords, size: usize) -> (Tensor, Option<Tensor>) {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let basis = coords.basis();
    let mut out = vec![0.0; size * size * c];
    let mut mask = img.mask.as_ref().map(|_| vec![0.0; size * size]);
    for row in 0..size {
        for col in 0..size {
            let d = coords.ray_with(row, col, size, basis);
            let (u, v) = equirect_from_dir(d, w, h);
            let o = (row * size + col) * c;
            bilinear(&img.pixels, u, v, true, &mut out[o..o + c]);
            if let (Some(m), Some(src)) = (mask.as_mut(), img.mask.as_ref()) {
                m[row * size + col] = nearest(src, u, v, true);
            }
        }
    }
    let image = Tensor::new(&[size, size, c], out).expect("view shape");
    (image, mask.map(|m| Tensor::new(&[size, size], m).expect("mask shape")))
}

pub fn equirect_to_cubemap(img: &EquirectImage, face_size: usize) -> Result<CubeMap> {
    ensure!(face_size >= 4, Contract, "face size must be at least 4, got {}", face_size);
    let mut faces = Vec::with_capacity(6);
    let mut masks = Vec::with_capacity(6);
    for f in Face::ALL {
        let (t, m) = render_view(img, &f.coords(), face_size);
        faces.push(t);
        masks.push(m);
    }
    let masks = if img.mask.is_some() { Some(masks.into_iter().map(Option::unwrap).collect()) } else { None };
    CubeMap::new(faces, masks)
}

pub fn cubemap_to_equirect(cube: &CubeMap, width: usize, height: usize) -> Result<EquirectImage> {
    ensure!(width == 2 * height && height > 0, Contract, "equirect must have W == 2H, got {}x{}", width, height);
    let c = cube.channels();
    let s = cube.face_size;
    let bases: Vec<_> = Face::ALL.iter().map(|f| f.coords().basis()).collect();
    let mut out = vec![0.0; height * width * c];
    let mut mask = cube.masks.as_ref().map(|_| vec![0.0; height * width]);
    for v in 0..height {
        for u in 0..width {
            let d = dir_from_equirect(u, v, width, height)?;
            let face = Face::for_dir(d);
            let coords = face.coords();
            // The chosen face always contains the ray, but rounding at the
            // cube edges can push it a hair outside; clamp in that case.
            let (row, col) =
                coords.project_with(d, s, bases[face.index()]).unwrap_or_else(|| project_clamped(&coords, d, s, bases[face.index()]));
            let o = (v * width + u) * c;
            bilinear(cube.face(face), col, row, false, &mut out[o..o + c]);
            if let Some(m) = mask.as_mut() {
                m[v * width + u] = nearest(cube.face_mask(face).unwrap(), col, row, false);
            }
        }
    }
    EquirectImage::new(Tensor::new(&[height, width, c], out)?, mask.map(|m| Tensor::new(&[height, width], m)).transpose()?)
}

fn project_clamped(coords: &ViewCoords, d: Vec3, size: usize, (f, r, u): (Vec3, Vec3, Vec3)) -> (f64, f64) {
    let z = dot(d, f).max(1e-12);
    let t = coords.half_extent();
    let px = (dot(d, r) / z / t).clamp(-1.0, 1.0);
    let py = (dot(d, u) / z / t).clamp(-1.0, 1.0);
    let s = size as f64;
    ((1.0 - py) / 2.0 * s - 0.5, (px + 1.0) / 2.0 * s - 0.5)
}

pub fn extract_nfov(img: &EquirectImage, coords: ViewCoords, out_size: usize) -> Result<NFoVView> {
    coords.validate()?;
    ensure!(out_size >= 1, Contract, "view size must be positive");
    let (image, mask) = render_view(img, &coords, out_size);
    NFoVView::new(coords, image, mask)
}

/// Equirect pixels whose center ray lies inside the view frustum.
pub fn frustum_pixels(width: usize, height: usize, coords: &ViewCoords) -> Vec<bool> {
    let basis = coords.basis();
    let mut inside = vec![false; width * height];
    for v in 0..height {
        for u in 0..width {
            let d = dir_from_equirect(u, v, width, height).expect("in range");
            inside[v * width + u] = coords.project_with(d, 2, basis).is_some();
        }
    }
    inside
}

/// Overwrite every equirect pixel inside the view frustum with a bilinear
/// sample of the view and mark it known. Pixels outside are untouched.
pub fn composite_nfov(img: &EquirectImage, view: &NFoVView) -> Result<EquirectImage> {
    view.coords.validate()?;
    let (w, h, c) = (img.width(), img.height(), img.channels());
    ensure!(view.image.shape()[2] == c, Dimension, "view has {} channels, panorama {}", view.image.shape()[2], c);
    let size = view.size();
    let basis = view.coords.basis();
    let mut out = img.clone();
    for v in 0..h {
        for u in 0..w {
            let d = dir_from_equirect(u, v, w, h)?;
            let Some((row, col)) = view.coords.project_with(d, size, basis) else { continue };
            let o = (v * w + u) * c;
            bilinear(&view.image, col, row, false, &mut out.pixels.data_mut()[o..o + c]);
            if let Some(m) = out.mask.as_mut() {
                m.data_mut()[v * w + u] = 1.0;
            }
        }
    }
    Ok(out)
}

/// What [`coord_channels`] is evaluated for.
#[derive(Clone, Copy, Debug)]
pub enum CoordSource {
    View(ViewCoords),
    Face(Face),
}

/// Per-pixel unit ray directions as three channels, `[S, S, 3]`.
pub fn coord_channels(source: CoordSource, out_size: usize) -> Result<Tensor> {
    let coords = match source {
        CoordSource::View(c) => {
            c.validate()?;
            c
        }
        CoordSource::Face(f) => f.coords(),
    };
    let basis = coords.basis();
    let mut data = Vec::with_capacity(out_size * out_size * 3);
    for row in 0..out_size {
        for col in 0..out_size {
            data.extend_from_slice(&coords.ray_with(row, col, out_size, basis));
        }
    }
    Tensor::new(&[out_size, out_size, 3], data)
}

/// Peak signal-to-noise ratio over the rows `rows` of two `[H, W, C]` images
/// with peak value 1.
pub fn psnr_rows(a: &Tensor, b: &Tensor, rows: std::ops::Range<usize>) -> Result<f64> {
    ensure!(a.shape() == b.shape() && a.rank() == 3, Dimension, "psnr of {:?} and {:?}", a.shape(), b.shape());
    let row = a.shape()[1] * a.shape()[2];
    let (lo, hi) = (rows.start * row, rows.end * row);
    if lo >= hi || hi > a.numel() {
        return Err(Error::dim(format!("row range {rows:?} invalid for {:?}", a.shape())));
    }
    let mse: f64 = a.data()[lo..hi].iter().zip(&b.data()[lo..hi]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / (hi - lo) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Smooth seam-free RGB pattern built from low-order polynomials of the
/// ray direction. Used as the band-limited probe for resampling checks.
pub fn test_pattern(width: usize, height: usize) -> Result<EquirectImage> {
    let mut data = Vec::with_capacity(width * height * 3);
    for v in 0..height {
        for u in 0..width {
            let [x, y, z] = dir_from_equirect(u, v, width, height)?;
            data.push(0.5 + 0.3 * x + 0.1 * y * z);
            data.push(0.5 + 0.25 * z - 0.15 * x * y);
            data.push(0.5 + 0.2 * y + 0.2 * (x * x - z * z));
        }
    }
    EquirectImage::new(Tensor::new(&[height, width, 3], data)?, None)
}

#[cfg(test)]
mod tests;
