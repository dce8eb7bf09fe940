//! Fixed image ↔ latent surrogate: 4× average pooling with a 3→4 channel
//! map on the way in, the pseudo-inverse map and bilinear 4× upsampling on
//! the way out.

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

pub const FACTOR: usize = 4;
pub const LATENT_CHANNELS: usize = 4;

/// Orthonormal rows, so the pseudo-inverse is the transpose.
const MAP: [[f64; 4]; 3] = [[0.5, 0.5, 0.5, 0.5], [0.5, -0.5, 0.5, -0.5], [0.5, 0.5, -0.5, -0.5]];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentCodec {
    /// Multiplies centered pixel values so latents sit near unit scale.
    pub scale: f64,
}

impl Default for LatentCodec {
    fn default() -> Self {
        LatentCodec { scale: 3.0 }
    }
}

impl LatentCodec {
    /// `[H, W, 3]` in `[0, 1]` → `[H/4, W/4, 4]`.
    pub fn encode(&self, img: &Tensor) -> Result<Tensor> {
        ensure!(img.rank() == 3 && img.shape()[2] == 3, Dimension, "encode expects [H, W, 3], got {:?}", img.shape());
        let (h, w) = (img.shape()[0], img.shape()[1]);
        ensure!(h % FACTOR == 0 && w % FACTOR == 0, Dimension, "image extents {}x{} not divisible by {}", w, h, FACTOR);
        let (lh, lw) = (h / FACTOR, w / FACTOR);
        let mut out = vec![0.0; lh * lw * LATENT_CHANNELS];
        let norm = 1.0 / (FACTOR * FACTOR) as f64;
        for y in 0..lh {
            for x in 0..lw {
                let mut rgb = [0.0; 3];
                for dy in 0..FACTOR {
                    for dx in 0..FACTOR {
                        let o = ((y * FACTOR + dy) * w + x * FACTOR + dx) * 3;
                        for (k, c) in rgb.iter_mut().enumerate() {
                            *c += img.data()[o + k] * norm;
                        }
                    }
                }
                let o = (y * lw + x) * LATENT_CHANNELS;
                for (k, row) in MAP.iter().enumerate() {
                    let v = (rgb[k] - 0.5) * self.scale;
                    for (j, m) in row.iter().enumerate() {
                        out[o + j] += v * m;
                    }
                }
            }
        }
        Tensor::new(&[lh, lw, LATENT_CHANNELS], out)
    }

    /// Nearest latent, cell by cell, whose colour lies in `[0, 1]`.
    pub fn project(&self, z: &mut Tensor) -> Result<()> {
        ensure!(
            z.rank() == 3 && z.shape()[2] == LATENT_CHANNELS,
            Dimension,
            "project expects [h, w, {}], got {:?}",
            LATENT_CHANNELS,
            z.shape()
        );
        for cell in z.data_mut().chunks_mut(LATENT_CHANNELS) {
            let mut v = [0.0; 3];
            for (k, row) in MAP.iter().enumerate() {
                let dot: f64 = row.iter().zip(cell.iter()).map(|(m, x)| m * x).sum();
                v[k] = (dot / self.scale + 0.5).clamp(0.0, 1.0);
            }
            cell.fill(0.0);
            for (k, row) in MAP.iter().enumerate() {
                let c = (v[k] - 0.5) * self.scale;
                for (o, m) in cell.iter_mut().zip(row) {
                    *o += c * m;
                }
            }
        }
        Ok(())
    }

    /// `[h, w, 4]` → `[4h, 4w, 3]`, clamped to `[0, 1]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        ensure!(
            z.rank() == 3 && z.shape()[2] == LATENT_CHANNELS,
            Dimension,
            "decode expects [h, w, {}], got {:?}",
            LATENT_CHANNELS,
            z.shape()
        );
        let (lh, lw) = (z.shape()[0], z.shape()[1]);
        let mut rgb_small = vec![0.0; lh * lw * 3];
        for i in 0..lh * lw {
            for (k, row) in MAP.iter().enumerate() {
                let dot: f64 = row.iter().zip(&z.data()[i * LATENT_CHANNELS..(i + 1) * LATENT_CHANNELS]).map(|(m, v)| m * v).sum();
                rgb_small[i * 3 + k] = dot / self.scale + 0.5;
            }
        }
        let small = Tensor::new(&[lh, lw, 3], rgb_small)?;
        let (h, w) = (lh * FACTOR, lw * FACTOR);
        let mut out = vec![0.0; h * w * 3];
        for y in 0..h {
            let sy = (y as f64 + 0.5) / FACTOR as f64 - 0.5;
            for x in 0..w {
                let sx = (x as f64 + 0.5) / FACTOR as f64 - 0.5;
                let o = (y * w + x) * 3;
                crate::geometry::bilinear(&small, sx, sy, false, &mut out[o..o + 3]);
            }
        }
        for v in &mut out {
            *v = v.clamp(0.0, 1.0);
        }
        Tensor::new(&[h, w, 3], out)
    }
}

/// Latent-resolution mask: a cell is known only when all of its pixels are.
pub fn downsample_mask(mask: &Tensor) -> Result<Tensor> {
    ensure!(mask.rank() == 2, Dimension, "mask must be [H, W], got {:?}", mask.shape());
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    ensure!(h % FACTOR == 0 && w % FACTOR == 0, Dimension, "mask {}x{} not divisible by {}", w, h, FACTOR);
    let (lh, lw) = (h / FACTOR, w / FACTOR);
    Ok(Tensor::from_fn(&[lh, lw], |i| {
        let (y, x) = (i / lw, i % lw);
        let all = (0..FACTOR).all(|dy| (0..FACTOR).all(|dx| mask.data()[(y * FACTOR + dy) * w + x * FACTOR + dx] > 0.5));
        if all {
            1.0
        } else {
            0.0
        }
    }))
}
