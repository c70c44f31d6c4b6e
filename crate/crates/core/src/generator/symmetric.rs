//! A small triplane-flavoured generator that is left-right symmetric by
//! construction.
//!
//! Three feature planes (xy, xz, yz) are sampled bilinearly at a point obtained
//! by rotating each pixel's camera-space position by the pose. The x-dependent
//! planes store only one half along x and are sampled at `|x|`, so for every θ
//! `render(mirror(p)) == flip_horizontal(render(p))`. A latent-driven
//! per-channel gain and a `tanh` output keep the map nonlinear in θ.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Generator, GeneratorKind, Pose, SuperRes};
use crate::rng::standard_normal_vec;
use crate::tensor::{ScoreTensor, Shape};

/// Camera-space depth of the image plane.
const DEPTH: f64 = 0.5;
/// Half-extent of the feature volume.
const EXTENT: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymmetricToyConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Feature-plane resolution; must be even.
    pub grid: usize,
    pub latent_dim: usize,
    pub sr: SuperRes,
}

impl Default for SymmetricToyConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            height: 16,
            width: 16,
            grid: 8,
            latent_dim: 8,
            sr: SuperRes::Bilinear,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricToy {
    cfg: SymmetricToyConfig,
    half: usize,
}

/// Four `(flat index within plane, weight)` taps of one bilinear lookup.
type Taps = [(usize, f64); 4];

impl SymmetricToy {
    pub fn new(cfg: SymmetricToyConfig) -> crate::Result<Self> {
        if cfg.grid < 2 || !cfg.grid.is_multiple_of(2) {
            return Err(crate::Error::config("grid", "must be even and at least 2"));
        }
        if cfg.channels == 0 || cfg.height == 0 || cfg.width == 0 {
            return Err(crate::Error::config("shape", "every dimension must be positive"));
        }
        Ok(Self { cfg, half: cfg.grid / 2 })
    }

    pub fn config(&self) -> &SymmetricToyConfig {
        &self.cfg
    }

    fn xy_len(&self) -> usize {
        self.cfg.grid * self.half
    }

    fn yz_len(&self) -> usize {
        self.cfg.grid * self.cfg.grid
    }

    fn per_channel_planes(&self) -> usize {
        2 * self.xy_len() + self.yz_len()
    }

    /// Offsets of the xy, xz and yz planes for channel `c`.
    fn plane_offsets(&self, c: usize) -> [usize; 3] {
        let base = c * self.per_channel_planes();
        [base, base + self.xy_len(), base + 2 * self.xy_len()]
    }

    fn gain_offset(&self) -> usize {
        self.cfg.channels * self.per_channel_planes()
    }

    fn bias_offset(&self) -> usize {
        self.gain_offset() + self.cfg.channels * self.cfg.latent_dim
    }

    fn grid_coord(&self, a: f64) -> f64 {
        let n = (self.cfg.grid - 1) as f64;
        ((a / EXTENT + 1.0) * 0.5 * n).clamp(0.0, n)
    }

    fn axis_taps(&self, g: f64) -> [(usize, f64); 2] {
        let n = self.cfg.grid;
        let i0 = (libm::floor(g) as usize).min(n - 2);
        let f = g - i0 as f64;
        [(i0, 1.0 - f), (i0 + 1, f)]
    }

    /// x taps folded onto the stored half.
    fn x_taps(&self, x: f64) -> [(usize, f64); 2] {
        let n = self.cfg.grid;
        let [(a, wa), (b, wb)] = self.axis_taps(self.grid_coord(libm::fabs(x)));
        [(a.min(n - 1 - a), wa), (b.min(n - 1 - b), wb)]
    }

    fn combine(rows: [(usize, f64); 2], cols: [(usize, f64); 2], ncols: usize) -> Taps {
        [
            (rows[0].0 * ncols + cols[0].0, rows[0].1 * cols[0].1),
            (rows[0].0 * ncols + cols[1].0, rows[0].1 * cols[1].1),
            (rows[1].0 * ncols + cols[0].0, rows[1].1 * cols[0].1),
            (rows[1].0 * ncols + cols[1].0, rows[1].1 * cols[1].1),
        ]
    }

    /// Sampling taps for every pixel of the low-res render at `pose`.
    fn geometry(&self, pose: &Pose) -> Vec<[Taps; 3]> {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let (sy, cy) = (libm::sin(pose.yaw), libm::cos(pose.yaw));
        let (sp, cp) = (libm::sin(pose.pitch), libm::cos(pose.pitch));
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h {
            // exact antisymmetry in j keeps the mirror identity bitwise
            let v = (h as f64 - 1.0 - 2.0 * i as f64) / h as f64;
            for j in 0..w {
                let u = (2.0 * j as f64 + 1.0 - w as f64) / w as f64;
                let x = u * cy + DEPTH * sy;
                let zr = DEPTH * cy - u * sy;
                let y = v * cp - zr * sp;
                let z = v * sp + zr * cp;
                let xt = self.x_taps(x);
                let yt = self.axis_taps(self.grid_coord(y));
                let zt = self.axis_taps(self.grid_coord(z));
                out.push([
                    Self::combine(yt, xt, self.half),
                    Self::combine(zt, xt, self.half),
                    Self::combine(yt, zt, self.cfg.grid),
                ]);
            }
        }
        out
    }

    fn gains(&self, body: &[f64], latent: &[f64]) -> Vec<f64> {
        let l = self.cfg.latent_dim;
        (0..self.cfg.channels)
            .map(|c| {
                let row = &body[self.gain_offset() + c * l..self.gain_offset() + (c + 1) * l];
                1.0 + row.iter().zip(latent).map(|(a, z)| a * z).sum::<f64>()
            })
            .collect()
    }

    fn features(&self, body: &[f64], c: usize, taps: &[Taps; 3]) -> f64 {
        let offs = self.plane_offsets(c);
        let mut f = 0.0;
        for (plane, t) in offs.iter().zip(taps) {
            for &(k, wgt) in t {
                f += wgt * body[plane + k];
            }
        }
        f
    }
}

impl Generator for SymmetricToy {
    fn kind(&self) -> GeneratorKind {
        GeneratorKind::SymmetricToy
    }

    fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    fn low_shape(&self) -> Shape {
        Shape::new(self.cfg.channels, self.cfg.height, self.cfg.width)
    }

    fn body_len(&self) -> usize {
        self.bias_offset() + self.cfg.channels
    }

    fn super_res(&self) -> SuperRes {
        self.cfg.sr
    }

    fn render_low(&self, body: &[f64], latent: &[f64], pose: &Pose) -> ScoreTensor {
        let geo = self.geometry(pose);
        let gains = self.gains(body, latent);
        let w = self.cfg.width;
        ScoreTensor::from_fn(self.low_shape(), |c, i, j| {
            let f = self.features(body, c, &geo[i * w + j]);
            libm::tanh(gains[c] * f + body[self.bias_offset() + c])
        })
    }

    fn backprop_low(&self, body: &[f64], latent: &[f64], pose: &Pose, grad: &ScoreTensor, out: &mut [f64]) {
        let geo = self.geometry(pose);
        let gains = self.gains(body, latent);
        let (h, w, l) = (self.cfg.height, self.cfg.width, self.cfg.latent_dim);
        let mut d_gain = alloc::vec![0.0; self.cfg.channels];
        for c in 0..self.cfg.channels {
            let offs = self.plane_offsets(c);
            for i in 0..h {
                for j in 0..w {
                    let taps = &geo[i * w + j];
                    let f = self.features(body, c, taps);
                    let y = libm::tanh(gains[c] * f + body[self.bias_offset() + c]);
                    let d_pre = grad.get(c, i, j) * (1.0 - y * y);
                    out[self.bias_offset() + c] += d_pre;
                    d_gain[c] += d_pre * f;
                    let d_f = d_pre * gains[c];
                    for (plane, t) in offs.iter().zip(taps) {
                        for &(k, wgt) in t {
                            out[plane + k] += d_f * wgt;
                        }
                    }
                }
            }
            for k in 0..l {
                out[self.gain_offset() + c * l + k] += d_gain[c] * latent[k];
            }
        }
    }

    fn init_body<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut body = standard_normal_vec(self.body_len(), rng);
        let gain = self.gain_offset();
        for (k, v) in body.iter_mut().enumerate() {
            *v *= if k < gain {
                0.3
            } else if k < self.bias_offset() {
                0.1
            } else {
                0.0
            };
        }
        body
    }
}
