//! Super-resolution stage: the fixed 2× bilinear upsampler, its adjoint, and
//! a learnable depthwise 3×3 convolution applied after it.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tensor::{ScoreTensor, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuperRes {
    /// `high_res = low_res`; used to test tap equivalence.
    Identity,
    /// Fixed bilinear 2× upsampling.
    Bilinear,
    /// Bilinear 2× followed by a depthwise 3×3 convolution with bias.
    Learnable,
}

const KERNEL: usize = 9;

impl SuperRes {
    pub fn output_shape(&self, low: Shape) -> Shape {
        match self {
            SuperRes::Identity => low,
            SuperRes::Bilinear | SuperRes::Learnable => low.scaled(2),
        }
    }

    pub fn param_len(&self, channels: usize) -> usize {
        match self {
            SuperRes::Learnable => channels * (KERNEL + 1),
            _ => 0,
        }
    }

    /// Offsets (relative to the SR parameter block) of the convolution biases.
    pub fn bias_offsets(&self, channels: usize) -> core::ops::Range<usize> {
        match self {
            SuperRes::Learnable => channels * KERNEL..channels * (KERNEL + 1),
            _ => 0..0,
        }
    }

    /// Identity kernels, zero bias.
    pub fn init_params(&self, channels: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.param_len(channels)];
        if let SuperRes::Learnable = self {
            for c in 0..channels {
                p[c * KERNEL + 4] = 1.0;
            }
        }
        p
    }

    pub fn forward(&self, low: &ScoreTensor, params: &[f64]) -> ScoreTensor {
        match self {
            SuperRes::Identity => low.clone(),
            SuperRes::Bilinear => upsample_bilinear(low),
            SuperRes::Learnable => conv3x3(&upsample_bilinear(low), params),
        }
    }

    /// Returns `(∂/∂low, ∂/∂params)` for an upstream gradient on the output.
    pub fn backward(&self, low: &ScoreTensor, params: &[f64], grad: &ScoreTensor) -> (ScoreTensor, Vec<f64>) {
        match self {
            SuperRes::Identity => (grad.clone(), Vec::new()),
            SuperRes::Bilinear => (upsample_bilinear_adjoint(grad), Vec::new()),
            SuperRes::Learnable => {
                let up = upsample_bilinear(low);
                let (d_up, d_params) = conv3x3_backward(&up, params, grad);
                (upsample_bilinear_adjoint(&d_up), d_params)
            }
        }
    }
}

/// Two-tap interpolation weights for output index `o` of a 2× upsample of length `n`
/// (half-pixel centers, edge-clamped).
#[inline]
fn taps(o: usize, n: usize) -> [(usize, f64); 2] {
    let k = o / 2;
    if o.is_multiple_of(2) {
        [(k.saturating_sub(1), 0.25), (k, 0.75)]
    } else {
        [(k, 0.75), ((k + 1).min(n - 1), 0.25)]
    }
}

/// Bilinear 2× upsampling, `(C, H, W) → (C, 2H, 2W)`. Preserves constants.
pub fn upsample_bilinear(low: &ScoreTensor) -> ScoreTensor {
    let s = low.shape();
    let out_shape = s.scaled(2);
    // rows first into (C, 2H, W), then columns
    let mut mid = vec![0.0; s.channels * out_shape.height * s.width];
    for c in 0..s.channels {
        for oi in 0..out_shape.height {
            let [(a, wa), (b, wb)] = taps(oi, s.height);
            for j in 0..s.width {
                mid[(c * out_shape.height + oi) * s.width + j] = wa * low.get(c, a, j) + wb * low.get(c, b, j);
            }
        }
    }
    ScoreTensor::from_fn(out_shape, |c, oi, oj| {
        let [(a, wa), (b, wb)] = taps(oj, s.width);
        let row = (c * out_shape.height + oi) * s.width;
        wa * mid[row + a] + wb * mid[row + b]
    })
}

/// Exact adjoint of [`upsample_bilinear`]: `(C, 2H, 2W) → (C, H, W)`.
pub fn upsample_bilinear_adjoint(high: &ScoreTensor) -> ScoreTensor {
    let hs = high.shape();
    debug_assert!(hs.height.is_multiple_of(2) && hs.width.is_multiple_of(2));
    let low = Shape::new(hs.channels, hs.height / 2, hs.width / 2);
    let mut mid = vec![0.0; hs.channels * hs.height * low.width];
    for c in 0..hs.channels {
        for oi in 0..hs.height {
            let row = (c * hs.height + oi) * low.width;
            for oj in 0..hs.width {
                let g = high.get(c, oi, oj);
                for (b, w) in taps(oj, low.width) {
                    mid[row + b] += w * g;
                }
            }
        }
    }
    let mut out = ScoreTensor::zeros(low);
    let data = out.data_mut();
    for c in 0..hs.channels {
        for oi in 0..hs.height {
            for (a, w) in taps(oi, low.height) {
                for j in 0..low.width {
                    data[(c * low.height + a) * low.width + j] += w * mid[(c * hs.height + oi) * low.width + j];
                }
            }
        }
    }
    out
}

fn conv3x3(x: &ScoreTensor, params: &[f64]) -> ScoreTensor {
    let s = x.shape();
    let bias = &params[s.channels * KERNEL..];
    ScoreTensor::from_fn(s, |c, i, j| {
        let k = &params[c * KERNEL..(c + 1) * KERNEL];
        let mut acc = bias[c];
        for di in 0..3 {
            for dj in 0..3 {
                let (ii, jj) = (i + di, j + dj);
                if ii >= 1 && jj >= 1 && ii - 1 < s.height && jj - 1 < s.width {
                    acc += k[di * 3 + dj] * x.get(c, ii - 1, jj - 1);
                }
            }
        }
        acc
    })
}

fn conv3x3_backward(x: &ScoreTensor, params: &[f64], grad: &ScoreTensor) -> (ScoreTensor, Vec<f64>) {
    let s = x.shape();
    let mut dx = ScoreTensor::zeros(s);
    let mut dp = vec![0.0; params.len()];
    for c in 0..s.channels {
        for i in 0..s.height {
            for j in 0..s.width {
                let g = grad.get(c, i, j);
                dp[s.channels * KERNEL + c] += g;
                for di in 0..3 {
                    for dj in 0..3 {
                        let (ii, jj) = (i + di, j + dj);
                        if ii >= 1 && jj >= 1 && ii - 1 < s.height && jj - 1 < s.width {
                            let w = params[c * KERNEL + di * 3 + dj];
                            dp[c * KERNEL + di * 3 + dj] += g * x.get(c, ii - 1, jj - 1);
                            let idx = dx.index(c, ii - 1, jj - 1);
                            dx.data_mut()[idx] += g * w;
                        }
                    }
                }
            }
        }
    }
    (dx, dp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal_tensor, standard_normal_vec, stream, Stream};

    #[test]
    fn constants_are_preserved() {
        let x = ScoreTensor::filled(Shape::new(3, 5, 4), 0.7);
        let y = upsample_bilinear(&x);
        assert_eq!(y.shape(), Shape::new(3, 10, 8));
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn linear_in_input() {
        let mut rng = stream(1, Stream::Init);
        let x = standard_normal_tensor(Shape::new(2, 4, 6), &mut rng);
        let a = -1.7;
        let lhs = upsample_bilinear(&x.scale(a));
        let rhs = upsample_bilinear(&x).scale(a);
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_inner_product_identity() {
        let mut rng = stream(2, Stream::Init);
        for (h, w) in [(1, 1), (1, 3), (4, 4), (16, 16), (5, 7)] {
            let x = standard_normal_tensor(Shape::new(4, h, w), &mut rng);
            let y = standard_normal_tensor(Shape::new(4, 2 * h, 2 * w), &mut rng);
            let lhs = upsample_bilinear(&x).dot(&y).unwrap();
            let rhs = x.dot(&upsample_bilinear_adjoint(&y)).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "{h}x{w}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn bilinear_commutes_with_flip() {
        let mut rng = stream(3, Stream::Init);
        let x = standard_normal_tensor(Shape::new(2, 6, 5), &mut rng);
        assert_eq!(
            upsample_bilinear(&x.flip_horizontal()),
            upsample_bilinear(&x).flip_horizontal()
        );
    }

    #[test]
    fn learnable_initialises_to_bilinear() {
        let mut rng = stream(4, Stream::Init);
        let x = standard_normal_tensor(Shape::new(3, 4, 4), &mut rng);
        let p = SuperRes::Learnable.init_params(3);
        let a = SuperRes::Learnable.forward(&x, &p);
        let b = SuperRes::Bilinear.forward(&x, &[]);
        assert_eq!(a, b);
    }

    #[test]
    fn learnable_backward_matches_finite_differences() {
        let mut rng = stream(5, Stream::Init);
        let sr = SuperRes::Learnable;
        let x = standard_normal_tensor(Shape::new(2, 3, 3), &mut rng);
        let p = standard_normal_vec(sr.param_len(2), &mut rng);
        let g = standard_normal_tensor(Shape::new(2, 6, 6), &mut rng);
        let (dx, dp) = sr.backward(&x, &p, &g);
        let f = |x: &ScoreTensor, p: &[f64]| sr.forward(x, p).dot(&g).unwrap();
        let h = 1e-5;
        for k in 0..p.len() {
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp[k] += h;
            pm[k] -= h;
            let fd = (f(&x, &pp) - f(&x, &pm)) / (2.0 * h);
            assert!((fd - dp[k]).abs() < 1e-7, "param {k}");
        }
        for k in 0..x.data().len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[k] += h;
            xm.data_mut()[k] -= h;
            let fd = (f(&xp, &p) - f(&xm, &p)) / (2.0 * h);
            assert!((fd - dx.data()[k]).abs() < 1e-7, "input {k}");
        }
    }
}
