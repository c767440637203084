//! Backward warping with bilinear interpolation and the Charbonnier
//! consistency penalty built on top of it.
//!
//! Flows are displacements in pixels expressed in the reference frame of the
//! previous frame: `warp(f, δ)(x) = f(x + δ(x))`, channel 0 horizontal and
//! channel 1 vertical. Sampling coordinates are clamped to the image, which
//! keeps the operator total; the clamped coordinate has zero derivative.

use crate::error::Result;
use crate::tensor::{ensure_same_hw, Tensor};

/// Charbonnier offset.
pub const CHARBONNIER_EPS: f64 = 0.001;
/// Charbonnier exponent.
pub const CHARBONNIER_ZETA: f64 = 0.5;

/// Bilinear lookup of a continuous coordinate, with enough bookkeeping to
/// push gradients back to the four taps and to the coordinate itself.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTap {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub ax: f64,
    pub ay: f64,
    /// Whether the coordinate moved freely (not clamped) along x / y.
    pub free_x: bool,
    pub free_y: bool,
}

impl BilinearTap {
    pub fn new(sx: f64, sy: f64, h: usize, w: usize) -> Self {
        let (cx, free_x) = clamp_coord(sx, w);
        let (cy, free_y) = clamp_coord(sy, h);
        let x0 = libm::floor(cx) as usize;
        let y0 = libm::floor(cy) as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        Self {
            x0,
            x1,
            y0,
            y1,
            ax: cx - x0 as f64,
            ay: cy - y0 as f64,
            free_x,
            free_y,
        }
    }

    #[inline]
    pub fn weights(&self) -> [(usize, usize, f64); 4] {
        let (ax, ay) = (self.ax, self.ay);
        [
            (self.y0, self.x0, (1.0 - ax) * (1.0 - ay)),
            (self.y0, self.x1, ax * (1.0 - ay)),
            (self.y1, self.x0, (1.0 - ax) * ay),
            (self.y1, self.x1, ax * ay),
        ]
    }

    #[inline]
    pub fn sample(&self, plane: &[f64], w: usize) -> f64 {
        self.weights()
            .iter()
            .map(|&(y, x, wt)| wt * plane[y * w + x])
            .sum()
    }

    /// Partial derivatives of the sampled value w.r.t. the (unclamped)
    /// sampling coordinate.
    #[inline]
    pub fn coord_grad(&self, plane: &[f64], w: usize) -> (f64, f64) {
        let p = |y: usize, x: usize| plane[y * w + x];
        let (ax, ay) = (self.ax, self.ay);
        let dx = if self.free_x {
            (1.0 - ay) * (p(self.y0, self.x1) - p(self.y0, self.x0))
                + ay * (p(self.y1, self.x1) - p(self.y1, self.x0))
        } else {
            0.0
        };
        let dy = if self.free_y {
            (1.0 - ax) * (p(self.y1, self.x0) - p(self.y0, self.x0))
                + ax * (p(self.y1, self.x1) - p(self.y0, self.x1))
        } else {
            0.0
        };
        (dx, dy)
    }
}

fn clamp_coord(s: f64, n: usize) -> (f64, bool) {
    let hi = (n - 1) as f64;
    if s < 0.0 {
        (0.0, false)
    } else if s > hi {
        (hi, false)
    } else {
        (s, true)
    }
}

/// `out(x) = field(x + flow(x))`.
pub fn warp(field: &Tensor, flow: &Tensor) -> Result<Tensor> {
    ensure_same_hw("warp", field, flow)?;
    let (c, h, w) = field.chw();
    let mut out = Tensor::zeros(&[c, h, w]);
    let (u, v) = (flow.plane(0), flow.plane(1));
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let tap = BilinearTap::new(x as f64 + u[i], y as f64 + v[i], h, w);
            for k in 0..c {
                let val = tap.sample(field.plane(k), w);
                out.plane_mut(k)[i] = val;
            }
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of [`warp`]: returns `(d field, d flow)`.
pub fn warp_backward(field: &Tensor, flow: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor) {
    let (c, h, w) = field.chw();
    let mut g_field = Tensor::zeros(&[c, h, w]);
    let mut g_flow = Tensor::zeros(&[2, h, w]);
    let (u, v) = (flow.plane(0), flow.plane(1));
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let tap = BilinearTap::new(x as f64 + u[i], y as f64 + v[i], h, w);
            let (mut gu, mut gv) = (0.0, 0.0);
            for k in 0..c {
                let go = grad_out.plane(k)[i];
                if go == 0.0 {
                    continue;
                }
                let gp = g_field.plane_mut(k);
                for (ty, tx, wt) in tap.weights() {
                    gp[ty * w + tx] += wt * go;
                }
                let (dx, dy) = tap.coord_grad(field.plane(k), w);
                gu += go * dx;
                gv += go * dy;
            }
            g_flow.plane_mut(0)[i] = gu;
            g_flow.plane_mut(1)[i] = gv;
        }
    }
    (g_field, g_flow)
}

/// Generalized Charbonnier penalty `(‖a‖² + ε)^ζ` of every pixel's channel
/// vector; returns a `[1, H, W]` map.
pub fn charbonnier(residual: &Tensor) -> Tensor {
    let (_, h, w) = residual.chw();
    let mut out = Tensor::zeros(&[1, h, w]);
    let sq = channel_sq_norms(residual);
    for (o, s) in out.data_mut().iter_mut().zip(&sq) {
        *o = libm::pow(s + CHARBONNIER_EPS, CHARBONNIER_ZETA);
    }
    out
}

pub(crate) fn channel_sq_norms(t: &Tensor) -> alloc::vec::Vec<f64> {
    let (c, h, w) = t.chw();
    let mut sq = alloc::vec![0.0; h * w];
    for k in 0..c {
        for (s, r) in sq.iter_mut().zip(t.plane(k)) {
            *s += r * r;
        }
    }
    sq
}

/// Mean Charbonnier penalty over pixels, accumulated as offsets from the
/// first pixel so a constant map averages to its value exactly.
pub fn charbonnier_mean(residual: &Tensor) -> f64 {
    let map = charbonnier(residual);
    let d = map.data();
    let Some(&first) = d.first() else { return 0.0 };
    first + d.iter().map(|v| v - first).sum::<f64>() / d.len() as f64
}

/// Gradient of [`charbonnier_mean`] w.r.t. the residual.
pub fn charbonnier_mean_backward(residual: &Tensor, grad: f64) -> Tensor {
    let (c, h, w) = residual.chw();
    let sq = channel_sq_norms(residual);
    let n = (h * w) as f64;
    let coef: alloc::vec::Vec<f64> = sq
        .iter()
        .map(|s| grad / n * CHARBONNIER_ZETA * 2.0 * libm::pow(s + CHARBONNIER_EPS, CHARBONNIER_ZETA - 1.0))
        .collect();
    let mut g = Tensor::zeros(&[c, h, w]);
    for k in 0..c {
        let r = residual.plane(k).to_vec();
        for ((gv, rv), cv) in g.plane_mut(k).iter_mut().zip(&r).zip(&coef) {
            *gv = rv * cv;
        }
    }
    g
}

/// `(1/wh) Σ_x ρ(f_prev(x) − warp(f_cur, flow)(x))`.
pub fn consistency_loss(flow: &Tensor, f_prev: &Tensor, f_cur: &Tensor) -> Result<f64> {
    crate::tensor::ensure_same_shape("consistency_loss", f_prev, f_cur)?;
    let mut residual = f_prev.clone();
    residual.axpy(-1.0, &warp(f_cur, flow)?);
    Ok(charbonnier_mean(&residual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn field_3x3() -> Tensor {
        Tensor::from_vec(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap()
    }

    #[test]
    fn zero_flow_is_identity() {
        let f = field_3x3();
        let out = warp(&f, &Tensor::zeros(&[2, 3, 3])).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn unit_shift_takes_right_neighbour_and_clamps() {
        let f = field_3x3();
        let mut flow = Tensor::zeros(&[2, 3, 3]);
        flow.plane_mut(0).fill(1.0);
        let out = warp(&f, &flow).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0, 3.0, 5.0, 6.0, 6.0, 8.0, 9.0, 9.0]);
    }

    #[test]
    fn half_pixel_is_average() {
        let (a, b) = (0.3, 1.7);
        let f = Tensor::from_vec(&[1, 1, 2], vec![a, b]).unwrap();
        let flow = Tensor::from_vec(&[2, 1, 2], vec![0.5, 0.0, 0.0, 0.0]).unwrap();
        let out = warp(&f, &flow).unwrap();
        assert!((out.data()[0] - (0.5 * a + 0.5 * b)).abs() < 1e-15);
        assert_eq!(out.data()[1], b);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(warp(&field_3x3(), &Tensor::zeros(&[2, 2, 3])).is_err());
    }

    #[test]
    fn charbonnier_reference_values() {
        let zero = Tensor::zeros(&[2, 1, 1]);
        assert!((charbonnier(&zero).item() - 0.031_622_776_601_683_79).abs() < 1e-15);
        let unit = Tensor::from_vec(&[2, 1, 1], vec![0.6, 0.8]).unwrap();
        assert!((charbonnier(&unit).item() - libm::sqrt(1.001)).abs() < 1e-15);
        let big = Tensor::from_vec(&[1, 1, 1], vec![1e4]).unwrap();
        assert!((charbonnier(&big).item() / 1e4 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn consistency_of_identical_frames_is_offset() {
        let f = field_3x3();
        let l = consistency_loss(&Tensor::zeros(&[2, 3, 3]), &f, &f).unwrap();
        assert_eq!(l, libm::pow(CHARBONNIER_EPS, CHARBONNIER_ZETA));
    }

    #[test]
    fn shifted_pair_reaches_offset_away_from_border() {
        // prev(x) = cur(x + 1): residual vanishes except on the clamped column.
        for w in [4usize, 16, 64] {
            let cur = Tensor::from_vec(&[1, 2, w], (0..2 * w).map(|i| (i % w) as f64).collect()).unwrap();
            let prev = Tensor::from_vec(
                &[1, 2, w],
                (0..2 * w).map(|i| ((i % w) + 1).min(w - 1) as f64).collect(),
            )
            .unwrap();
            let mut flow = Tensor::zeros(&[2, 2, w]);
            flow.plane_mut(0).fill(1.0);
            let r = &prev;
            let mut residual = r.clone();
            residual.axpy(-1.0, &warp(&cur, &flow).unwrap());
            assert!(residual.data().iter().all(|v| *v == 0.0));
            let l = consistency_loss(&flow, &prev, &cur).unwrap();
            assert!((l - libm::sqrt(CHARBONNIER_EPS)).abs() < 1e-15);
        }
    }
}
