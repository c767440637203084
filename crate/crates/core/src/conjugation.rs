//! Per-level conjugation loss: three consistency penalties tying features
//! and flows across levels, plus the flow regularizer.
//!
//! For level `ℓ` with flow `δ^ℓ`, first-level flow `δ^1` and features
//! `f^ℓ`, `f^{ℓ-1}` (with `f^0` the raw frames):
//!
//! ```text
//! L^ℓ = λ_cur·Lc(δ^ℓ, f^ℓ_{t-1}, f^ℓ_t)
//!     + λ_skip·Lc(sg(δ^1), f^ℓ_{t-1}, f^ℓ_t)
//!     + λ_low·Lc(δ^ℓ, f^{ℓ-1}_{t-1}, f^{ℓ-1}_t)
//!     + λ_s·mean‖∇δ^ℓ‖² + λ_r·mean‖δ^ℓ‖²
//! ```
//!
//! `sg` stops gradient. At level 1 the first two terms coincide and both use
//! `sg(δ^1)`, so only the third term and the regularizer train `δ^1`.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelCoefficients {
    /// Weight of `Lc(δ^ℓ, f^ℓ_{t-1}, f^ℓ_t)`.
    pub cur: f64,
    /// Weight of `Lc(δ^1, f^ℓ_{t-1}, f^ℓ_t)`.
    pub skip: f64,
    /// Weight of `Lc(δ^ℓ, f^{ℓ-1}_{t-1}, f^{ℓ-1}_t)`.
    pub low: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugationCoefficients {
    pub levels: Vec<LevelCoefficients>,
    /// `λ_s`, weight of the squared spatial flow gradient.
    pub smoothness: f64,
    /// `λ_r`, weight of the squared flow magnitude.
    pub magnitude: f64,
}

impl ConjugationCoefficients {
    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.levels.len() != levels {
            return Err(config_err(alloc::format!(
                "conjugation coefficients given for {} levels, model has {levels}",
                self.levels.len()
            )));
        }
        let all = self
            .levels
            .iter()
            .flat_map(|c| [c.cur, c.skip, c.low])
            .chain([self.smoothness, self.magnitude]);
        for v in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err("conjugation coefficients must be finite and non-negative"));
            }
        }
        if self.levels[0].low <= 0.0 {
            return Err(config_err(
                "level-1 low coefficient must be positive: the first flow is trained against raw pixels",
            ));
        }
        Ok(())
    }
}

/// `λ_s·mean_x ‖∇δ(x)‖² + λ_r·mean_x ‖δ(x)‖²` with forward differences and
/// replicated edges (the last row/column has zero gradient).
pub fn flow_regularizer_value(flow: &Tensor, smooth: f64, magnitude: f64) -> f64 {
    let (c, h, w) = flow.chw();
    let n = (h * w) as f64;
    let (mut grad_sq, mut mag_sq) = (0.0, 0.0);
    for k in 0..c {
        let p = flow.plane(k);
        for y in 0..h {
            for x in 0..w {
                let v = p[y * w + x];
                mag_sq += v * v;
                if x + 1 < w {
                    let d = p[y * w + x + 1] - v;
                    grad_sq += d * d;
                }
                if y + 1 < h {
                    let d = p[(y + 1) * w + x] - v;
                    grad_sq += d * d;
                }
            }
        }
    }
    smooth * grad_sq / n + magnitude * mag_sq / n
}

pub(crate) fn flow_regularizer_backward(flow: &Tensor, smooth: f64, magnitude: f64, grad: f64) -> Tensor {
    let (c, h, w) = flow.chw();
    let n = (h * w) as f64;
    let (ks, km) = (2.0 * smooth * grad / n, 2.0 * magnitude * grad / n);
    let mut g = Tensor::zeros(&[c, h, w]);
    for k in 0..c {
        let p = flow.plane(k);
        let gp = g.plane_mut(k);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                gp[i] += km * p[i];
                if x + 1 < w {
                    let d = ks * (p[i + 1] - p[i]);
                    gp[i + 1] += d;
                    gp[i] -= d;
                }
                if y + 1 < h {
                    let d = ks * (p[i + w] - p[i]);
                    gp[i + w] += d;
                    gp[i] -= d;
                }
            }
        }
    }
    g
}

/// Graph handles for one level's conjugation loss.
#[derive(Clone, Copy, Debug)]
pub struct ConjugationInputs {
    /// 1-based level index.
    pub level: usize,
    pub flow: Var,
    pub first_flow: Var,
    pub feat_prev: Var,
    pub feat_cur: Var,
    /// Level `ℓ-1` features (raw frames at level 1).
    pub lower_prev: Var,
    pub lower_cur: Var,
}

/// Individual terms of one level, for logging. Missing terms had a zero
/// coefficient and were not evaluated.
#[derive(Clone, Copy, Debug)]
pub struct ConjugationTerms {
    pub total: Var,
    pub cur: Option<Var>,
    pub skip: Option<Var>,
    pub low: Option<Var>,
    pub reg: Option<Var>,
}

/// Builds `L^ℓ_conj` on the graph, applying the stop-gradient rule for the
/// first-level flow.
pub fn conjugation_loss(
    g: &mut Graph,
    inputs: &ConjugationInputs,
    coeffs: &LevelCoefficients,
    smoothness: f64,
    magnitude: f64,
) -> Result<ConjugationTerms> {
    if inputs.level == 0 {
        return Err(Error::LevelOutOfRange {
            level: 0,
            levels: usize::MAX,
        });
    }
    let shielded_first = g.detach(inputs.first_flow);
    let own_flow = if inputs.level == 1 {
        shielded_first
    } else {
        inputs.flow
    };
    let mut parts = Vec::new();
    let cur = if coeffs.cur > 0.0 {
        let v = g.consistency(own_flow, inputs.feat_prev, inputs.feat_cur)?;
        parts.push((v, coeffs.cur));
        Some(v)
    } else {
        None
    };
    let skip = if coeffs.skip > 0.0 {
        let v = g.consistency(shielded_first, inputs.feat_prev, inputs.feat_cur)?;
        parts.push((v, coeffs.skip));
        Some(v)
    } else {
        None
    };
    let low = if coeffs.low > 0.0 {
        let v = g.consistency(inputs.flow, inputs.lower_prev, inputs.lower_cur)?;
        parts.push((v, coeffs.low));
        Some(v)
    } else {
        None
    };
    let reg = if smoothness > 0.0 || magnitude > 0.0 {
        let v = g.flow_regularizer(inputs.flow, smoothness, magnitude);
        parts.push((v, 1.0));
        Some(v)
    } else {
        None
    };
    let total = g.weighted_sum(&parts);
    Ok(ConjugationTerms {
        total,
        cur,
        skip,
        low,
        reg,
    })
}

/// `Σ_ℓ L^ℓ_conj`; `levels[i]` must be level `i + 1`.
pub fn total_conjugation(
    g: &mut Graph,
    levels: &[ConjugationInputs],
    coeffs: &ConjugationCoefficients,
) -> Result<(Var, Vec<ConjugationTerms>)> {
    if levels.len() != coeffs.levels.len() {
        return Err(Error::LevelOutOfRange {
            level: levels.len(),
            levels: coeffs.levels.len(),
        });
    }
    let mut terms = Vec::with_capacity(levels.len());
    for (i, (inp, c)) in levels.iter().zip(&coeffs.levels).enumerate() {
        if inp.level != i + 1 {
            return Err(Error::LevelOutOfRange {
                level: inp.level,
                levels: levels.len(),
            });
        }
        terms.push(conjugation_loss(g, inp, c, coeffs.smoothness, coeffs.magnitude)?);
    }
    let parts: Vec<(Var, f64)> = terms.iter().map(|t| (t.total, 1.0)).collect();
    Ok((g.weighted_sum(&parts), terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::{consistency_loss, CHARBONNIER_EPS};
    use alloc::vec;

    #[test]
    fn regularizer_reference_values() {
        assert_eq!(flow_regularizer_value(&Tensor::zeros(&[2, 3, 3]), 1.0, 1.0), 0.0);
        let mut constant = Tensor::zeros(&[2, 4, 5]);
        constant.plane_mut(0).fill(3.0);
        constant.plane_mut(1).fill(4.0);
        assert!((flow_regularizer_value(&constant, 1.0, 1.0) - 25.0).abs() < 1e-12);
        // u = (0, 2) on a 1×2 grid: forward differences (2, 0), mean of squares 2.
        let two = Tensor::from_vec(&[2, 1, 2], vec![0.0, 2.0, 0.0, 0.0]).unwrap();
        assert!((flow_regularizer_value(&two, 1.0, 0.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn regularizer_gradient_matches_differences() {
        let flow = Tensor::from_vec(&[2, 3, 3], (0..18).map(|i| libm::sin(i as f64 * 1.3)).collect()).unwrap();
        let g = flow_regularizer_backward(&flow, 0.7, 0.3, 1.0);
        let h = 1e-6;
        for i in 0..18 {
            let mut a = flow.clone();
            a.data_mut()[i] += h;
            let mut b = flow.clone();
            b.data_mut()[i] -= h;
            let fd = (flow_regularizer_value(&a, 0.7, 0.3) - flow_regularizer_value(&b, 0.7, 0.3)) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    fn level_one(g: &mut Graph, frame_prev: Tensor, frame_cur: Tensor, flow: Tensor) -> ConjugationInputs {
        let flow = g.param(flow);
        let fp = g.param(frame_prev.clone());
        let fc = g.constant(frame_cur.clone());
        let ip = g.constant(frame_prev);
        let ic = g.constant(frame_cur);
        ConjugationInputs {
            level: 1,
            flow,
            first_flow: flow,
            feat_prev: fp,
            feat_cur: fc,
            lower_prev: ip,
            lower_cur: ic,
        }
    }

    #[test]
    fn static_level_one_is_sum_of_offsets() {
        let mut g = Graph::new();
        let frame = Tensor::full(&[3, 4, 4], 0.4);
        let inp = level_one(&mut g, frame.clone(), frame, Tensor::zeros(&[2, 4, 4]));
        let c = LevelCoefficients {
            cur: 0.5,
            skip: 0.25,
            low: 1.0,
        };
        let t = conjugation_loss(&mut g, &inp, &c, 0.1, 0.1).unwrap();
        let expect = 1.75 * libm::sqrt(CHARBONNIER_EPS);
        assert!((g.value(t.total).item() - expect).abs() < 1e-15);
    }

    #[test]
    fn only_low_term_and_regularizer_train_first_flow() {
        let frame_prev = Tensor::from_vec(&[1, 4, 4], (0..16).map(|i| libm::sin(i as f64)).collect()).unwrap();
        let frame_cur = frame_prev.map(|v| v * 0.9 + 0.05);
        let flow = Tensor::from_vec(&[2, 4, 4], (0..32).map(|i| 0.3 * libm::cos(i as f64)).collect()).unwrap();
        let mut g = Graph::new();
        let inp = level_one(&mut g, frame_prev, frame_cur, flow);
        let c = LevelCoefficients {
            cur: 1.0,
            skip: 1.0,
            low: 0.0,
        };
        let t = conjugation_loss(&mut g, &inp, &c, 0.0, 0.0).unwrap();
        let grads = g.backward(t.total);
        assert!(grads.get(inp.flow).is_none());
        assert!(grads.get(inp.feat_prev).is_some());
    }

    #[test]
    fn true_shift_beats_zero_flow() {
        // A bright 3-pixel bar moving right by 1.
        let mut prev = Tensor::zeros(&[1, 6, 8]);
        let mut cur = Tensor::zeros(&[1, 6, 8]);
        let mut truth = Tensor::zeros(&[2, 6, 8]);
        for y in 1..5 {
            for x in 2..5 {
                prev.set3(0, y, x, 1.0);
                cur.set3(0, y, x + 1, 1.0);
                truth.set3(0, y, x, 1.0);
            }
        }
        let at_truth = consistency_loss(&truth, &prev, &cur).unwrap();
        let at_zero = consistency_loss(&Tensor::zeros(&[2, 6, 8]), &prev, &cur).unwrap();
        assert!(at_truth < at_zero);
    }

    #[test]
    fn invalid_coefficients_rejected() {
        let mut c = ConjugationCoefficients {
            levels: vec![LevelCoefficients {
                cur: 0.0,
                skip: 0.0,
                low: 0.0,
            }],
            smoothness: 0.0,
            magnitude: 0.0,
        };
        assert!(c.validate(1).is_err());
        c.levels[0].low = 1.0;
        assert!(c.validate(1).is_ok());
        assert!(c.validate(2).is_err());
        c.smoothness = -1.0;
        assert!(c.validate(1).is_err());
    }
}
