//! Online training over a frame stream: one forward/backward pass and one
//! optimizer step per frame pair, followed by the slow-learner update.

use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conjugation::{conjugation_loss, ConjugationCoefficients, ConjugationInputs, LevelCoefficients};
use crate::contrastive::{
    build_sampling_distribution, motion_threshold, pair_scores, sample_coords, self_supervised_loss, ContrastiveParams,
};
use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::hierarchy::{Hierarchy, ModelState};
use crate::optim::{ema_update, Optimizer, OptimizerKind};
use crate::stream::{Frame, FramePair, FrameSource};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Random crop (ratio above 0.9) rescaled to full size, on one frame.
    #[serde(default)]
    pub crop: bool,
    /// Random horizontal/vertical flips of both frames.
    #[serde(default)]
    pub flip: bool,
    /// Colour jitter and blur on one frame.
    #[serde(default)]
    pub color: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// `α_m`, flow learning rate.
    pub flow_lr: f64,
    /// `α_f`, feature learning rate.
    pub feature_lr: f64,
    /// `ξ`, slow-learner coefficient.
    pub ema: f64,
    /// Frames between successive component activations.
    pub warmup_frames: u64,
    pub flow_optimizer: OptimizerKind,
    pub feature_optimizer: OptimizerKind,
    pub conjugation: ConjugationCoefficients,
    pub contrastive: ContrastiveParams,
    #[serde(default)]
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Train on `(I_0, I_0)` before the first real pair.
    #[serde(default)]
    pub bootstrap_first_pair: bool,
}

impl TrainConfig {
    pub fn validate(&self, levels: usize) -> Result<()> {
        if !(self.flow_lr >= 0.0 && self.feature_lr >= 0.0) || !self.flow_lr.is_finite() || !self.feature_lr.is_finite() {
            return Err(config_err("learning rates must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.ema) {
            return Err(config_err("EMA coefficient must lie in [0, 1)"));
        }
        self.conjugation.validate(levels)?;
        self.contrastive.validate()
    }
}

/// Which parameter groups learn at a given time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveMask {
    pub flow: Vec<bool>,
    pub features: Vec<bool>,
}

impl ActiveMask {
    pub fn count(&self) -> usize {
        self.flow.iter().chain(&self.features).filter(|a| **a).count()
    }

    /// Highest level with any learning component.
    pub fn top_level(&self) -> usize {
        (0..self.flow.len())
            .rev()
            .find(|&l| self.flow[l] || self.features[l])
            .map_or(0, |l| l + 1)
    }
}

/// Components activate one at a time in the order `δ¹, f¹, δ², f², ...`,
/// component `k` after `k·warmup` frames.
pub fn schedule_active_components(t: u64, warmup: u64, levels: usize) -> ActiveMask {
    let on = |k: u64| warmup == 0 || t >= k.saturating_mul(warmup);
    ActiveMask {
        flow: (0..levels as u64).map(|l| on(2 * l)).collect(),
        features: (0..levels as u64).map(|l| on(2 * l + 1)).collect(),
    }
}

/// Coefficients with the terms of inactive components removed. Each term is
/// kept when a component it trains is active.
pub fn effective_coefficients(mask: &ActiveMask, coeffs: &ConjugationCoefficients) -> Vec<(LevelCoefficients, f64, f64)> {
    coeffs
        .levels
        .iter()
        .enumerate()
        .map(|(l, c)| {
            let (flow, feat) = (mask.flow[l], mask.features[l]);
            let cur_active = if l == 0 { feat } else { flow || feat };
            let lower_feat = l > 0 && mask.features[l - 1];
            let lc = LevelCoefficients {
                cur: if cur_active { c.cur } else { 0.0 },
                skip: if feat { c.skip } else { 0.0 },
                low: if flow || lower_feat { c.low } else { 0.0 },
            };
            let (s, m) = if flow { (coeffs.smoothness, coeffs.magnitude) } else { (0.0, 0.0) };
            (lc, s, m)
        })
        .collect()
}

fn bilinear_resize_window(plane: &[f64], h: usize, w: usize, y0: f64, x0: f64, ch: f64, cw: f64) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let sy = (y0 + (y as f64 + 0.5) * ch / h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let sx = (x0 + (x as f64 + 0.5) * cw / w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let tap = crate::warp::BilinearTap::new(sx, sy, h, w);
            out[y * w + x] = tap.sample(plane, w);
        }
    }
    out
}

fn crop_resize(img: &Tensor, ratio: f64, fy: f64, fx: f64) -> Tensor {
    let (c, h, w) = img.chw();
    let (ch, cw) = (ratio * h as f64, ratio * w as f64);
    let (y0, x0) = (fy * (h as f64 - ch), fx * (w as f64 - cw));
    let mut out = Tensor::zeros(&[c, h, w]);
    for k in 0..c {
        let plane = bilinear_resize_window(img.plane(k), h, w, y0, x0, ch, cw);
        out.plane_mut(k).copy_from_slice(&plane);
    }
    out
}

fn flip(img: &Tensor, horizontal: bool, vertical: bool) -> Tensor {
    let (c, h, w) = img.chw();
    let mut out = Tensor::zeros(&[c, h, w]);
    for k in 0..c {
        let src = img.plane(k);
        let dst = out.plane_mut(k);
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if horizontal { w - 1 - x } else { x };
                dst[y * w + x] = src[sy * w + sx];
            }
        }
    }
    out
}

fn color_blur(img: &Tensor, brightness: f64, contrast: f64, saturation: f64, sigma: f64) -> Tensor {
    let (c, h, w) = img.chw();
    let mut out = img.clone();
    let n = (h * w) as f64;
    let gray: Vec<f64> = (0..h * w)
        .map(|i| (0..c).map(|k| img.plane(k)[i]).sum::<f64>() / c as f64)
        .collect();
    let mean = gray.iter().sum::<f64>() / n;
    for k in 0..c {
        for (i, v) in out.plane_mut(k).iter_mut().enumerate() {
            let sat = gray[i] + saturation * (*v - gray[i]);
            *v = ((sat - mean) * contrast + mean + brightness).clamp(0.0, 1.0);
        }
    }
    // separable 3-tap Gaussian with replicated borders
    let e = libm::exp(-1.0 / (2.0 * sigma * sigma));
    let taps = [e / (1.0 + 2.0 * e), 1.0 / (1.0 + 2.0 * e), e / (1.0 + 2.0 * e)];
    for k in 0..c {
        let src = out.plane(k).to_vec();
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let l = src[y * w + x.saturating_sub(1)];
                let r = src[y * w + (x + 1).min(w - 1)];
                tmp[y * w + x] = taps[0] * l + taps[1] * src[y * w + x] + taps[2] * r;
            }
        }
        let dst = out.plane_mut(k);
        for y in 0..h {
            for x in 0..w {
                let u = tmp[y.saturating_sub(1) * w + x];
                let d = tmp[(y + 1).min(h - 1) * w + x];
                dst[y * w + x] = taps[0] * u + taps[1] * tmp[y * w + x] + taps[2] * d;
            }
        }
    }
    out
}

fn with_pixels(frame: &Frame, pixels: Tensor) -> Frame {
    Frame { pixels, t: frame.t }
}

/// The original pair followed by one augmented copy per enabled type.
pub fn augment_pair<R: Rng + ?Sized>(pair: &FramePair, rng: &mut R, cfg: &AugmentConfig) -> Vec<FramePair> {
    let mut out = vec![pair.clone()];
    if cfg.crop {
        let ratio = rng.gen_range(0.9..1.0);
        let (fy, fx) = (rng.gen::<f64>(), rng.gen::<f64>());
        let on_prev = rng.gen::<bool>();
        let mut p = pair.clone();
        let target = if on_prev { &mut p.prev } else { &mut p.cur };
        *target = with_pixels(target, crop_resize(&target.pixels, ratio, fy, fx));
        out.push(p);
    }
    if cfg.flip {
        let (mut hz, vt) = (rng.gen::<bool>(), rng.gen::<bool>());
        if !hz && !vt {
            hz = true;
        }
        out.push(FramePair {
            prev: with_pixels(&pair.prev, flip(&pair.prev.pixels, hz, vt)),
            cur: with_pixels(&pair.cur, flip(&pair.cur.pixels, hz, vt)),
        });
    }
    if cfg.color {
        let b = rng.gen_range(-0.1..0.1);
        let c = rng.gen_range(0.8..1.2);
        let s = rng.gen_range(0.8..1.2);
        let sigma = rng.gen_range(0.3..1.2);
        let on_prev = rng.gen::<bool>();
        let mut p = pair.clone();
        let target = if on_prev { &mut p.prev } else { &mut p.cur };
        *target = with_pixels(target, color_blur(&target.pixels, b, c, s, sigma));
        out.push(p);
    }
    out
}

/// Loss values of one level, averaged over the pairs of a step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub conj: f64,
    pub cur: f64,
    pub skip: f64,
    pub low: f64,
    pub reg: f64,
    pub self_in_frame: f64,
    pub self_cross: f64,
    pub flow_magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub t: u64,
    pub loss: f64,
    pub levels: Vec<LevelReport>,
    pub active: ActiveMask,
    /// The update was skipped because the loss or a gradient was not finite.
    pub diverged: bool,
}

/// Handles of one evaluated pair.
struct PairGraph {
    total: Var,
    levels: Vec<(Option<crate::conjugation::ConjugationTerms>, Option<(Var, Var)>, Var)>,
}

/// Graph leaves for the parameters of every level.
pub struct ParamVars {
    pub flow: Vec<Vec<Var>>,
    pub gra: Vec<Vec<Var>>,
    pub ema: Vec<Vec<Var>>,
}

impl ParamVars {
    /// Active groups become trainable leaves, everything else constants.
    /// With `track_ema` the slow weights are trainable leaves too, so tests
    /// can observe that no gradient reaches them.
    pub fn new(g: &mut Graph, state: &ModelState, mask: &ActiveMask, track_ema: bool) -> Self {
        let leaves = |g: &mut Graph, ps: &[Tensor], train: bool| -> Vec<Var> {
            ps.iter()
                .map(|p| if train { g.param(p.clone()) } else { g.constant(p.clone()) })
                .collect()
        };
        let mut out = Self {
            flow: Vec::new(),
            gra: Vec::new(),
            ema: Vec::new(),
        };
        for (l, lp) in state.levels.iter().enumerate() {
            out.flow.push(leaves(g, &lp.flow, mask.flow[l]));
            out.gra.push(leaves(g, &lp.gra, mask.features[l]));
            out.ema.push(leaves(g, &lp.ema, track_ema));
        }
        out
    }
}

/// Assembles the total loss of one step on `g`. `levels` bounds the number
/// of evaluated levels; pairs are averaged.
pub fn total_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    hierarchy: &Hierarchy,
    params: &ParamVars,
    pairs: &[FramePair],
    mask: &ActiveMask,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(Var, Vec<LevelReport>)> {
    let levels = mask.top_level();
    let coeffs = effective_coefficients(mask, &config.conjugation);
    let mut built = Vec::with_capacity(pairs.len());
    for pair in pairs {
        built.push(pair_loss(g, hierarchy, params, pair, mask, &coeffs, levels, config, rng)?);
    }
    let weight = 1.0 / pairs.len() as f64;
    let parts: Vec<(Var, f64)> = built.iter().map(|b| (b.total, weight)).collect();
    let total = g.weighted_sum(&parts);
    let mut reports = vec![LevelReport::default(); hierarchy.levels()];
    for b in &built {
        for (l, (conj, slf, flow)) in b.levels.iter().enumerate() {
            let r = &mut reports[l];
            let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item() * weight);
            if let Some(c) = conj {
                r.conj += g.value(c.total).item() * weight;
                r.cur += val(c.cur);
                r.skip += val(c.skip);
                r.low += val(c.low);
                r.reg += val(c.reg);
            }
            if let Some((a, b)) = slf {
                r.self_in_frame += g.value(*a).item() * weight;
                r.self_cross += g.value(*b).item() * weight;
            }
            let f = g.value(*flow);
            let mag: f64 = f
                .plane(0)
                .iter()
                .zip(f.plane(1))
                .map(|(u, v)| libm::hypot(*u, *v))
                .sum::<f64>()
                / f.plane(0).len() as f64;
            r.flow_magnitude += mag * weight;
        }
    }
    Ok((total, reports))
}

#[allow(clippy::too_many_arguments)]
fn pair_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    hierarchy: &Hierarchy,
    params: &ParamVars,
    pair: &FramePair,
    mask: &ActiveMask,
    coeffs: &[(LevelCoefficients, f64, f64)],
    levels: usize,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<PairGraph> {
    let mut lower_prev = g.constant(pair.prev.pixels.clone());
    let mut lower_cur = g.constant(pair.cur.pixels.clone());
    let mut first_flow = None;
    let mut parts = Vec::new();
    let mut out_levels = Vec::with_capacity(levels);
    for l in 0..levels {
        let spec = &hierarchy.specs()[l];
        let shielded = g.detach(lower_prev);
        let flow_in = g.concat(&[shielded, lower_cur])?;
        let flow = spec.flow.forward(g, flow_in, &params.flow[l])?;
        let first = *first_flow.get_or_insert(flow);
        let feat_prev = spec.features.forward(g, lower_prev, &params.gra[l])?;
        let slow = spec.features.forward(g, lower_cur, &params.ema[l])?;
        let feat_cur = g.detach(slow);
        let (lc, smooth, mag) = coeffs[l];
        let inputs = ConjugationInputs {
            level: l + 1,
            flow,
            first_flow: first,
            feat_prev,
            feat_cur,
            lower_prev,
            lower_cur,
        };
        let conj = if lc.cur > 0.0 || lc.skip > 0.0 || lc.low > 0.0 || smooth > 0.0 || mag > 0.0 {
            let terms = conjugation_loss(g, &inputs, &lc, smooth, mag)?;
            parts.push((terms.total, 1.0));
            Some(terms)
        } else {
            None
        };
        let slf = if mask.features[l] {
            let flow_value = g.value(flow).clone();
            let threshold = motion_threshold(&flow_value, &config.contrastive);
            let dist = build_sampling_distribution(&flow_value, g.value(feat_prev), threshold)?;
            let coords = sample_coords(&dist, config.contrastive.eta, pair.cur.t, rng)?;
            let scores = pair_scores(&coords, &flow_value, &config.contrastive);
            let terms = self_supervised_loss(g, feat_prev, feat_cur, &flow_value, &coords, &scores, &config.contrastive)?;
            parts.push((terms.total, 1.0));
            Some((terms.in_frame, terms.cross))
        } else {
            None
        };
        out_levels.push((conj, slf, flow));
        lower_prev = feat_prev;
        lower_cur = feat_cur;
    }
    let total = g.weighted_sum(&parts);
    Ok(PairGraph {
        total,
        levels: out_levels,
    })
}

/// Per-step random stream: seeded from the run seed, stream index = step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub model: ModelState,
    pub flow_opt: Vec<Optimizer>,
    pub feature_opt: Vec<Optimizer>,
    /// Frames read from the stream so far.
    pub frames: u64,
}

pub struct Trainer {
    pub hierarchy: Hierarchy,
    pub config: TrainConfig,
    pub state: TrainerState,
    prev: Option<Frame>,
}

impl Trainer {
    pub fn new(hierarchy: Hierarchy, config: TrainConfig, model: ModelState) -> Result<Self> {
        config.validate(hierarchy.levels())?;
        hierarchy.check_state(&model)?;
        let flow_opt = model
            .levels
            .iter()
            .map(|l| Optimizer::new(config.flow_optimizer, config.flow_lr, &l.flow))
            .collect();
        let feature_opt = model
            .levels
            .iter()
            .map(|l| Optimizer::new(config.feature_optimizer, config.feature_lr, &l.gra))
            .collect();
        Ok(Self {
            hierarchy,
            config,
            state: TrainerState {
                model,
                flow_opt,
                feature_opt,
                frames: 0,
            },
            prev: None,
        })
    }

    /// Continues from a saved state; `prev` is the last frame consumed.
    pub fn resume(hierarchy: Hierarchy, config: TrainConfig, state: TrainerState, prev: Option<Frame>) -> Result<Self> {
        config.validate(hierarchy.levels())?;
        hierarchy.check_state(&state.model)?;
        Ok(Self {
            hierarchy,
            config,
            state,
            prev,
        })
    }

    pub fn model(&self) -> &ModelState {
        &self.state.model
    }

    pub fn previous_frame(&self) -> Option<&Frame> {
        self.prev.as_ref()
    }

    /// One update on `pair`.
    pub fn train_step(&mut self, pair: &FramePair) -> Result<StepReport> {
        let step = self.state.model.step;
        let levels = self.hierarchy.levels();
        let mask = schedule_active_components(pair.cur.t, self.config.warmup_frames, levels);
        let mut rng = step_rng(self.config.seed, step);
        let pairs = augment_pair(pair, &mut rng, &self.config.augment);
        let mut g = Graph::new();
        let params = ParamVars::new(&mut g, &self.state.model, &mask, false);
        let (total, reports) = total_loss(&mut g, &self.hierarchy, &params, &pairs, &mask, &self.config, &mut rng)?;
        let loss = g.value(total).item();
        let mut report = StepReport {
            step,
            t: pair.cur.t,
            loss,
            levels: reports,
            active: mask.clone(),
            diverged: false,
        };
        self.state.model.step += 1;
        if !loss.is_finite() {
            report.diverged = true;
            return Ok(report);
        }
        let mut grads = g.backward(total);
        let mut take = |vars: &[Var]| -> Vec<Option<Tensor>> { vars.iter().map(|v| grads.take(*v)).collect() };
        let flow_grads: Vec<_> = params.flow.iter().map(|v| take(v)).collect();
        let feat_grads: Vec<_> = params.gra.iter().map(|v| take(v)).collect();
        let finite = flow_grads
            .iter()
            .chain(&feat_grads)
            .flatten()
            .flatten()
            .all(Tensor::is_finite);
        if !finite {
            report.diverged = true;
            return Ok(report);
        }
        let model = &mut self.state.model;
        for l in 0..levels {
            if mask.flow[l] {
                self.state.flow_opt[l].step(&mut model.levels[l].flow, &flow_grads[l]);
            }
            if mask.features[l] {
                self.state.feature_opt[l].step(&mut model.levels[l].gra, &feat_grads[l]);
            }
            let lp = &mut model.levels[l];
            ema_update(&mut lp.ema, &lp.gra, self.config.ema);
        }
        Ok(report)
    }

    /// Reads the next frame and trains on the pair it closes. The first frame
    /// only primes the pair unless the bootstrap pair is enabled.
    pub fn advance(&mut self, source: &mut dyn FrameSource) -> Result<Option<StepReport>> {
        let frame = source.next_frame()?;
        self.state.frames += 1;
        let prev = match self.prev.take() {
            Some(p) => p,
            None if self.config.bootstrap_first_pair => frame.clone(),
            None => {
                self.prev = Some(frame);
                return Ok(None);
            }
        };
        let pair = FramePair::new(prev, frame)?;
        let report = self.train_step(&pair);
        self.prev = Some(pair.cur);
        report.map(Some)
    }

    /// Consumes up to `max_frames` frames (all when `None`), calling
    /// `observer` after every step; stops early if the observer returns false.
    pub fn run(
        &mut self,
        source: &mut dyn FrameSource,
        max_frames: Option<u64>,
        observer: &mut dyn FnMut(&Trainer, &StepReport) -> Result<bool>,
    ) -> Result<u64> {
        let mut read = 0u64;
        loop {
            if max_frames.is_some_and(|m| read >= m) {
                break;
            }
            match self.advance(source) {
                Ok(Some(report)) => {
                    read += 1;
                    if !observer(self, &report)? {
                        break;
                    }
                }
                Ok(None) => read += 1,
                Err(Error::EndOfStream { .. }) => break,
                Err(e) => return Err(e),
            }
        }
        Ok(read)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_order() {
        let m = schedule_active_components(0, 0, 2);
        assert_eq!(m.count(), 4);
        let m = schedule_active_components(5, 10, 2);
        assert_eq!((m.flow.clone(), m.features.clone()), (vec![true, false], vec![false, false]));
        let m = schedule_active_components(25, 10, 2);
        assert_eq!((m.flow.clone(), m.features.clone()), (vec![true, true], vec![true, false]));
        assert_eq!(schedule_active_components(1_000, 10, 2).count(), 4);
    }

    #[test]
    fn flips_are_involutions() {
        let img = Tensor::from_vec(&[1, 2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(flip(&flip(&img, true, true), true, true), img);
        assert_eq!(flip(&img, true, false).data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
    }

    #[test]
    fn full_crop_is_identity() {
        let img = Tensor::from_vec(&[1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let out = crop_resize(&img, 1.0, 0.3, 0.7);
        assert!(out.max_abs_diff(&img) < 1e-12);
    }
}
