//! Motion-driven contrastive objective over sampled pixel coordinates.
//!
//! Pairs of sampled pixels are soft-labelled from the estimated flow: nearby
//! pixels moving coherently are positives, distant pixels moving differently
//! are negatives, a moving pixel is always a negative for a static one and
//! two static pixels are unrelated. The loss is the weighted
//! log-exponential form
//!
//! ```text
//! L = -Σ_ij p_ij/Z · log( e^{s_ij} / (e^{s_ij} + Σ_z n_iz e^{s_iz}) ),   Z = Σ p
//! ```
//!
//! where `s_ik` is the temperature-scaled cosine between `g(x_i)` and `h` read
//! at `x_k + δ(x_k)`. Flows are constants here: no gradient reaches the flow
//! estimator through this loss.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{ensure_same_hw, ensure_same_shape, Tensor};
use crate::warp::BilinearTap;

/// Floor on the cosine denominator so zero feature vectors stay finite.
pub const COSINE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveParams {
    /// Temperature `τ` of the scaled cosine similarity.
    pub tau: f64,
    /// Flow-similarity threshold above which a pair is positive.
    pub tau_p: f64,
    /// Flow-similarity threshold at or below which a pair is negative.
    pub tau_n: f64,
    /// Flow magnitude below which a pixel is static.
    pub tau_m: f64,
    /// Use the frame-mean flow magnitude as the static threshold instead.
    pub adaptive_tau_m: bool,
    /// Number of sampled coordinates per frame.
    pub eta: usize,
    /// Fraction `ℵ` of positive and of negative pairs kept (hardest first).
    pub keep_fraction: f64,
}

impl ContrastiveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(config_err("contrastive temperature must be positive"));
        }
        let in_unit = |v: f64| (-1.0..=1.0).contains(&v);
        if !in_unit(self.tau_p) || !in_unit(self.tau_n) || self.tau_p < self.tau_n {
            return Err(config_err("need -1 <= tau_n <= tau_p <= 1"));
        }
        if !(self.tau_m >= 0.0) {
            return Err(config_err("tau_m must be non-negative"));
        }
        if self.eta < 2 {
            return Err(config_err("eta must be at least 2"));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(config_err("keep fraction must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Sampled pixel coordinates `(y, x)` of the frame pair ending at `t`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSet {
    pub coords: Vec<(usize, usize)>,
    pub t: u64,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Soft positive/negative confidences, both `η×η` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PairScores {
    pub size: usize,
    pub p: Vec<f64>,
    pub n: Vec<f64>,
}

impl PairScores {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            p: vec![0.0; size * size],
            n: vec![0.0; size * size],
        }
    }

    #[inline]
    pub fn p(&self, i: usize, k: usize) -> f64 {
        self.p[i * self.size + k]
    }

    #[inline]
    pub fn n(&self, i: usize, k: usize) -> f64 {
        self.n[i * self.size + k]
    }
}

fn flow_at(flow: &Tensor, y: usize, x: usize) -> (f64, f64) {
    let (_, _, w) = flow.chw();
    (flow.plane(0)[y * w + x], flow.plane(1)[y * w + x])
}

/// Static-pixel threshold for `flow`: the configured `τ_m`, or the frame-mean
/// flow magnitude in adaptive mode.
pub fn motion_threshold(flow: &Tensor, params: &ContrastiveParams) -> f64 {
    if !params.adaptive_tau_m {
        return params.tau_m;
    }
    let (u, v) = (flow.plane(0), flow.plane(1));
    let total: f64 = u.iter().zip(v).map(|(a, b)| libm::hypot(*a, *b)).sum();
    total / u.len() as f64
}

/// Cosine similarity with the denominator floored at [`COSINE_FLOOR`].
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    dot / (na * nb).max(COSINE_FLOOR)
}

/// `τ⁻¹ · cos(a, b)`.
pub fn similarity(a: &[f64], b: &[f64], tau: f64) -> f64 {
    cosine(a, b) / tau
}

/// Soft pair scores for the sampled coordinates. Distances are normalized by
/// the largest distance between sampled coordinates.
pub fn pair_scores(coords: &SampleSet, flow: &Tensor, params: &ContrastiveParams) -> PairScores {
    let eta = coords.len();
    let mut out = PairScores::zeros(eta);
    let threshold = motion_threshold(flow, params);
    let flows: Vec<(f64, f64)> = coords.coords.iter().map(|&(y, x)| flow_at(flow, y, x)).collect();
    let is_static: Vec<bool> = flows.iter().map(|(u, v)| libm::hypot(*u, *v) < threshold).collect();
    let dist = |i: usize, k: usize| {
        let (yi, xi) = coords.coords[i];
        let (yk, xk) = coords.coords[k];
        libm::hypot(yi as f64 - yk as f64, xi as f64 - xk as f64)
    };
    let mut max_dist: f64 = 0.0;
    for i in 0..eta {
        for k in i + 1..eta {
            max_dist = max_dist.max(dist(i, k));
        }
    }
    if max_dist == 0.0 {
        max_dist = 1.0;
    }
    for i in 0..eta {
        for k in 0..eta {
            let idx = i * eta + k;
            match (is_static[i], is_static[k]) {
                (true, true) => {}
                (true, false) | (false, true) => out.n[idx] = 1.0,
                (false, false) => {
                    let (a, b) = (flows[i], flows[k]);
                    let sim = cosine(&[a.0, a.1], &[b.0, b.1]);
                    let d = dist(i, k) / max_dist;
                    if sim > params.tau_p {
                        out.p[idx] = 1.0 - d;
                    } else if sim <= params.tau_n {
                        out.n[idx] = d;
                    }
                }
            }
        }
    }
    out
}

/// Balanced sampling distribution over the partition of pixels by motion
/// (moving/static) and by the index of the largest-magnitude feature of
/// `f_prev`. Every nonempty set receives the same total mass.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingDistribution {
    pub height: usize,
    pub width: usize,
    pub prob: Vec<f64>,
    /// Set id per pixel: `2·j` for moving pixels whose winning feature is
    /// `j`, `2·j + 1` for static ones.
    pub set_of: Vec<usize>,
    pub set_sizes: Vec<usize>,
}

impl SamplingDistribution {
    pub fn nonempty_sets(&self) -> usize {
        self.set_sizes.iter().filter(|&&c| c > 0).count()
    }

    pub fn set_mass(&self, set: usize) -> f64 {
        self.prob
            .iter()
            .zip(&self.set_of)
            .filter(|(_, s)| **s == set)
            .map(|(p, _)| p)
            .sum()
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            prob: vec![1.0 / n as f64; n],
            set_of: vec![0; n],
            set_sizes: vec![n],
        }
    }
}

pub fn build_sampling_distribution(flow: &Tensor, f_prev: &Tensor, tau_m: f64) -> Result<SamplingDistribution> {
    ensure_same_hw("build_sampling_distribution", flow, f_prev)?;
    let (d, h, w) = f_prev.chw();
    let n = h * w;
    let mut set_of = vec![0usize; n];
    let mut set_sizes = vec![0usize; 2 * d];
    let (u, v) = (flow.plane(0), flow.plane(1));
    for i in 0..n {
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for j in 0..d {
            let a = libm::fabs(f_prev.plane(j)[i]);
            if a > best_val {
                best_val = a;
                best = j;
            }
        }
        let moving = libm::hypot(u[i], v[i]) >= tau_m;
        let set = 2 * best + usize::from(!moving);
        set_of[i] = set;
        set_sizes[set] += 1;
    }
    let k = set_sizes.iter().filter(|&&c| c > 0).count() as f64;
    let prob = set_of.iter().map(|&s| 1.0 / (k * set_sizes[s] as f64)).collect();
    Ok(SamplingDistribution {
        height: h,
        width: w,
        prob,
        set_of,
        set_sizes,
    })
}

/// Weighted sampling of `eta` distinct coordinates (exponential-key method):
/// each pixel draws `ln(u)/P(x)` and the largest keys win.
pub fn sample_coords<R: Rng + ?Sized>(dist: &SamplingDistribution, eta: usize, t: u64, rng: &mut R) -> Result<SampleSet> {
    let support = dist.prob.iter().filter(|&&p| p > 0.0).count();
    if eta > support {
        return Err(Error::SampleTooLarge {
            requested: eta,
            support,
        });
    }
    let mut keys: Vec<(f64, usize)> = Vec::with_capacity(support);
    for (i, &p) in dist.prob.iter().enumerate() {
        // Draw for every pixel so the random stream does not depend on the support.
        let u: f64 = rng.gen();
        if p > 0.0 {
            let key = if u > 0.0 { libm::log(u) / p } else { f64::NEG_INFINITY };
            keys.push((key, i));
        }
    }
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let coords = keys[..eta].iter().map(|&(_, i)| (i / dist.width, i % dist.width)).collect();
    Ok(SampleSet { coords, t })
}

fn keep_count(count: usize, fraction: f64) -> usize {
    if count == 0 {
        return 0;
    }
    (libm::ceil(fraction * count as f64 - 1e-9) as usize).clamp(1, count)
}

/// Keeps the `⌈ℵ·#⌉` least-similar positives and most-similar negatives;
/// `sims` is the `η×η` similarity matrix of the current representations.
pub fn filter_pairs(scores: &PairScores, sims: &[f64], keep_fraction: f64) -> PairScores {
    if keep_fraction >= 1.0 {
        return scores.clone();
    }
    let mut out = PairScores::zeros(scores.size);
    let mut pos: Vec<usize> = (0..scores.p.len()).filter(|&i| scores.p[i] > 0.0).collect();
    pos.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
    for &i in pos.iter().take(keep_count(pos.len(), keep_fraction)) {
        out.p[i] = scores.p[i];
    }
    let mut neg: Vec<usize> = (0..scores.n.len()).filter(|&i| scores.n[i] > 0.0).collect();
    neg.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    for &i in neg.iter().take(keep_count(neg.len(), keep_fraction)) {
        out.n[i] = scores.n[i];
    }
    out
}

/// One instance of the contrastive loss: anchors read from `g` at the
/// sampled coordinates, partners read from `h` at (possibly displaced)
/// coordinates. Flow displacements are frozen into the bilinear taps.
#[derive(Clone, Debug)]
pub struct ContrastiveTerm {
    anchors: Vec<(usize, usize)>,
    partners: Vec<BilinearTap>,
    scores: PairScores,
    tau: f64,
    keep_fraction: f64,
    /// Scores after ℵ-filtering, fixed at the first evaluation.
    active: Option<PairScores>,
}

struct Cache {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    norms_a: Vec<f64>,
    norms_b: Vec<f64>,
    cos: Vec<f64>,
}

impl ContrastiveTerm {
    /// `flow = None` reads partners at their own coordinates.
    pub fn new(
        coords: &SampleSet,
        flow: Option<&Tensor>,
        height: usize,
        width: usize,
        scores: PairScores,
        params: &ContrastiveParams,
    ) -> Self {
        let partners = coords
            .coords
            .iter()
            .map(|&(y, x)| {
                let (u, v) = flow.map_or((0.0, 0.0), |f| flow_at(f, y, x));
                BilinearTap::new(x as f64 + u, y as f64 + v, height, width)
            })
            .collect();
        Self {
            anchors: coords.coords.clone(),
            partners,
            scores,
            tau: params.tau,
            keep_fraction: params.keep_fraction,
            active: None,
        }
    }

    fn cache(&self, g: &Tensor, h: &Tensor) -> Cache {
        let (d, _, w) = g.chw();
        let a: Vec<Vec<f64>> = self.anchors.iter().map(|&(y, x)| g.pixel(y, x)).collect();
        let b: Vec<Vec<f64>> = self
            .partners
            .iter()
            .map(|tap| (0..d).map(|c| tap.sample(h.plane(c), w)).collect())
            .collect();
        let norm = |v: &Vec<f64>| libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        let norms_a: Vec<f64> = a.iter().map(norm).collect();
        let norms_b: Vec<f64> = b.iter().map(norm).collect();
        let eta = a.len();
        let mut cos = vec![0.0; eta * eta];
        for i in 0..eta {
            for k in 0..eta {
                let dot: f64 = a[i].iter().zip(&b[k]).map(|(x, y)| x * y).sum();
                cos[i * eta + k] = dot / (norms_a[i] * norms_b[k]).max(COSINE_FLOOR);
            }
        }
        Cache {
            a,
            b,
            norms_a,
            norms_b,
            cos,
        }
    }

    fn active_scores(&mut self, cos: &[f64]) -> &PairScores {
        if self.active.is_none() {
            self.active = Some(filter_pairs(&self.scores, cos, self.keep_fraction));
        }
        self.active.as_ref().unwrap()
    }

    /// Evaluates the loss and fixes the filtered pair set.
    pub fn forward(&mut self, g: &Tensor, h: &Tensor) -> f64 {
        let cache = self.cache(g, h);
        let tau = self.tau;
        let sims: Vec<f64> = cache.cos.iter().map(|c| c / tau).collect();
        let scores = self.active_scores(&cache.cos).clone();
        let (value, _) = loss_and_sim_grad(&scores, &sims, false);
        value
    }

    /// Returns `(d g, d h)` scaled by `grad`.
    pub fn backward(&self, g: &Tensor, h: &Tensor, grad: f64) -> (Tensor, Tensor) {
        let (d, hh, w) = g.chw();
        let mut dg = Tensor::zeros(&[d, hh, w]);
        let mut dh = Tensor::zeros(&[d, hh, w]);
        let cache = self.cache(g, h);
        let sims: Vec<f64> = cache.cos.iter().map(|c| c / self.tau).collect();
        let scores = match &self.active {
            Some(s) => s.clone(),
            None => filter_pairs(&self.scores, &cache.cos, self.keep_fraction),
        };
        let (_, ds) = loss_and_sim_grad(&scores, &sims, true);
        let eta = self.anchors.len();
        let mut ga = vec![vec![0.0; d]; eta];
        let mut gb = vec![vec![0.0; d]; eta];
        for i in 0..eta {
            for k in 0..eta {
                let gs = ds[i * eta + k];
                if gs == 0.0 {
                    continue;
                }
                // d cos / d a, d cos / d b
                let gc = grad * gs / self.tau;
                let (na, nb) = (cache.norms_a[i], cache.norms_b[k]);
                let c = cache.cos[i * eta + k];
                if na * nb > COSINE_FLOOR {
                    let inv = 1.0 / (na * nb);
                    for j in 0..d {
                        ga[i][j] += gc * (cache.b[k][j] * inv - c * cache.a[i][j] / (na * na));
                        gb[k][j] += gc * (cache.a[i][j] * inv - c * cache.b[k][j] / (nb * nb));
                    }
                } else {
                    for j in 0..d {
                        ga[i][j] += gc * cache.b[k][j] / COSINE_FLOOR;
                        gb[k][j] += gc * cache.a[i][j] / COSINE_FLOOR;
                    }
                }
            }
        }
        for (i, &(y, x)) in self.anchors.iter().enumerate() {
            for j in 0..d {
                dg.plane_mut(j)[y * w + x] += ga[i][j];
            }
        }
        for (k, tap) in self.partners.iter().enumerate() {
            for (ty, tx, wt) in tap.weights() {
                for j in 0..d {
                    dh.plane_mut(j)[ty * w + tx] += wt * gb[k][j];
                }
            }
        }
        (dg, dh)
    }
}

/// Loss value and, optionally, its gradient w.r.t. the similarity matrix.
fn loss_and_sim_grad(scores: &PairScores, sims: &[f64], with_grad: bool) -> (f64, Vec<f64>) {
    let eta = scores.size;
    let mut ds = if with_grad { vec![0.0; eta * eta] } else { Vec::new() };
    let z: f64 = scores.p.iter().sum();
    if z <= 0.0 {
        return (0.0, ds);
    }
    let mut total = 0.0;
    for i in 0..eta {
        let row = &sims[i * eta..(i + 1) * eta];
        if scores.p[i * eta..(i + 1) * eta].iter().all(|&p| p == 0.0) {
            continue;
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Σ_z n_iz e^{s_iz - m}
        let neg: f64 = (0..eta).map(|k| scores.n(i, k) * libm::exp(row[k] - m)).sum();
        if neg == 0.0 {
            continue;
        }
        for j in 0..eta {
            let p = scores.p(i, j);
            if p == 0.0 {
                continue;
            }
            let e = libm::exp(row[j] - m);
            let denom = e + neg;
            // log(e^{s} + N) - s in shifted form
            total += p / z * (libm::log(denom) - (row[j] - m));
            if with_grad {
                let w = p / z;
                ds[i * eta + j] += w * (e / denom - 1.0);
                for k in 0..eta {
                    let nk = scores.n(i, k);
                    if nk != 0.0 {
                        ds[i * eta + k] += w * nk * libm::exp(row[k] - m) / denom;
                    }
                }
            }
        }
    }
    (total, ds)
}

/// Plain evaluation of one loss instance; `flow = None` means no warping.
pub fn contrastive_core(
    g: &Tensor,
    h: &Tensor,
    flow: Option<&Tensor>,
    scores: &PairScores,
    coords: &SampleSet,
    params: &ContrastiveParams,
) -> Result<f64> {
    ensure_same_shape("contrastive_core", g, h)?;
    let (_, hh, w) = g.chw();
    let mut term = ContrastiveTerm::new(coords, flow, hh, w, scores.clone(), params);
    Ok(term.forward(g, h))
}

/// Graph handles of the two self-supervised instances.
#[derive(Clone, Copy, Debug)]
pub struct SelfSupervisedTerms {
    pub total: Var,
    pub in_frame: Var,
    pub cross: Var,
}

/// In-frame plus cross-temporal contrastive loss of one level. `feat_cur`
/// should be a constant node (slow-learner output); `flow` only displaces
/// partner lookups.
pub fn self_supervised_loss(
    graph: &mut Graph,
    feat_prev: Var,
    feat_cur: Var,
    flow: &Tensor,
    coords: &SampleSet,
    scores: &PairScores,
    params: &ContrastiveParams,
) -> Result<SelfSupervisedTerms> {
    ensure_same_shape("self_supervised_loss", graph.value(feat_prev), graph.value(feat_cur))?;
    let (_, h, w) = graph.value(feat_prev).chw();
    let in_frame_term = ContrastiveTerm::new(coords, None, h, w, scores.clone(), params);
    let in_frame = graph.contrastive(feat_prev, feat_prev, in_frame_term);
    let cross_term = ContrastiveTerm::new(coords, Some(flow), h, w, scores.clone(), params);
    let cross = graph.contrastive(feat_prev, feat_cur, cross_term);
    let total = graph.weighted_sum(&[(in_frame, 1.0), (cross, 1.0)]);
    Ok(SelfSupervisedTerms { total, in_frame, cross })
}
