//! The stack of per-level feature extractors and flow estimators.
//!
//! Every network is the same small encoder–decoder: `depth` stages of
//! average-pool down, each a 3×3 conv, instance norm and leaky ReLU, then
//! nearest-neighbour upsampling with concatenated encoder skips and a 1×1
//! head. Flow networks drop the full-resolution skip. Spatial size is
//! preserved whenever `H` and `W` are divisible by `2^depth`.

use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    /// Keep the full-resolution encoder skip.
    pub full_skip: bool,
    /// Multiplier on the head's initial weights.
    pub head_scale: f64,
}

impl NetSpec {
    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(config_err("network widths must be positive"));
        }
        if self.depth == 0 {
            return Err(config_err("network depth must be at least 1"));
        }
        Ok(())
    }

    fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    /// `(out, in, k)` of every conv, in parameter order (weights and biases
    /// interleave: `[w0, b0, w1, b1, ...]`).
    fn layers(&self) -> Vec<(usize, usize, usize)> {
        let mut layers = Vec::new();
        layers.push((self.width(0), self.in_channels, 3));
        for s in 1..=self.depth {
            layers.push((self.width(s), self.width(s - 1), 3));
        }
        for s in (0..self.depth).rev() {
            let skip = if s > 0 || self.full_skip { self.width(s) } else { 0 };
            layers.push((self.width(s), self.width(s + 1) + skip, 3));
        }
        layers.push((self.out_channels, self.width(0), 1));
        layers
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for (o, i, k) in self.layers() {
            shapes.push(alloc::vec![o, i, k, k]);
            shapes.push(alloc::vec![o]);
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// He-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor> {
        let layers = self.layers();
        let last = layers.len() - 1;
        let gain = libm::sqrt(2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE));
        let mut params = Vec::with_capacity(2 * layers.len());
        for (idx, (o, i, k)) in layers.into_iter().enumerate() {
            let fan_in = (i * k * k) as f64;
            let mut bound = gain * libm::sqrt(3.0 / fan_in);
            if idx == last {
                bound *= self.head_scale;
            }
            let mut w = Tensor::zeros(&[o, i, k, k]);
            for v in w.data_mut() {
                *v = if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 };
            }
            params.push(w);
            params.push(Tensor::zeros(&[o]));
        }
        params
    }

    fn block(&self, g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = g.conv2d(x, w, b)?;
        let y = g.instance_norm(y, NORM_EPS);
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }

    /// Builds the network on `g`; `params` must follow [`NetSpec::param_shapes`].
    pub fn forward(&self, g: &mut Graph, input: Var, params: &[Var]) -> Result<Var> {
        let expected = 2 * (2 * self.depth + 2);
        if params.len() != expected {
            return Err(Error::Shape {
                op: "network parameters",
                expected: alloc::vec![expected],
                found: alloc::vec![params.len()],
            });
        }
        let (c, h, w) = g.value(input).chw();
        if c != self.in_channels {
            return Err(Error::Shape {
                op: "network input",
                expected: alloc::vec![self.in_channels],
                found: alloc::vec![c],
            });
        }
        let unit = 1usize << self.depth;
        if h % unit != 0 || w % unit != 0 {
            return Err(config_err("frame size must be divisible by 2^depth"));
        }
        let mut p = params.chunks(2);
        let mut next = |g: &mut Graph, x: Var| {
            let pair = p.next().expect("parameter count checked above");
            self.block(g, x, pair[0], pair[1])
        };
        let mut skips = Vec::with_capacity(self.depth + 1);
        let mut x = next(g, input)?;
        skips.push(x);
        for _ in 1..=self.depth {
            let down = g.avg_pool2(x);
            x = next(g, down)?;
            skips.push(x);
        }
        for s in (0..self.depth).rev() {
            let up = g.upsample2(x);
            let merged = if s > 0 || self.full_skip {
                g.concat(&[up, skips[s]])?
            } else {
                up
            };
            x = next(g, merged)?;
        }
        let head = &params[params.len() - 2..];
        g.conv2d(x, head[0], head[1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub level: usize,
    pub features: NetSpec,
    pub flow: NetSpec,
}

impl LevelSpec {
    /// Desk-scale level: `input` channels in, `feature_channels` out.
    pub fn desk(level: usize, input: usize, feature_channels: usize, base_width: usize, depth: usize) -> Self {
        Self {
            level,
            features: NetSpec {
                in_channels: input,
                out_channels: feature_channels,
                base_width,
                depth,
                full_skip: true,
                head_scale: 1.0,
            },
            flow: NetSpec {
                in_channels: 2 * input,
                out_channels: 2,
                base_width,
                depth,
                full_skip: false,
                head_scale: 0.01,
            },
        }
    }
}

/// Standard chain of `levels` levels over `image_channels`-channel frames.
pub fn chain_specs(levels: usize, image_channels: usize, feature_channels: usize, base_width: usize, depth: usize) -> Vec<LevelSpec> {
    (1..=levels)
        .map(|l| {
            let input = if l == 1 { image_channels } else { feature_channels };
            LevelSpec::desk(l, input, feature_channels, base_width, depth)
        })
        .collect()
}

/// Parameters of one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelParams {
    pub flow: Vec<Tensor>,
    pub gra: Vec<Tensor>,
    pub ema: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub levels: Vec<LevelParams>,
    pub step: u64,
}

impl ModelState {
    pub fn is_finite(&self) -> bool {
        self.levels
            .iter()
            .flat_map(|l| l.flow.iter().chain(&l.gra).chain(&l.ema))
            .all(Tensor::is_finite)
    }
}

/// Validated level specifications.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    specs: Vec<LevelSpec>,
}

impl Hierarchy {
    pub fn new(specs: Vec<LevelSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(config_err("at least one level is required"));
        }
        for (i, s) in specs.iter().enumerate() {
            s.features.validate()?;
            s.flow.validate()?;
            if s.level != i + 1 {
                return Err(config_err("levels must be numbered 1..N in order"));
            }
            if s.flow.out_channels != 2 {
                return Err(config_err("flow networks must emit 2 channels"));
            }
            if s.flow.in_channels != 2 * s.features.in_channels {
                return Err(config_err("flow input must be a concatenated pair of the level input"));
            }
            if i > 0 && s.features.in_channels != specs[i - 1].features.out_channels {
                return Err(config_err("level input channels must equal the previous level's output"));
            }
        }
        Ok(Self { specs })
    }

    pub fn levels(&self) -> usize {
        self.specs.len()
    }

    pub fn specs(&self) -> &[LevelSpec] {
        &self.specs
    }

    pub fn spec(&self, level: usize) -> Result<&LevelSpec> {
        level
            .checked_sub(1)
            .and_then(|i| self.specs.get(i))
            .ok_or(Error::LevelOutOfRange {
                level,
                levels: self.specs.len(),
            })
    }

    pub fn image_channels(&self) -> usize {
        self.specs[0].features.in_channels
    }

    /// Deterministic initialization; the slow copy starts equal to the fast one.
    pub fn init_state(&self, seed: u64) -> ModelState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = self
            .specs
            .iter()
            .map(|s| {
                let gra = s.features.init(&mut rng);
                let flow = s.flow.init(&mut rng);
                LevelParams {
                    flow,
                    ema: gra.clone(),
                    gra,
                }
            })
            .collect();
        ModelState { levels, step: 0 }
    }

    /// Checks that `state` has the parameter shapes of this hierarchy.
    pub fn check_state(&self, state: &ModelState) -> Result<()> {
        if state.levels.len() != self.specs.len() {
            return Err(config_err("model state level count does not match"));
        }
        for (spec, lp) in self.specs.iter().zip(&state.levels) {
            let matches = |net: &NetSpec, ps: &[Tensor]| {
                let shapes = net.param_shapes();
                shapes.len() == ps.len() && shapes.iter().zip(ps).all(|(s, p)| s.as_slice() == p.shape())
            };
            if !matches(&spec.flow, &lp.flow) || !matches(&spec.features, &lp.gra) || !matches(&spec.features, &lp.ema) {
                return Err(config_err("model state parameter shapes do not match the hierarchy"));
            }
        }
        Ok(())
    }
}

pub fn build_model(specs: Vec<LevelSpec>, seed: u64) -> Result<(Hierarchy, ModelState)> {
    let h = Hierarchy::new(specs)?;
    let state = h.init_state(seed);
    Ok((h, state))
}

fn constants(g: &mut Graph, params: &[Tensor]) -> Vec<Var> {
    params.iter().map(|p| g.constant(p.clone())).collect()
}

/// Plain feature forward pass of one level.
pub fn forward_features(spec: &LevelSpec, input: &Tensor, weights: &[Tensor]) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let p = constants(&mut g, weights);
    let out = spec.features.forward(&mut g, x, &p)?;
    let value = g.value(out).clone();
    if !value.is_finite() {
        return Err(Error::NonFinite("feature output"));
    }
    Ok(value)
}

/// Plain flow forward pass of one level on the channel-concatenated pair.
pub fn forward_flow(spec: &LevelSpec, f_prev: &Tensor, f_cur: &Tensor, weights: &[Tensor]) -> Result<Tensor> {
    crate::tensor::ensure_same_shape("forward_flow", f_prev, f_cur)?;
    let mut g = Graph::new();
    let x = g.constant(Tensor::concat_channels(&[f_prev, f_cur])?);
    let p = constants(&mut g, weights);
    let out = spec.flow.forward(&mut g, x, &p)?;
    let value = g.value(out).clone();
    if !value.is_finite() {
        return Err(Error::NonFinite("flow output"));
    }
    Ok(value)
}

/// Slow-learner features of every level for one frame.
pub fn ema_features(h: &Hierarchy, state: &ModelState, frame: &Tensor) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(h.levels());
    let mut x = frame.clone();
    for (spec, lp) in h.specs().iter().zip(&state.levels) {
        x = forward_features(spec, &x, &lp.ema)?;
        out.push(x.clone());
    }
    Ok(out)
}

/// Level-1 flow between two frames.
pub fn frame_flow(h: &Hierarchy, state: &ModelState, prev: &Tensor, cur: &Tensor) -> Result<Tensor> {
    forward_flow(&h.specs()[0], prev, cur, &state.levels[0].flow)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_and_shapes() {
        let (h, s) = build_model(chain_specs(2, 3, 32, 4, 2), 1).unwrap();
        assert_eq!(h.spec(1).unwrap().features.in_channels, 3);
        assert_eq!(h.spec(2).unwrap().features.in_channels, 32);
        assert_eq!(h.spec(2).unwrap().flow.in_channels, 64);
        assert!(h.spec(3).is_err());
        assert_eq!(s.levels[0].gra, s.levels[0].ema);
        let frame = Tensor::full(&[3, 8, 8], 0.5);
        let f = forward_features(h.spec(1).unwrap(), &frame, &s.levels[0].gra).unwrap();
        assert_eq!(f.shape(), &[32, 8, 8]);
        let d = forward_flow(h.spec(1).unwrap(), &frame, &frame, &s.levels[0].flow).unwrap();
        assert_eq!(d.shape(), &[2, 8, 8]);
    }

    #[test]
    fn mismatched_chain_is_rejected() {
        let mut specs = chain_specs(2, 3, 32, 4, 2);
        specs[1] = LevelSpec::desk(2, 16, 32, 4, 2);
        assert!(Hierarchy::new(specs).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let h = Hierarchy::new(chain_specs(1, 1, 8, 4, 1)).unwrap();
        assert_eq!(h.init_state(5), h.init_state(5));
        assert_ne!(h.init_state(5), h.init_state(6));
    }
}
