//! Frames, frame sources and the synthetic moving-objects generator.
//!
//! The generator renders rigid textured objects translating with integer
//! velocities over a background, so true flow and labels are exact. Motion
//! is organised in laps: an object travels `leg` frames out, pauses, travels
//! back and pauses again, returning to its start.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

/// One image of the stream; pixel values in `[0, 1]`, shape `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub pixels: Tensor,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub prev: Frame,
    pub cur: Frame,
}

impl FramePair {
    pub fn new(prev: Frame, cur: Frame) -> Result<Self> {
        if prev.pixels.shape() != cur.pixels.shape() {
            return Err(Error::Shape {
                op: "frame pair",
                expected: prev.pixels.shape().to_vec(),
                found: cur.pixels.shape().to_vec(),
            });
        }
        Ok(Self { prev, cur })
    }
}

/// Labels of frame `t` and, for `t > 0`, the true flow of the pair
/// `(t−1, t)` in the coordinates of frame `t−1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub labels: Vec<u8>,
    pub flow: Option<Tensor>,
}

/// Sequential frame provider.
pub trait FrameSource {
    fn next_frame(&mut self) -> Result<Frame>;
    fn len(&self) -> Option<u64>;
    fn position(&self) -> u64;
    fn height(&self) -> usize;
    fn width(&self) -> usize;
    fn channels(&self) -> usize;
    /// Moves the cursor so the next frame returned is `t`.
    fn seek(&mut self, t: u64) -> Result<()>;
    fn ground_truth(&self, _t: u64) -> Result<Option<GroundTruth>> {
        Ok(None)
    }
    fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Texture {
    Flat,
    /// Product of sinusoids along both object axes.
    Checker { period: f64 },
    /// Sinusoid across the given axis angle in degrees.
    Stripes { period: f64, angle: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    pub shape: Shape,
    /// `[height, width]`.
    pub size: [usize; 2],
    /// Top-left corner `[y, x]` at the start of every lap.
    pub start: [i64; 2],
    /// Per-frame displacement `[u, v]` (horizontal, vertical) on the out leg.
    pub velocity: [i64; 2],
    pub texture: Texture,
    /// Texture blends between these two colours (grey streams use the mean).
    pub colors: [[f64; 3]; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionMode {
    /// One object moves per lap, in turn.
    Alternate,
    /// All objects move in every lap.
    Together,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub background: [f64; 3],
    /// Adds a static smooth random texture to the background.
    #[serde(default)]
    pub textured_background: bool,
    pub objects: Vec<ObjectSpec>,
    pub motion: MotionMode,
    /// Frames per leg of motion.
    pub leg: usize,
    /// Still frames after each leg.
    pub pause: usize,
    /// Number of laps; in alternate mode every lap moves one object.
    pub laps: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn lap_frames(&self) -> usize {
        2 * (self.leg + self.pause)
    }

    pub fn frames(&self) -> usize {
        self.laps * self.lap_frames()
    }

    pub fn classes(&self) -> usize {
        self.objects.len() + 1
    }

    /// Index of the object moving in `lap`, or `None` when all move.
    pub fn mover(&self, lap: usize) -> Option<usize> {
        match self.motion {
            MotionMode::Alternate => Some(lap % self.objects.len()),
            MotionMode::Together => None,
        }
    }

    /// Offset of an object from its start after `k` frames into a lap.
    fn lap_offset(&self, k: usize, v: [i64; 2]) -> [i64; 2] {
        let steps = if k <= self.leg {
            k
        } else if k <= self.leg + self.pause {
            self.leg
        } else { (2 * self.leg + self.pause).saturating_sub(k) } as i64;
        [steps * v[1], steps * v[0]]
    }

    /// Top-left corner `[y, x]` of `object` at frame `t`.
    pub fn position(&self, object: usize, t: usize) -> [i64; 2] {
        let o = &self.objects[object];
        let lf = self.lap_frames();
        let (lap, k) = (t / lf, t % lf);
        let moving = self.mover(lap).is_none_or(|m| m == object);
        if !moving {
            return o.start;
        }
        let d = self.lap_offset(k, o.velocity);
        [o.start[0] + d[0], o.start[1] + d[1]]
    }

    /// Whether nothing moves between frames `t−1` and `t`.
    pub fn is_static_pair(&self, t: usize) -> bool {
        t == 0 || (0..self.objects.len()).all(|o| self.position(o, t) == self.position(o, t - 1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(config_err("resolution must be positive"));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(config_err("frames must have 1 or 3 channels"));
        }
        if self.objects.is_empty() || self.objects.len() > 254 {
            return Err(config_err("need between 1 and 254 objects"));
        }
        if self.leg == 0 || self.laps == 0 {
            return Err(config_err("leg and laps must be positive"));
        }
        let in_unit = |c: &[f64; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_unit(&self.background) || !self.objects.iter().all(|o| o.colors.iter().all(in_unit)) {
            return Err(config_err("colours must lie in [0, 1]"));
        }
        // Bounding boxes over one full lap cycle (positions repeat afterwards).
        let cycle = self.lap_frames() * self.objects.len();
        let boxes = |o: usize, t: usize| {
            let p = self.position(o, t);
            let s = self.objects[o].size;
            (p[0], p[1], p[0] + s[0] as i64, p[1] + s[1] as i64)
        };
        for t in 0..cycle {
            for o in 0..self.objects.len() {
                let (y0, x0, y1, x1) = boxes(o, t);
                if self.objects[o].size[0] == 0 || self.objects[o].size[1] == 0 {
                    return Err(config_err("object size must be positive"));
                }
                if y0 < 0 || x0 < 0 || y1 > self.height as i64 || x1 > self.width as i64 {
                    return Err(config_err("object trajectory leaves the frame"));
                }
                for q in o + 1..self.objects.len() {
                    let (a0, b0, a1, b1) = boxes(q, t);
                    // previous positions too, so flow sources never overlap
                    let (p0, r0, p1, r1) = boxes(q, t.saturating_sub(1));
                    let hit = |(c0, d0, c1, d1): (i64, i64, i64, i64)| y0 < c1 && c0 < y1 && x0 < d1 && d0 < x1;
                    if hit((a0, b0, a1, b1)) || hit((p0, r0, p1, r1)) {
                        return Err(config_err("objects overlap"));
                    }
                }
            }
        }
        Ok(())
    }
}

fn texture_value(tex: &Texture, ly: f64, lx: f64) -> f64 {
    use core::f64::consts::PI;
    match *tex {
        Texture::Flat => 0.0,
        Texture::Checker { period } => {
            0.5 + 0.5 * libm::sin(2.0 * PI * (lx + 0.5) / period) * libm::sin(2.0 * PI * (ly + 0.5) / period)
        }
        Texture::Stripes { period, angle } => {
            let a = angle.to_radians();
            let s = lx * libm::cos(a) + ly * libm::sin(a);
            0.5 + 0.5 * libm::sin(2.0 * PI * s / period)
        }
    }
}

fn inside(shape: Shape, size: [usize; 2], ly: usize, lx: usize) -> bool {
    match shape {
        Shape::Rect => true,
        Shape::Ellipse => {
            let (ry, rx) = (size[0] as f64 / 2.0, size[1] as f64 / 2.0);
            let dy = (ly as f64 + 0.5 - ry) / ry;
            let dx = (lx as f64 + 0.5 - rx) / rx;
            dy * dy + dx * dx <= 1.0
        }
    }
}

/// Deterministic renderer of a [`SyntheticSpec`].
#[derive(Clone, Debug)]
pub struct SyntheticStream {
    spec: SyntheticSpec,
    background: Tensor,
    cursor: u64,
    looping: bool,
}

impl SyntheticStream {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let background = render_background(&spec);
        Ok(Self {
            spec,
            background,
            cursor: 0,
            looping: false,
        })
    }

    /// Keep producing frames past the configured laps.
    pub fn looping(mut self, on: bool) -> Self {
        self.looping = on;
        self
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    /// Label grid (row-major, `0` background, `k+1` object `k`) at frame `t`.
    pub fn labels(&self, t: usize) -> Vec<u8> {
        let s = &self.spec;
        let mut labels = vec![0u8; s.height * s.width];
        for (k, o) in s.objects.iter().enumerate() {
            let p = s.position(k, t);
            for ly in 0..o.size[0] {
                for lx in 0..o.size[1] {
                    if inside(o.shape, o.size, ly, lx) {
                        let (y, x) = ((p[0] + ly as i64) as usize, (p[1] + lx as i64) as usize);
                        labels[y * s.width + x] = (k + 1) as u8;
                    }
                }
            }
        }
        labels
    }

    pub fn render(&self, t: usize) -> Tensor {
        let s = &self.spec;
        let mut img = self.background.clone();
        let w = s.width;
        for (k, o) in s.objects.iter().enumerate() {
            let p = s.position(k, t);
            for ly in 0..o.size[0] {
                for lx in 0..o.size[1] {
                    if !inside(o.shape, o.size, ly, lx) {
                        continue;
                    }
                    let a = texture_value(&o.texture, ly as f64, lx as f64);
                    let color: [f64; 3] = core::array::from_fn(|c| (1.0 - a) * o.colors[0][c] + a * o.colors[1][c]);
                    let idx = (p[0] as usize + ly) * w + p[1] as usize + lx;
                    if s.channels == 1 {
                        img.plane_mut(0)[idx] = (color[0] + color[1] + color[2]) / 3.0;
                    } else {
                        for (c, v) in color.iter().enumerate() {
                            img.plane_mut(c)[idx] = *v;
                        }
                    }
                }
            }
        }
        img
    }

    /// True flow of the pair `(t−1, t)`: object velocity on the pixels an
    /// object covers at `t−1`, zero elsewhere.
    pub fn flow(&self, t: usize) -> Tensor {
        let s = &self.spec;
        let mut flow = Tensor::zeros(&[2, s.height, s.width]);
        if t == 0 {
            return flow;
        }
        for (k, o) in s.objects.iter().enumerate() {
            let (a, b) = (s.position(k, t - 1), s.position(k, t));
            let (u, v) = ((b[1] - a[1]) as f64, (b[0] - a[0]) as f64);
            if u == 0.0 && v == 0.0 {
                continue;
            }
            for ly in 0..o.size[0] {
                for lx in 0..o.size[1] {
                    if inside(o.shape, o.size, ly, lx) {
                        let idx = (a[0] as usize + ly) * s.width + a[1] as usize + lx;
                        flow.plane_mut(0)[idx] = u;
                        flow.plane_mut(1)[idx] = v;
                    }
                }
            }
        }
        flow
    }

}

fn render_background(spec: &SyntheticSpec) -> Tensor {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut bg = Tensor::zeros(&[c, h, w]);
    let base: Vec<f64> = if c == 1 {
        vec![(spec.background[0] + spec.background[1] + spec.background[2]) / 3.0]
    } else {
        spec.background.to_vec()
    };
    for (k, b) in base.iter().enumerate() {
        bg.plane_mut(k).fill(*b);
    }
    if spec.textured_background {
        // Sum of a few random low-frequency plane waves.
        use core::f64::consts::PI;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let waves: Vec<(f64, f64, f64)> = (0..6)
            .map(|_| {
                let angle = rng.gen_range(0.0..PI);
                let period = rng.gen_range(6.0..20.0);
                let phase = rng.gen_range(0.0..2.0 * PI);
                (angle, period, phase)
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0;
                for &(a, p, ph) in &waves {
                    v += libm::sin(2.0 * PI * (x as f64 * libm::cos(a) + y as f64 * libm::sin(a)) / p + ph);
                }
                let delta = 0.25 * v / waves.len() as f64;
                for k in 0..c {
                    let px = &mut bg.plane_mut(k)[y * w + x];
                    *px = (*px + delta).clamp(0.0, 1.0);
                }
            }
        }
    }
    bg
}

impl FrameSource for SyntheticStream {
    fn next_frame(&mut self) -> Result<Frame> {
        let total = self.spec.frames() as u64;
        if !self.looping && self.cursor >= total {
            return Err(Error::EndOfStream { frames: total });
        }
        let t = self.cursor;
        self.cursor += 1;
        Ok(Frame {
            pixels: self.render(t as usize),
            t,
        })
    }

    fn len(&self) -> Option<u64> {
        if self.looping {
            None
        } else {
            Some(self.spec.frames() as u64)
        }
    }

    fn position(&self) -> u64 {
        self.cursor
    }

    fn height(&self) -> usize {
        self.spec.height
    }

    fn width(&self) -> usize {
        self.spec.width
    }

    fn channels(&self) -> usize {
        self.spec.channels
    }

    fn seek(&mut self, t: u64) -> Result<()> {
        if !self.looping && t > self.spec.frames() as u64 {
            return Err(Error::EndOfStream {
                frames: self.spec.frames() as u64,
            });
        }
        self.cursor = t;
        Ok(())
    }

    fn ground_truth(&self, t: u64) -> Result<Option<GroundTruth>> {
        let t = t as usize;
        Ok(Some(GroundTruth {
            labels: self.labels(t),
            flow: (t > 0).then(|| self.flow(t)),
        }))
    }
}

/// Desk-scale two-object stream: a square and a disc with checker textures
/// of different periods sharing one palette on a grey background, moving 3 px per frame.
pub fn toy_spec(laps: usize, seed: u64) -> SyntheticSpec {
    let palette = [[0.85, 0.35, 0.2], [0.2, 0.45, 0.85]];
    SyntheticSpec {
        height: 64,
        width: 64,
        channels: 3,
        background: [0.5, 0.5, 0.5],
        textured_background: false,
        objects: vec![
            ObjectSpec {
                name: String::from("square"),
                shape: Shape::Rect,
                size: [16, 16],
                start: [6, 4],
                velocity: [3, 0],
                texture: Texture::Checker { period: 16.0 },
                colors: palette,
            },
            ObjectSpec {
                name: String::from("disc"),
                shape: Shape::Ellipse,
                size: [18, 18],
                start: [26, 40],
                velocity: [0, 3],
                texture: Texture::Checker { period: 10.0 },
                colors: palette,
            },
        ],
        motion: MotionMode::Alternate,
        leg: 6,
        pause: 4,
        laps,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_spec_is_valid() {
        let s = toy_spec(4, 0);
        s.validate().unwrap();
        assert_eq!(s.lap_frames(), 20);
        assert_eq!(s.frames(), 80);
    }

    #[test]
    fn laps_return_to_start() {
        let s = toy_spec(4, 0);
        for o in 0..2 {
            for lap in 0..4 {
                assert_eq!(s.position(o, lap * s.lap_frames()), s.objects[o].start);
            }
        }
        assert_eq!(s.position(0, 6), [6, 22]);
        assert_eq!(s.position(1, 6), [26, 40]);
        assert_eq!(s.position(1, 26), [44, 40]);
    }

    #[test]
    fn flow_matches_velocity() {
        let st = SyntheticStream::new(toy_spec(2, 0)).unwrap();
        let f = st.flow(1);
        let labels = st.labels(0);
        for i in 0..64 * 64 {
            let expect = if labels[i] == 1 { 3.0 } else { 0.0 };
            assert_eq!(f.plane(0)[i], expect);
            assert_eq!(f.plane(1)[i], 0.0);
        }
    }

    #[test]
    fn end_of_stream() {
        let mut st = SyntheticStream::new(toy_spec(1, 0)).unwrap();
        for t in 0..20 {
            assert_eq!(st.next_frame().unwrap().t, t);
        }
        assert!(matches!(st.next_frame(), Err(Error::EndOfStream { .. })));
    }

    #[test]
    fn overlapping_objects_rejected() {
        let mut s = toy_spec(2, 0);
        s.objects[1].start = [8, 8];
        assert!(s.validate().is_err());
    }
}
