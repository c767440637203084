//! Template memory, open-set nearest-template classification, F1 scoring
//! and image renderers for flows and predictions.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{ema_features, frame_flow, Hierarchy, ModelState};
use crate::stream::{Frame, GroundTruth};
use crate::tensor::Tensor;

/// Class id used for background and abstentions.
pub const BACKGROUND: u8 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template {
    /// Unit-normalized feature vector per level.
    pub levels: Vec<Vec<f64>>,
    pub class: u8,
    pub frame: u64,
    pub y: usize,
    pub x: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TemplateMemory {
    pub entries: Vec<Template>,
}

impl TemplateMemory {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_class(&self, class: u8) -> usize {
        self.entries.iter().filter(|e| e.class == class).count()
    }
}

/// A supervised pixel: frame index, coordinate and class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisionPoint {
    pub frame: u64,
    pub y: usize,
    pub x: usize,
    pub class: u8,
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if n == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / n).collect()
}

/// Stores the per-level features at every point of `points` that refers to
/// `frame.t`. `features` holds one `[d, H, W]` map per level.
pub fn collect_templates(
    memory: &mut TemplateMemory,
    features: &[Tensor],
    frame: &Frame,
    labels: &[u8],
    points: &[SupervisionPoint],
) -> Result<usize> {
    let (h, w) = (frame.pixels.chw().1, frame.pixels.chw().2);
    let mut added = 0;
    for p in points.iter().filter(|p| p.frame == frame.t) {
        if p.y >= h || p.x >= w {
            return Err(Error::BadSupervision {
                frame: p.frame,
                y: p.y,
                x: p.x,
                reason: "out of bounds",
            });
        }
        if p.class == BACKGROUND || labels[p.y * w + p.x] != p.class {
            return Err(Error::BadSupervision {
                frame: p.frame,
                y: p.y,
                x: p.x,
                reason: "point is not labelled with its class",
            });
        }
        memory.entries.push(Template {
            levels: features.iter().map(|f| normalized(f.pixel(p.y, p.x))).collect(),
            class: p.class,
            frame: p.frame,
            y: p.y,
            x: p.x,
        });
        added += 1;
    }
    Ok(added)
}

/// Supervision point of every object class in `labels`: the labelled pixel
/// closest to the class centroid.
pub fn centroid_points(t: u64, labels: &[u8], width: usize, classes: usize) -> Vec<SupervisionPoint> {
    let mut out = Vec::new();
    for class in 1..classes as u8 {
        let pix: Vec<(usize, usize)> = labels
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == class)
            .map(|(i, _)| (i / width, i % width))
            .collect();
        if pix.is_empty() {
            continue;
        }
        let n = pix.len() as f64;
        let cy = pix.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let cx = pix.iter().map(|p| p.1 as f64).sum::<f64>() / n;
        let best = pix
            .iter()
            .min_by(|a, b| {
                let da = libm::hypot(a.0 as f64 - cy, a.1 as f64 - cx);
                let db = libm::hypot(b.0 as f64 - cy, b.1 as f64 - cx);
                da.total_cmp(&db)
            })
            .unwrap();
        out.push(SupervisionPoint {
            frame: t,
            y: best.0,
            x: best.1,
            class,
        });
    }
    out
}

/// Best template class and its similarity; abstains (background) when the
/// best cosine similarity is below `1 − tau_abstain`.
pub fn classify(query: &[Vec<f64>], memory: &TemplateMemory, tau_abstain: f64) -> Result<(u8, f64)> {
    if memory.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let q: Vec<Vec<f64>> = query.iter().map(|v| normalized(v.clone())).collect();
    Ok(best_match(&q, memory, tau_abstain))
}

fn best_match(q: &[Vec<f64>], memory: &TemplateMemory, tau_abstain: f64) -> (u8, f64) {
    let qn = libm::sqrt(q.iter().flatten().map(|x| x * x).sum::<f64>());
    let mut best = (BACKGROUND, f64::NEG_INFINITY);
    for t in &memory.entries {
        let dot: f64 = q
            .iter()
            .zip(&t.levels)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        let tn = libm::sqrt(t.levels.iter().flatten().map(|x| x * x).sum::<f64>());
        let sim = dot / (qn * tn).max(1e-12);
        if sim > best.1 {
            best = (t.class, sim);
        }
    }
    if best.1 < 1.0 - tau_abstain {
        (BACKGROUND, best.1)
    } else {
        best
    }
}

/// Classifies every pixel of a frame from its per-level feature maps.
pub fn classify_frame(features: &[Tensor], memory: &TemplateMemory, tau_abstain: f64) -> Result<Vec<u8>> {
    if memory.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let (_, h, w) = features[0].chw();
    let mut out = vec![BACKGROUND; h * w];
    for y in 0..h {
        for x in 0..w {
            let q: Vec<Vec<f64>> = features.iter().map(|f| normalized(f.pixel(y, x))).collect();
            out[y * w + x] = best_match(&q, memory, tau_abstain).0;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: u8,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: u64,
    pub macro_f1: f64,
    pub epe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassScore>,
    pub macro_f1: f64,
    /// Mean endpoint error over moving pixels of the segment.
    pub epe: Option<f64>,
    pub frames: Vec<FrameRecord>,
    pub pixels: u64,
}

/// Confusion counts, `counts[truth][pred]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8]) {
        for (p, t) in pred.iter().zip(truth) {
            self.counts[*t as usize * self.classes + *p as usize] += 1;
        }
    }

    /// Per-class scores; a class absent from both truth and prediction
    /// scores 1.
    pub fn scores(&self) -> Vec<ClassScore> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let fp: u64 = (0..k).filter(|&r| r != c).map(|r| self.counts[r * k + c]).sum();
                let fneg: u64 = (0..k).filter(|&p| p != c).map(|p| self.counts[c * k + p]).sum();
                let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
                let f1 = if tp + fp + fneg == 0 {
                    1.0
                } else {
                    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
                };
                ClassScore {
                    class: c as u8,
                    precision: ratio(tp, tp + fp),
                    recall: ratio(tp, tp + fneg),
                    f1,
                    support: tp + fneg,
                }
            })
            .collect()
    }

    pub fn macro_f1(&self) -> f64 {
        let s = self.scores();
        s.iter().map(|c| c.f1).sum::<f64>() / s.len() as f64
    }
}

/// Mean endpoint error over pixels where the true flow is nonzero.
pub fn endpoint_error(pred: &Tensor, truth: &Tensor) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0u64);
    for i in 0..truth.plane(0).len() {
        let (tu, tv) = (truth.plane(0)[i], truth.plane(1)[i]);
        if tu == 0.0 && tv == 0.0 {
            continue;
        }
        sum += libm::hypot(pred.plane(0)[i] - tu, pred.plane(1)[i] - tv);
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Which representation the classifier reads.
pub enum Features<'a> {
    /// Slow-learner features of the trained hierarchy.
    Model(&'a Hierarchy, &'a ModelState),
    /// Raw pixel colours as a single level.
    Pixels,
}

impl Features<'_> {
    pub fn extract(&self, frame: &Frame) -> Result<Vec<Tensor>> {
        match self {
            Features::Model(h, s) => ema_features(h, s, &frame.pixels),
            Features::Pixels => Ok(vec![frame.pixels.clone()]),
        }
    }
}

/// Classifies every pixel of every frame; consecutive frames also score the
/// level-1 flow against the true flow when a model is given.
pub fn evaluate_lap(
    features: &Features<'_>,
    segment: &[(Frame, GroundTruth)],
    memory: &TemplateMemory,
    tau_abstain: f64,
    classes: usize,
) -> Result<MetricsReport> {
    if segment.is_empty() {
        return Err(Error::EmptySegment);
    }
    let mut total = Confusion::new(classes);
    let mut records = Vec::with_capacity(segment.len());
    let (mut epe_sum, mut epe_n) = (0.0, 0u64);
    let mut pixels = 0u64;
    for (i, (frame, gt)) in segment.iter().enumerate() {
        let feats = features.extract(frame)?;
        let pred = classify_frame(&feats, memory, tau_abstain)?;
        let mut conf = Confusion::new(classes);
        conf.add(&pred, &gt.labels);
        total.add(&pred, &gt.labels);
        pixels += pred.len() as u64;
        let mut epe = None;
        if let (Features::Model(h, s), Some(truth), true) = (features, gt.flow.as_ref(), i > 0) {
            let flow = frame_flow(h, s, &segment[i - 1].0.pixels, &frame.pixels)?;
            let moving = truth.plane(0).iter().zip(truth.plane(1)).filter(|(u, v)| **u != 0.0 || **v != 0.0).count();
            if let Some(e) = endpoint_error(&flow, truth) {
                epe_sum += e * moving as f64;
                epe_n += moving as u64;
                epe = Some(e);
            }
        }
        records.push(FrameRecord {
            t: frame.t,
            macro_f1: conf.macro_f1(),
            epe,
        });
    }
    Ok(MetricsReport {
        classes: total.scores(),
        macro_f1: total.macro_f1(),
        epe: (epe_n > 0).then(|| epe_sum / epe_n as f64),
        frames: records,
        pixels,
    })
}

/// Interleaved 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// The 55-entry flow colour wheel: red→yellow (15), yellow→green (6),
/// green→cyan (4), cyan→blue (11), blue→magenta (13), magenta→red (6).
pub fn color_wheel() -> Vec<[f64; 3]> {
    let segments: [(usize, [f64; 3], [f64; 3]); 6] = [
        (15, [255.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
        (6, [255.0, 255.0, 0.0], [-1.0, 0.0, 0.0]),
        (4, [0.0, 255.0, 0.0], [0.0, 0.0, 1.0]),
        (11, [0.0, 255.0, 255.0], [0.0, -1.0, 0.0]),
        (13, [0.0, 0.0, 255.0], [1.0, 0.0, 0.0]),
        (6, [255.0, 0.0, 255.0], [0.0, 0.0, -1.0]),
    ];
    let mut wheel = Vec::with_capacity(55);
    for (n, base, dir) in segments {
        for i in 0..n {
            let step = libm::floor(255.0 * i as f64 / n as f64);
            wheel.push(core::array::from_fn(|c| base[c] + dir[c] * step));
        }
    }
    wheel
}

/// Colour of one displacement normalized by `max_magnitude`: hue encodes
/// direction, saturation encodes magnitude, zero is white.
pub fn flow_color(u: f64, v: f64, max_magnitude: f64, wheel: &[[f64; 3]]) -> [u8; 3] {
    let scale = if max_magnitude > 0.0 { max_magnitude } else { 1.0 };
    let (u, v) = (u / scale, v / scale);
    let rad = libm::hypot(u, v);
    let mut a = libm::atan2(-v, -u);
    // ±π is one direction; pin it so signed zeros agree.
    if a == core::f64::consts::PI {
        a = -a;
    }
    let a = a / core::f64::consts::PI;
    let n = wheel.len();
    let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
    let k0 = libm::floor(fk) as usize;
    let k1 = if k0 + 1 == n { 0 } else { k0 + 1 };
    let f = fk - k0 as f64;
    core::array::from_fn(|c| {
        let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
        let col = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
        libm::floor(255.0 * col) as u8
    })
}

/// Colour-coded flow; magnitudes are divided by `max_magnitude`, or by the
/// largest magnitude in the field when `None`.
pub fn render_flow(flow: &Tensor, max_magnitude: Option<f64>) -> RgbImage {
    let (_, h, w) = flow.chw();
    let (u, v) = (flow.plane(0), flow.plane(1));
    let max = max_magnitude.unwrap_or_else(|| u.iter().zip(v).map(|(a, b)| libm::hypot(*a, *b)).fold(0.0, f64::max));
    let wheel = color_wheel();
    let mut data = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        data.extend_from_slice(&flow_color(u[i], v[i], max, &wheel));
    }
    RgbImage {
        width: w,
        height: h,
        data,
    }
}

/// Overlay colour of a class id; background is light grey.
pub fn class_color(class: u8) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [255, 225, 25],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
    ];
    if class == BACKGROUND {
        [211, 211, 211]
    } else {
        PALETTE[(class as usize - 1) % PALETTE.len()]
    }
}

/// `floor(0.5·frame + 0.5·colour)` per channel; grey frames are replicated.
pub fn render_prediction(pred: &[u8], frame: &Frame) -> Result<RgbImage> {
    let (c, h, w) = frame.pixels.chw();
    if pred.len() != h * w {
        return Err(Error::Shape {
            op: "render_prediction",
            expected: vec![h * w],
            found: vec![pred.len()],
        });
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for (i, class) in pred.iter().enumerate() {
        let col = class_color(*class);
        for (k, cv) in col.iter().enumerate() {
            let px = frame.pixels.plane(if c == 1 { 0 } else { k })[i];
            let base = libm::round(px.clamp(0.0, 1.0) * 255.0);
            data.push(libm::floor(0.5 * base + 0.5 * *cv as f64) as u8);
        }
    }
    Ok(RgbImage {
        width: w,
        height: h,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn memory(entries: &[(Vec<f64>, u8)]) -> TemplateMemory {
        TemplateMemory {
            entries: entries
                .iter()
                .map(|(v, c)| Template {
                    levels: vec![normalized(v.clone())],
                    class: *c,
                    frame: 0,
                    y: 0,
                    x: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn classify_cases() {
        let m = memory(&[(vec![1.0, 0.0], 1), (vec![0.0, 1.0], 2)]);
        let (c, s) = classify(&[vec![2.0, 0.0]], &m, 0.5).unwrap();
        assert_eq!(c, 1);
        assert!((s - 1.0).abs() < 1e-12);
        // similarities 0.9 and 0.8 against the two templates
        let m2 = memory(&[(vec![0.8, 0.6], 4), (vec![0.9, libm::sqrt(1.0 - 0.81)], 3)]);
        let (c, s) = classify(&[vec![1.0, 0.0]], &m2, 0.5).unwrap();
        assert_eq!(c, 3);
        assert!((s - 0.9).abs() < 1e-12);
        assert_eq!(classify(&[vec![-1.0, -1.0]], &m, 0.5).unwrap().0, BACKGROUND);
        assert!(classify(&[vec![1.0, 0.0]], &TemplateMemory::default(), 0.5).is_err());
    }

    #[test]
    fn f1_all_background() {
        let truth: Vec<u8> = (0..100).map(|i| if i < 10 { 1 } else { 0 }).collect();
        let pred = vec![0u8; 100];
        let mut c = Confusion::new(2);
        c.add(&pred, &truth);
        let s = c.scores();
        assert!((s[0].f1 - 2.0 * 0.9 / 1.9).abs() < 1e-12);
        assert_eq!(s[1].f1, 0.0);
        assert!((c.macro_f1() - 0.9 / 1.9).abs() < 1e-12);
    }

    #[test]
    fn wheel_has_55_entries_and_red_origin() {
        let wheel = color_wheel();
        assert_eq!(wheel.len(), 55);
        assert_eq!(wheel[0], [255.0, 0.0, 0.0]);
        assert_eq!(flow_color(0.0, 0.0, 1.0, &wheel), [255, 255, 255]);
        assert_eq!(flow_color(2.0, 0.0, 2.0, &wheel), [255, 0, 0]);
        assert_eq!(flow_color(2.0, -0.0, 2.0, &wheel), [255, 0, 0]);
    }

    #[test]
    fn prediction_overlay_colours() {
        let frame = Frame {
            pixels: Tensor::zeros(&[1, 1, 2]),
            t: 0,
        };
        let img = render_prediction(&[0, 1], &frame).unwrap();
        assert_eq!(img.data, vec![105, 105, 105, 115, 12, 37]);
    }
}
