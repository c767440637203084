//! The lap protocol: unsupervised training over the stream, template
//! collection near the end of training, evaluation on held-out laps.

use std::path::{Path, PathBuf};
use std::time::Instant;

use conjflow_core::evalkit::{
    centroid_points, collect_templates, endpoint_error, evaluate_lap, Features, MetricsReport, SupervisionPoint,
    TemplateMemory,
};
use conjflow_core::hierarchy::{build_model, ema_features, frame_flow, Hierarchy, ModelState};
use conjflow_core::stream::{Frame, FrameSource, GroundTruth, SyntheticStream};
use conjflow_core::trainer::Trainer;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, StreamConfig};
use crate::error::{Error, Result};
use crate::io::DirectoryStream;
use crate::metrics::{JsonLines, StepRecord};

/// Abstain thresholds tried for the raw-pixel baseline; it reports its best.
pub const BASELINE_TAUS: [f64; 10] = [0.0, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0];

pub fn open_source(stream: &StreamConfig) -> Result<Box<dyn FrameSource>> {
    Ok(match stream {
        StreamConfig::Synthetic(spec) => Box::new(SyntheticStream::new(spec.clone())?),
        StreamConfig::Directory { path, channels, .. } => {
            let source = DirectoryStream::open(path)?;
            if source.channels() != *channels {
                return Err(Error::Config(format!(
                    "{} holds {}-channel frames, the configuration expects {channels}",
                    path.display(),
                    source.channels()
                )));
            }
            Box::new(source)
        }
    })
}

/// Frames at which templates are collected: `templates_per_object` frames
/// `template_spacing` apart, the last one half a spacing before training ends.
pub fn template_frames(cfg: &RunConfig) -> Vec<u64> {
    let end = cfg.total_train_frames();
    let (n, gap) = (cfg.eval.templates_per_object as u64, cfg.eval.template_spacing);
    (0..n)
        .filter_map(|k| end.checked_sub(gap / 2 + (n - 1 - k) * gap))
        .collect()
}

/// Frame range of the held-out evaluation laps.
pub fn eval_range(cfg: &RunConfig) -> std::ops::Range<u64> {
    let start = cfg.total_train_frames();
    start..start + cfg.protocol.eval_laps * cfg.stream.lap_frames()
}

pub struct TrainSession {
    pub config: RunConfig,
    pub trainer: Trainer,
    pub templates: TemplateMemory,
    source: Box<dyn FrameSource>,
    log: Option<JsonLines>,
    checkpoint_dir: Option<PathBuf>,
    started: Instant,
}

impl TrainSession {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let (hierarchy, model) = build_model(config.level_specs(), config.model.seed)?;
        let trainer = Trainer::new(hierarchy, config.train_config(), model)?;
        let source = open_source(&config.stream)?;
        Ok(Self {
            config,
            trainer,
            templates: TemplateMemory::default(),
            source,
            log: None,
            checkpoint_dir: None,
            started: Instant::now(),
        })
    }

    pub fn resume(config: RunConfig, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        let hierarchy = Hierarchy::new(config.level_specs())?;
        if hierarchy != ckpt.hierarchy {
            return Err(Error::ConfigMismatch);
        }
        let prev = ckpt.prev_frame();
        let frames = ckpt.state.frames;
        let trainer = Trainer::resume(hierarchy, config.train_config(), ckpt.state, prev)?;
        let mut source = open_source(&config.stream)?;
        source.seek(frames)?;
        Ok(Self {
            config,
            trainer,
            templates: ckpt.templates,
            source,
            log: None,
            checkpoint_dir: None,
            started: Instant::now(),
        })
    }

    pub fn with_log(mut self, path: &Path) -> Result<Self> {
        self.log = Some(JsonLines::append(path)?);
        Ok(self)
    }

    pub fn with_checkpoints(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        self.checkpoint_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn frames(&self) -> u64 {
        self.trainer.state.frames
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            hierarchy: self.trainer.hierarchy.clone(),
            state: self.trainer.state.clone(),
            prev: self.trainer.previous_frame().map(|f| (f.t, f.pixels.clone())),
            templates: self.templates.clone(),
        }
    }

    /// Trains until `frames` frames have been read (or the training phase ends).
    pub fn run_until(&mut self, frames: u64) -> Result<()> {
        let stop = frames.min(self.config.total_train_frames());
        let collect_at = template_frames(&self.config);
        let classes = self.config.stream.objects() + 1;
        while self.frames() < stop {
            let before = self.trainer.previous_frame().cloned();
            let report = self.trainer.advance(self.source.as_mut())?;
            let cur = self.trainer.previous_frame().cloned().expect("a frame was just consumed");
            if collect_at.contains(&cur.t) {
                let gt = self.source.ground_truth(cur.t)?.ok_or_else(|| {
                    Error::Config(format!("template frame {} has no labels", cur.t))
                })?;
                let points = centroid_points(cur.t, &gt.labels, self.source.width(), classes);
                let feats = ema_features(&self.trainer.hierarchy, self.trainer.model(), &cur.pixels)?;
                collect_templates(&mut self.templates, &feats, &cur, &gt.labels, &points)?;
            }
            let Some(report) = report else { continue };
            let every = self.config.output.log_every.max(1);
            let due = report.step % every == 0 || report.diverged;
            if let (Some(log), true) = (self.log.as_mut(), due) {
                let epe = match (&before, self.source.ground_truth(cur.t)?) {
                    (Some(prev), Some(GroundTruth { flow: Some(truth), .. })) => {
                        let flow = frame_flow(&self.trainer.hierarchy, self.trainer.model(), &prev.pixels, &cur.pixels)?;
                        endpoint_error(&flow, &truth)
                    }
                    _ => None,
                };
                let record = StepRecord::new(&report, epe, self.started.elapsed().as_secs_f64());
                log.write(&record)?;
                log.flush()?;
            }
            let cadence = self.config.output.checkpoint_every;
            if let (Some(dir), true) = (&self.checkpoint_dir, cadence > 0 && (report.step + 1) % cadence == 0) {
                let path = dir.join(format!("step-{:08}.ckpt", report.step + 1));
                self.checkpoint().save(&path, &self.config.hash())?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.total_train_frames())
    }
}

/// Frames and ground truth of the held-out laps.
pub fn eval_segment(cfg: &RunConfig) -> Result<Vec<(Frame, GroundTruth)>> {
    let mut source = open_source(&cfg.stream)?;
    let range = eval_range(cfg);
    source.seek(range.start)?;
    let mut out = Vec::with_capacity((range.end - range.start) as usize);
    for t in range {
        let frame = source.next_frame()?;
        let gt = source
            .ground_truth(t)?
            .ok_or_else(|| Error::Config(format!("evaluation frame {t} has no labels")))?;
        out.push((frame, gt));
    }
    Ok(out)
}

/// Raw-pixel templates at the same supervision points as `memory`.
pub fn pixel_templates(cfg: &RunConfig, memory: &TemplateMemory) -> Result<TemplateMemory> {
    let mut source = open_source(&cfg.stream)?;
    let mut out = TemplateMemory::default();
    let mut frames: Vec<u64> = memory.entries.iter().map(|e| e.frame).collect();
    frames.dedup();
    for t in frames {
        source.seek(t)?;
        let frame = source.next_frame()?;
        let gt = source
            .ground_truth(t)?
            .ok_or_else(|| Error::Config(format!("template frame {t} has no labels")))?;
        let points: Vec<SupervisionPoint> = memory
            .entries
            .iter()
            .filter(|e| e.frame == t)
            .map(|e| SupervisionPoint {
                frame: t,
                y: e.y,
                x: e.x,
                class: e.class,
            })
            .collect();
        collect_templates(&mut out, std::slice::from_ref(&frame.pixels), &frame, &gt.labels, &points)?;
    }
    Ok(out)
}

/// Mean level-1 flow magnitude over pairs whose true flow is zero everywhere.
pub fn static_flow_magnitude(h: &Hierarchy, model: &ModelState, segment: &[(Frame, GroundTruth)]) -> Result<Option<f64>> {
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 1..segment.len() {
        let Some(truth) = &segment[i].1.flow else { continue };
        if truth.data().iter().any(|v| *v != 0.0) {
            continue;
        }
        let flow = frame_flow(h, model, &segment[i - 1].0.pixels, &segment[i].0.pixels)?;
        let m: f64 = flow.plane(0).iter().zip(flow.plane(1)).map(|(u, v)| u.hypot(*v)).sum();
        sum += m / flow.plane(0).len() as f64;
        n += 1;
    }
    Ok((n > 0).then(|| sum / n as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub model: MetricsReport,
    pub baseline: MetricsReport,
    pub baseline_tau: f64,
    pub static_magnitude: Option<f64>,
    pub templates: usize,
}

pub fn evaluate(cfg: &RunConfig, h: &Hierarchy, model: &ModelState, memory: &TemplateMemory) -> Result<EvalOutcome> {
    let segment = eval_segment(cfg)?;
    let classes = cfg.stream.objects() + 1;
    let report = evaluate_lap(&Features::Model(h, model), &segment, memory, cfg.eval.tau_abstain, classes)?;
    let pixels = pixel_templates(cfg, memory)?;
    let mut best: Option<(f64, MetricsReport)> = None;
    for tau in BASELINE_TAUS {
        let r = evaluate_lap(&Features::Pixels, &segment, &pixels, tau, classes)?;
        if best.as_ref().is_none_or(|(_, b)| r.macro_f1 > b.macro_f1) {
            best = Some((tau, r));
        }
    }
    let (baseline_tau, baseline) = best.expect("the threshold grid is not empty");
    Ok(EvalOutcome {
        model: report,
        baseline,
        baseline_tau,
        static_magnitude: static_flow_magnitude(h, model, &segment)?,
        templates: memory.len(),
    })
}

/// Trains over the whole training phase, then evaluates.
pub fn run_protocol(cfg: &RunConfig, out: Option<&Path>) -> Result<(Checkpoint, EvalOutcome)> {
    let mut session = TrainSession::new(cfg.clone())?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        session = session.with_log(&dir.join("train.jsonl"))?;
    }
    session.run()?;
    let ckpt = session.checkpoint();
    let outcome = evaluate(cfg, &ckpt.hierarchy, &ckpt.state.model, &ckpt.templates)?;
    if let Some(dir) = out {
        ckpt.save(&dir.join("final.ckpt"), &cfg.hash())?;
    }
    Ok((ckpt, outcome))
}
