use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use conjflow::checkpoint::Checkpoint;
use conjflow::config::{preset, preset_names, RunConfig};
use conjflow::io::{generate_toy_stream, DirectoryStream};
use conjflow::metrics::JsonLines;
use conjflow::protocol::{eval_segment, evaluate, TrainSession};
use conjflow::render::{feature_image, save_png};
use conjflow_core::evalkit::{classify_frame, render_flow, render_prediction};
use conjflow_core::hierarchy::{ema_features, frame_flow};
use conjflow_core::stream::{toy_spec, FrameSource, SyntheticSpec, SyntheticStream};

#[derive(Parser)]
#[command(name = "conjflow", version, about = "Online feature and motion-flow learning on a video stream")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Unsupervised training over the training laps, with template collection.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides both the model and the trainer seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Scores a checkpoint on the held-out laps.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write flow and prediction PNGs for every evaluated frame.
        #[arg(long)]
        render: bool,
    },
    /// Flow, feature and prediction images for the frames of a stream.
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        /// A frame directory or a synthetic stream spec (TOML).
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        frames: u64,
        /// Flow magnitude mapped to full saturation; per-frame maximum when absent.
        #[arg(long)]
        max_flow: Option<f64>,
        #[arg(long, default_value_t = 0.1)]
        tau_abstain: f64,
    },
    /// Writes a synthetic stream to a frame directory.
    GenToy {
        /// Synthetic stream spec (TOML), or `toy` for the built-in two-object stream.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints a shipped configuration preset as TOML.
    Preset { name: String },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Train {
            config,
            resume,
            seed,
            out,
        } => train(&config, resume.as_deref(), seed, &out),
        Command::Eval {
            config,
            ckpt,
            out,
            render,
        } => eval(&config, &ckpt, &out, render),
        Command::Viz {
            ckpt,
            stream,
            out,
            frames,
            max_flow,
            tau_abstain,
        } => viz(&ckpt, &stream, &out, frames, max_flow, tau_abstain),
        Command::GenToy { spec, out } => {
            let spec = if spec == "toy" { toy_spec(4, 0) } else { read_spec(Path::new(&spec))? };
            let summary = generate_toy_stream(&spec, &out)?;
            println!("{}", serde_json::to_string(&summary)?);
            Ok(())
        }
        Command::Preset { name } => {
            let Some(cfg) = preset(&name) else {
                bail!("unknown preset {name}; available: {}", preset_names().join(", "));
            };
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn read_spec(path: &Path) -> anyhow::Result<SyntheticSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec: SyntheticSpec = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    spec.validate()?;
    Ok(spec)
}

fn train(config: &Path, resume: Option<&Path>, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.model.seed = s;
        cfg.trainer.seed = s;
    }
    std::fs::create_dir_all(out)?;
    cfg.save(&out.join("config.toml"))?;
    let session = match resume {
        Some(path) => {
            let (ckpt, _) = Checkpoint::load(path, Some(&cfg.hash()))?;
            TrainSession::resume(cfg.clone(), ckpt)?
        }
        None => TrainSession::new(cfg.clone())?,
    };
    let mut session = session
        .with_log(&out.join("train.jsonl"))?
        .with_checkpoints(&out.join("checkpoints"))?;
    session.run()?;
    let ckpt = session.checkpoint();
    ckpt.save(&out.join("final.ckpt"), &cfg.hash())?;
    println!(
        "trained {} steps over {} frames, {} templates; checkpoint {}",
        ckpt.state.model.step,
        ckpt.state.frames,
        ckpt.templates.len(),
        out.join("final.ckpt").display()
    );
    Ok(())
}

fn eval(config: &Path, ckpt: &Path, out: &Path, render: bool) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let (ckpt, _) = Checkpoint::load(ckpt, Some(&cfg.hash()))?;
    if ckpt.templates.is_empty() {
        bail!("the checkpoint holds no templates; train through the template frames first");
    }
    std::fs::create_dir_all(out)?;
    let outcome = evaluate(&cfg, &ckpt.hierarchy, &ckpt.state.model, &ckpt.templates)?;
    let mut log = JsonLines::create(&out.join("metrics.jsonl"))?;
    for record in &outcome.model.frames {
        log.write(record)?;
    }
    log.write(&serde_json::json!({
        "aggregate": {
            "macro_f1": outcome.model.macro_f1,
            "classes": outcome.model.classes,
            "epe": outcome.model.epe,
            "pixels": outcome.model.pixels,
            "baseline_macro_f1": outcome.baseline.macro_f1,
            "baseline_tau_abstain": outcome.baseline_tau,
            "static_flow_magnitude": outcome.static_magnitude,
            "templates": outcome.templates,
        }
    }))?;
    log.flush()?;
    if render {
        let segment = eval_segment(&cfg)?;
        for (i, (frame, _)) in segment.iter().enumerate() {
            let feats = ema_features(&ckpt.hierarchy, &ckpt.state.model, &frame.pixels)?;
            let pred = classify_frame(&feats, &ckpt.templates, cfg.eval.tau_abstain)?;
            save_png(&render_prediction(&pred, frame)?, &out.join(format!("pred-{:06}.png", frame.t)))?;
            if i > 0 {
                let flow = frame_flow(&ckpt.hierarchy, &ckpt.state.model, &segment[i - 1].0.pixels, &frame.pixels)?;
                save_png(&render_flow(&flow, None), &out.join(format!("flow-{:06}.png", frame.t)))?;
            }
        }
    }
    println!(
        "macro F1 {:.4} (pixel baseline {:.4}), EPE {}",
        outcome.model.macro_f1,
        outcome.baseline.macro_f1,
        outcome.model.epe.map_or("n/a".into(), |e| format!("{e:.3}"))
    );
    Ok(())
}

fn viz(ckpt: &Path, stream: &Path, out: &Path, frames: u64, max_flow: Option<f64>, tau_abstain: f64) -> anyhow::Result<()> {
    let (ckpt, _) = Checkpoint::load(ckpt, None)?;
    let mut source: Box<dyn FrameSource> = if stream.is_dir() {
        Box::new(DirectoryStream::open(stream)?)
    } else {
        Box::new(SyntheticStream::new(read_spec(stream)?)?)
    };
    std::fs::create_dir_all(out)?;
    let (h, model) = (&ckpt.hierarchy, &ckpt.state.model);
    let mut prev = None;
    for _ in 0..frames {
        let frame = match source.next_frame() {
            Ok(f) => f,
            Err(conjflow_core::Error::EndOfStream { .. }) => break,
            Err(e) => return Err(e.into()),
        };
        let feats = ema_features(h, model, &frame.pixels)?;
        for (l, f) in feats.iter().enumerate() {
            save_png(&feature_image(f), &out.join(format!("feat{}-{:06}.png", l + 1, frame.t)))?;
        }
        if !ckpt.templates.is_empty() {
            let pred = classify_frame(&feats, &ckpt.templates, tau_abstain)?;
            save_png(&render_prediction(&pred, &frame)?, &out.join(format!("pred-{:06}.png", frame.t)))?;
        }
        if let Some(p) = &prev {
            let flow = frame_flow(h, model, p, &frame.pixels)?;
            save_png(&render_flow(&flow, max_flow), &out.join(format!("flow-{:06}.png", frame.t)))?;
        }
        prev = Some(frame.pixels);
    }
    Ok(())
}
