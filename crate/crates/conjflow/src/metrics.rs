//! Append-only JSON-lines logs.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use conjflow_core::trainer::{ActiveMask, LevelReport, StepReport};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub t: u64,
    pub loss: f64,
    pub levels: Vec<LevelReport>,
    pub active: ActiveMask,
    pub diverged: bool,
    /// Level-1 endpoint error on the pair just trained, when ground truth exists.
    pub epe: Option<f64>,
    /// Seconds since the run (or resumed run) started.
    pub wall: f64,
}

impl StepRecord {
    pub fn new(report: &StepReport, epe: Option<f64>, wall: f64) -> Self {
        Self {
            step: report.step,
            t: report.t,
            loss: report.loss,
            levels: report.levels.clone(),
            active: report.active.clone(),
            diverged: report.diverged,
            epe,
            wall,
        }
    }
}

pub struct JsonLines {
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
