//! First-order optimizers over lists of parameter tensors.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer with its state for one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Adam first and second moments; empty for SGD.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &[Tensor]) -> Self {
        let zeros = || -> Vec<Tensor> {
            match kind {
                OptimizerKind::Sgd => Vec::new(),
                OptimizerKind::Adam => params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            }
        };
        Self {
            kind,
            lr,
            m: zeros(),
            v: zeros(),
            steps: 0,
        }
    }

    /// One update; a `None` gradient counts as zero.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) {
        debug_assert_eq!(params.len(), grads.len());
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                if self.lr == 0.0 {
                    return;
                }
                for (p, g) in params.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        p.axpy(-self.lr, g);
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as f64;
                let c1 = 1.0 - libm::pow(ADAM_BETA1, t);
                let c2 = 1.0 - libm::pow(ADAM_BETA2, t);
                for (i, p) in params.iter_mut().enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    let g = grads[i].as_ref();
                    for j in 0..p.len() {
                        let gj = g.map_or(0.0, |g| g.data()[j]);
                        let mj = ADAM_BETA1 * m.data()[j] + (1.0 - ADAM_BETA1) * gj;
                        let vj = ADAM_BETA2 * v.data()[j] + (1.0 - ADAM_BETA2) * gj * gj;
                        m.data_mut()[j] = mj;
                        v.data_mut()[j] = vj;
                        if self.lr != 0.0 {
                            p.data_mut()[j] -= self.lr * (mj / c1) / (libm::sqrt(vj / c2) + ADAM_EPS);
                        }
                    }
                }
            }
        }
    }
}

/// `ema ← ξ·ema + (1−ξ)·gra`, leaving entries that already agree untouched.
pub fn ema_update(ema: &mut [Tensor], gra: &[Tensor], xi: f64) {
    for (e, g) in ema.iter_mut().zip(gra) {
        for (ev, gv) in e.data_mut().iter_mut().zip(g.data()) {
            if *ev != *gv {
                *ev = xi * *ev + (1.0 - xi) * gv;
            }
        }
    }
}
