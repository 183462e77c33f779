//! Flat named parameter collections and the optimizers that update them.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub entries: Vec<Param>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        let name = name.into();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(self.entries.iter().all(|p| p.name != name));
        self.entries.push(Param { name, shape, data });
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|p| p.data.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian payload bytes. Used for
    /// the frozen-parameter isolation checks and checkpoint digests.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.entries {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Inserts every parameter onto `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<Vec<Tensor>> {
        self.entries
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.data.clone(), &p.shape)
                } else {
                    tape.constant(p.data.clone(), &p.shape)
                }
            })
            .collect()
    }

    /// Gradients of previously bound tensors, in entry order. Parameters the
    /// backward pass never reached get zero gradients.
    pub fn grads(&self, bound: &[Tensor]) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .zip(bound)
            .map(|(p, t)| t.grad().unwrap_or_else(|| vec![0.0; p.data.len()]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer with optional adaptive state. Plain SGD is the default
/// contract; Adam is available behind a config flag.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub step_count: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, set: &ParamSet) -> Self {
        let zeros = || set.entries.iter().map(|p| vec![0.0; p.data.len()]).collect();
        match kind {
            OptimizerKind::Sgd => {
                Optimizer { kind, step_count: 0, m: Vec::new(), v: Vec::new() }
            }
            OptimizerKind::Adam => {
                Optimizer { kind, step_count: 0, m: zeros(), v: zeros() }
            }
        }
    }

    pub fn step(&mut self, set: &mut ParamSet, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != set.entries.len() {
            return Err(Error::invalid("optimizer", "gradient count mismatch"));
        }
        for (p, g) in set.entries.iter().zip(grads) {
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient {bad} for parameter {}",
                    p.name
                )));
            }
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in set.entries.iter_mut().zip(grads) {
                    for (w, gv) in p.data.iter_mut().zip(g) {
                        *w -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                self.step_count += 1;
                let t = self.step_count as f64;
                let bc1 = 1.0 - ADAM_BETA1.powf(t);
                let bc2 = 1.0 - ADAM_BETA2.powf(t);
                for ((p, g), (m, v)) in set
                    .entries
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for i in 0..p.data.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p.data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
