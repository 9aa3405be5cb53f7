//! Shared training-loop plumbing: optimizer step, loss log, divergence and
//! early-stop checks.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use hdrfuse_tensor::{Adam, Bound, Graph, ParamStore, Var};
use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step losses. `tracked` is the quantity a stage is judged on (for
/// example the reconstruction term without the KL or GAN terms).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub total: Vec<f64>,
    pub tracked: Vec<f64>,
    pub grad_norm: Vec<f64>,
}

impl LossLog {
    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,total,tracked,grad_norm\n");
        for i in 0..self.total.len() {
            writeln!(s, "{i},{},{},{}", self.total[i], self.tracked[i], self.grad_norm[i]).unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Means of consecutive non-overlapping windows; a trailing partial window
/// is dropped.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    values.chunks_exact(window).map(|c| c.iter().sum::<f64>() / window as f64).collect()
}

/// Trailing moving average at every index once `window` values exist.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if values.len() < window || window == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() - window + 1);
    let mut sum: f64 = values[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..values.len() {
        sum += values[i] - values[i - window];
        out.push(sum / window as f64);
    }
    out
}

/// Stop once the trailing mean of the tracked loss over `window` steps is
/// below `threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub window: usize,
    pub threshold: f64,
}

pub struct Trainer {
    pub adam: Adam<f32>,
    seed: u64,
    log: LossLog,
    early_stop: Option<EarlyStop>,
}

impl Trainer {
    pub fn new(adam: Adam<f32>, seed: u64) -> Self {
        Self { adam, seed, log: LossLog::default(), early_stop: None }
    }

    pub fn with_early_stop(mut self, es: Option<EarlyStop>) -> Self {
        self.early_stop = es;
        self
    }

    /// Backpropagate `loss`, update `store` and record both losses. Returns
    /// `true` when the early-stop condition is met.
    pub fn step(
        &mut self,
        step: usize,
        g: &Graph<f32>,
        loss: Var<'_, f32>,
        tracked: Var<'_, f32>,
        p: &Bound<'_, f32>,
        store: &mut ParamStore<f32>,
    ) -> Result<bool> {
        let total = f64::from(loss.value().data()[0]);
        let tr = f64::from(tracked.value().data()[0]);
        if !total.is_finite() || !tr.is_finite() {
            return Err(Error::Divergence { step, seed: self.seed, loss: total });
        }
        let mut grads = g.backward(loss);
        let gs = p.grads(&mut grads);
        drop(grads);
        let norm = self.adam.step(store, &gs);
        if !norm.is_finite() {
            return Err(Error::Divergence { step, seed: self.seed, loss: total });
        }
        self.record(step, total, tr, norm);
        Ok(self.should_stop())
    }

    pub fn record(&mut self, step: usize, total: f64, tracked: f64, grad_norm: f64) {
        self.log.total.push(total);
        self.log.tracked.push(tracked);
        self.log.grad_norm.push(grad_norm);
        if step.is_multiple_of(100) {
            debug!("step {step}: loss {total:.5} tracked {tracked:.5} |g| {grad_norm:.3}");
        }
    }

    fn should_stop(&self) -> bool {
        let Some(es) = self.early_stop else { return false };
        let t = &self.log.tracked;
        t.len() >= es.window && t[t.len() - es.window..].iter().sum::<f64>() / (es.window as f64) < es.threshold
    }

    pub fn log(&self) -> &LossLog {
        &self.log
    }

    pub fn into_log(self) -> LossLog {
        self.log
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averages() {
        let v = [4.0, 2.0, 3.0, 1.0, 9.0];
        assert_eq!(window_means(&v, 2), vec![3.0, 2.0]);
        assert_eq!(moving_average(&v, 2), vec![3.0, 2.5, 2.0, 5.0]);
        assert!(moving_average(&v, 6).is_empty());
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let log = LossLog { total: vec![1.0, 0.5], tracked: vec![0.9, 0.4], grad_norm: vec![2.0, 1.0] };
        assert_eq!(log.to_csv().lines().count(), 3);
    }
}
