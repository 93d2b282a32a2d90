//! Minibatch SGD driver shared by the three training stages.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sgd_step, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl SgdConfig {
    pub(crate) fn collect_errors(&self, path: &str, errs: &mut Vec<String>) {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            errs.push(format!("{path}.lr: must be a positive finite number"));
        }
        if self.batch == 0 {
            errs.push(format!("{path}.batch: must be positive"));
        }
    }
}

/// Runs plain momentum-free SGD on the mean per-sample gradient.
///
/// `sample_grad(params, index, grads)` accumulates the gradient of sample
/// `index` into `grads` and returns its loss. `project` runs after every update
/// and may clamp constrained parameters. Returns the mean training loss of each
/// epoch.
pub fn run_sgd<P, F, G>(params: &mut P, n: usize, cfg: &SgdConfig, mut sample_grad: F, mut project: G) -> Result<Vec<f64>>
where
    P: Params + Clone,
    F: FnMut(&P, usize, &mut P) -> Result<f64>,
    G: FnMut(&mut P),
{
    if n == 0 {
        return Err(Error::Empty("training samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut grads = params.clone();
            grads.zero();
            for &i in chunk {
                total += sample_grad(params, i, &mut grads)?;
            }
            sgd_step(params, &grads, cfg.lr / chunk.len() as f64);
            project(params);
        }
        let mean = total / n as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        trace.push(mean);
    }
    Ok(trace)
}
