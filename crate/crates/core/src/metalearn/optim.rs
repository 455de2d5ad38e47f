use std::collections::HashMap;
use std::str::FromStr;

use crate::autodiff::Tensor;
use crate::params::ParamSet;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OuterOptimizer {
    Adam,
    Sgd,
}

impl FromStr for OuterOptimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OuterOptimizer::Adam),
            "sgd" => Ok(OuterOptimizer::Sgd),
            other => Err(Error::Unknown {
                kind: "optimizer",
                value: other.to_string(),
            }),
        }
    }
}

impl OuterOptimizer {
    pub fn as_str(self) -> &'static str {
        match self {
            OuterOptimizer::Adam => "adam",
            OuterOptimizer::Sgd => "sgd",
        }
    }
}

/// Adaptive-moment estimation with bias correction. Moments are keyed by
/// `group/name`, so several parameter sets can share one instance.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Advance the shared step counter; call once per outer update.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Updated copy of `params` given one gradient per entry.
    pub fn apply(&mut self, group: &str, params: &ParamSet, grads: &[Tensor]) -> Result<ParamSet> {
        let t = self.t.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut updates = Vec::with_capacity(params.len());
        for (e, g) in params.iter().zip(grads) {
            let key = format!("{group}/{}", e.name);
            let n = e.tensor.numel();
            let (m, v) = self.moments.entry(key).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let data: Vec<f64> = e
                .tensor
                .data()
                .iter()
                .zip(g.data())
                .enumerate()
                .map(|(i, (&p, &gi))| {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                    p - self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps)
                })
                .collect();
            updates.push((e.name.clone(), Tensor::constant(e.tensor.shape(), data)?));
        }
        params.with_replaced(&updates)
    }
}

/// `p ← p − lr · g` for every entry.
pub(crate) fn sgd(params: &ParamSet, grads: &[Tensor], lr: f64) -> Result<ParamSet> {
    let mut updates = Vec::with_capacity(params.len());
    for (e, g) in params.iter().zip(grads) {
        let data = e.tensor.data().iter().zip(g.data()).map(|(p, g)| p - lr * g).collect();
        updates.push((e.name.clone(), Tensor::constant(e.tensor.shape(), data)?));
    }
    params.with_replaced(&updates)
}
