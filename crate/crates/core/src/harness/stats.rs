use crate::{Error, Result};

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// `1.96 · s / √n` with `s` the sample standard deviation.
pub fn ci95(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Config(format!("ci95 needs at least 2 values, got {n}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("ci95 input {values:?}")));
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    // sqrt(var / n) rather than sqrt(var) / sqrt(n) keeps [0, 1] at exactly 0.98.
    Ok(1.96 * (var / n as f64).sqrt())
}

/// Stops once `patience` epochs pass without a strictly better validation score.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    pub patience: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Result<Self> {
        if patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(Self { patience, best: None })
    }

    /// Record the score for `epoch`; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some((_, b)) if score <= b => false,
            _ => {
                self.best = Some((epoch, score));
                true
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best.map(|(_, s)| s)
    }

    /// True once `epoch` is `patience` epochs past the best one.
    pub fn should_stop(&self, epoch: usize) -> bool {
        self.best.is_some_and(|(b, _)| epoch >= b + self.patience)
    }
}
