//! Functional network definitions.
//!
//! Every forward pass takes its parameters as an explicit [`ParamSet`], so
//! fast weights produced by an inner loop drop in without touching the
//! network definition.

pub mod checkpoint;
mod critic;
mod highend;
mod lowend;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::functional::{batch_norm_running, channel_moments};
use crate::autodiff::Tensor;
use crate::params::{ParamSet, Partition};
use crate::{rng, Error, Result};

pub use critic::{
    critic_forward, critic_input_gradient_norm, estimate_critic_memory, pad_for_layer, CriticShapes, CriticSpec,
    CRITIC_KERNEL, CRITIC_KERNELS_PER_LAYER, CRITIC_LAYERS,
};
pub use highend::HighEndSpec;
pub use lowend::{InputKind, LowEndSpec};

/// Default decay of the running-statistics moving averages.
pub const DEFAULT_NORM_MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// `U(-√k, √k)` with `k = 1 / fan_in` for weights and biases.
    FaninUniform,
    /// Glorot-uniform weights, zero biases.
    Xavier,
    /// Glorot everywhere except the final linear layer, which keeps fan-in uniform.
    XavierExceptLast,
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fanin_uniform" => Ok(InitScheme::FaninUniform),
            "xavier" => Ok(InitScheme::Xavier),
            "xavier_except_last" => Ok(InitScheme::XavierExceptLast),
            other => Err(Error::Unknown {
                kind: "init scheme",
                value: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitScheme::FaninUniform => "fanin_uniform",
            InitScheme::Xavier => "xavier",
            InitScheme::XavierExceptLast => "xavier_except_last",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum ParamKind {
    Weight { fan_in: usize, fan_out: usize },
    Bias { fan_in: usize },
    NormScale,
    NormShift,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub partition: Partition,
    /// Part of the classifier's final linear layer.
    pub last_linear: bool,
}

impl ParamSpec {
    pub fn weight(name: String, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Self {
        Self {
            name,
            shape,
            kind: ParamKind::Weight { fan_in, fan_out },
            partition: Partition::Adapted,
            last_linear: false,
        }
    }

    pub fn bias(name: String, len: usize, fan_in: usize) -> Self {
        Self {
            name,
            shape: vec![len],
            kind: ParamKind::Bias { fan_in },
            partition: Partition::Adapted,
            last_linear: false,
        }
    }

    pub fn norm(prefix: &str, channels: usize) -> [Self; 2] {
        [
            Self {
                name: format!("{prefix}.scale"),
                shape: vec![channels],
                kind: ParamKind::NormScale,
                partition: Partition::Adapted,
                last_linear: false,
            },
            Self {
                name: format!("{prefix}.shift"),
                shape: vec![channels],
                kind: ParamKind::NormShift,
                partition: Partition::Adapted,
                last_linear: false,
            },
        ]
    }
}

/// Draw a parameter set from `specs`, deterministic in `(specs, scheme, seed)`.
pub(crate) fn init_from_specs(specs: &[ParamSpec], scheme: InitScheme, seed: u64) -> Result<ParamSet> {
    let mut rng = rng::stream(seed, "init", 0);
    let mut out = ParamSet::new();
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let fanin_scheme = matches!(scheme, InitScheme::FaninUniform)
            || (scheme == InitScheme::XavierExceptLast && spec.last_linear);
        let values: Vec<f64> = match spec.kind {
            ParamKind::NormScale => vec![1.0; n],
            ParamKind::NormShift => vec![0.0; n],
            ParamKind::Weight { fan_in, fan_out } => {
                let bound = if fanin_scheme {
                    (1.0 / fan_in as f64).sqrt()
                } else {
                    (6.0 / (fan_in + fan_out) as f64).sqrt()
                };
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
            ParamKind::Bias { fan_in } => {
                if fanin_scheme {
                    let bound = (1.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                } else {
                    vec![0.0; n]
                }
            }
        };
        out.push(spec.name.clone(), Tensor::constant(&spec.shape, values)?, spec.partition)?;
    }
    Ok(out)
}

/// Check that `params` has exactly the names and shapes of `specs`.
pub(crate) fn conforms(params: &ParamSet, specs: &[ParamSpec], what: &str) -> Result<()> {
    if params.len() != specs.len() {
        return Err(Error::Architecture(format!(
            "{what} expects {} parameter tensors, got {}",
            specs.len(),
            params.len()
        )));
    }
    for spec in specs {
        let t = params.get(&spec.name)?;
        if t.shape() != spec.shape.as_slice() {
            return Err(Error::ParamShape {
                name: spec.name.clone(),
                expected: spec.shape.clone(),
                got: t.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Exponential moving averages of per-channel moments, keyed by norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub momentum: f64,
    pub layers: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl RunningStats {
    /// Zero mean and unit variance for every norm layer.
    pub fn new(layers: &[(String, usize)], momentum: f64) -> Self {
        Self {
            momentum,
            layers: layers
                .iter()
                .map(|(name, c)| (name.clone(), (vec![0.0; *c], vec![1.0; *c])))
                .collect(),
        }
    }

    pub fn get(&self, layer: &str) -> Result<&(Vec<f64>, Vec<f64>)> {
        self.layers
            .get(layer)
            .ok_or_else(|| Error::Architecture(format!("no running statistics for norm layer `{layer}`")))
    }

    /// Blend batch moments in: `stat ← m·stat + (1 − m)·batch`.
    pub fn absorb(&mut self, moments: &[(String, Vec<f64>, Vec<f64>)]) -> Result<()> {
        let m = self.momentum;
        for (name, mean, var) in moments {
            let (rm, rv) = self
                .layers
                .get_mut(name)
                .ok_or_else(|| Error::Architecture(format!("unknown norm layer `{name}`")))?;
            for (r, b) in rm.iter_mut().zip(mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, b) in rv.iter_mut().zip(var) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
        Ok(())
    }
}

/// Normalization context for one forward pass. Optionally records the
/// batch moments seen at each norm layer; the output never depends on them.
pub(crate) struct NormCtx<'a> {
    stats: &'a RunningStats,
    record: Option<Vec<(String, Vec<f64>, Vec<f64>)>>,
}

impl<'a> NormCtx<'a> {
    pub fn new(stats: &'a RunningStats, collect: bool) -> Self {
        Self {
            stats,
            record: collect.then(Vec::new),
        }
    }

    pub fn apply(&mut self, layer: &str, x: &Tensor, params: &ParamSet) -> Result<Tensor> {
        if let Some(rec) = self.record.as_mut() {
            let (mean, var) = channel_moments(x)?;
            rec.push((layer.to_string(), mean, var));
        }
        let (mean, var) = self.stats.get(layer)?;
        let scale = params.get(&format!("{layer}.scale"))?;
        let shift = params.get(&format!("{layer}.shift"))?;
        Ok(batch_norm_running(x, mean, var, scale, shift)?)
    }

    pub fn into_moments(self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        self.record.unwrap_or_default()
    }
}

/// The base-model architecture.
#[derive(Clone, Debug, PartialEq)]
pub enum Arch {
    LowEnd(LowEndSpec),
    HighEnd(HighEndSpec),
}

impl Arch {
    pub(crate) fn param_specs(&self) -> Vec<ParamSpec> {
        match self {
            Arch::LowEnd(s) => s.param_specs(),
            Arch::HighEnd(s) => s.param_specs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Arch::LowEnd(s) => s.validate(),
            Arch::HighEnd(s) => s.validate(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Arch::LowEnd(s) => s.num_classes,
            Arch::HighEnd(s) => s.num_classes,
        }
    }

    /// Shape of a single input sample (without the batch axis).
    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            Arch::LowEnd(s) => s.input.sample_shape(),
            Arch::HighEnd(s) => vec![s.in_channels, s.height, s.width],
        }
    }

    pub fn norm_layers(&self) -> Vec<(String, usize)> {
        self.param_specs()
            .iter()
            .filter(|p| p.kind == ParamKind::NormScale)
            .map(|p| (p.name.trim_end_matches(".scale").to_string(), p.shape[0]))
            .collect()
    }

    pub fn running_stats(&self, momentum: f64) -> RunningStats {
        RunningStats::new(&self.norm_layers(), momentum)
    }

    pub fn init_params(&self, scheme: InitScheme, seed: u64) -> Result<ParamSet> {
        self.validate()?;
        init_from_specs(&self.param_specs(), scheme, seed)
    }

    pub fn num_params(&self) -> usize {
        self.param_specs().iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }

    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        conforms(params, &self.param_specs(), self.kind_name())
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Arch::LowEnd(_) => "lowend",
            Arch::HighEnd(_) => "highend",
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let sample = self.sample_shape();
        if x.ndim() != sample.len() + 1 || x.shape()[1..] != sample[..] || x.shape()[0] == 0 {
            return Err(Error::Architecture(format!(
                "input shape {:?} does not match (batch, {:?})",
                x.shape(),
                sample
            )));
        }
        Ok(())
    }

    fn forward_ctx(&self, params: &ParamSet, x: &Tensor, norm: &mut NormCtx<'_>) -> Result<Tensor> {
        self.check_input(x)?;
        match self {
            Arch::LowEnd(s) => s.forward(params, x, norm),
            Arch::HighEnd(s) => s.forward(params, x, norm),
        }
    }

    /// Logits `(batch, classes)`, normalizing with running statistics only.
    pub fn forward(&self, params: &ParamSet, x: &Tensor, stats: &RunningStats) -> Result<Tensor> {
        let mut ctx = NormCtx::new(stats, false);
        self.forward_ctx(params, x, &mut ctx)
    }

    /// Forward pass that also returns the batch moments seen at each norm
    /// layer, for a later [`RunningStats::absorb`].
    pub fn forward_collect(
        &self,
        params: &ParamSet,
        x: &Tensor,
        stats: &RunningStats,
    ) -> Result<(Tensor, Vec<(String, Vec<f64>, Vec<f64>)>)> {
        let mut ctx = NormCtx::new(stats, true);
        let y = self.forward_ctx(params, x, &mut ctx)?;
        Ok((y, ctx.into_moments()))
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        match self {
            Arch::LowEnd(s) => s.to_kv(),
            Arch::HighEnd(s) => s.to_kv(),
        }
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        match kv.get("kind").map(String::as_str).unwrap_or("lowend") {
            "lowend" => Ok(Arch::LowEnd(LowEndSpec::from_kv(kv)?)),
            "highend" => Ok(Arch::HighEnd(HighEndSpec::from_kv(kv)?)),
            other => Err(Error::Unknown {
                kind: "architecture",
                value: other.to_string(),
            }),
        }
    }
}

pub(crate) fn kv_usize(kv: &BTreeMap<String, String>, key: &str, default: usize) -> Result<usize> {
    match kv.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("`{key}` must be a non-negative integer, got `{v}`"))),
    }
}

pub(crate) fn kv_f64(kv: &BTreeMap<String, String>, key: &str, default: f64) -> Result<f64> {
    match kv.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("`{key}` must be a number, got `{v}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp() -> Arch {
        Arch::LowEnd(LowEndSpec::mlp(4, 3, 2, 6))
    }

    #[test]
    fn init_is_deterministic() {
        let a = mlp().init_params(InitScheme::FaninUniform, 11).unwrap();
        let b = mlp().init_params(InitScheme::FaninUniform, 11).unwrap();
        let c = mlp().init_params(InitScheme::FaninUniform, 12).unwrap();
        assert_eq!(a.flat_values(), b.flat_values());
        assert_ne!(a.flat_values(), c.flat_values());
    }

    #[test]
    fn xavier_except_last_keeps_only_head_bias() {
        let p = mlp().init_params(InitScheme::XavierExceptLast, 3).unwrap();
        for e in p.iter() {
            let is_bias = e.name.ends_with(".bias") || e.name.ends_with(".shift");
            if !is_bias {
                continue;
            }
            let all_zero = e.tensor.data().iter().all(|&v| v == 0.0);
            if e.name == "head.bias" {
                assert!(!all_zero, "head bias should keep fan-in init");
            } else {
                assert!(all_zero, "{} should be zero", e.name);
            }
        }
    }

    #[test]
    fn fanin_bound_for_conv_with_nine_inputs_kernel_two() {
        let spec = vec![
            ParamSpec::weight("w".into(), vec![8, 9, 2], 18, 16),
            ParamSpec::bias("b".into(), 8, 18),
        ];
        let p = init_from_specs(&spec, InitScheme::FaninUniform, 5).unwrap();
        let bound = (1.0f64 / 18.0).sqrt();
        assert!(p.flat_values().iter().all(|v| v.abs() <= bound));
        assert!(p.flat_values().iter().any(|v| v.abs() > 0.5 * bound));
    }

    #[test]
    fn unknown_scheme_rejected() {
        assert!("kaiming".parse::<InitScheme>().is_err());
        assert_eq!("xavier".parse::<InitScheme>().unwrap(), InitScheme::Xavier);
    }

    #[test]
    fn running_stats_absorb_blends() {
        let mut rs = RunningStats::new(&[("n".to_string(), 1)], 0.9);
        rs.absorb(&[("n".to_string(), vec![1.0], vec![3.0])]).unwrap();
        let (m, v) = rs.get("n").unwrap();
        assert!((m[0] - 0.1).abs() < 1e-15);
        assert!((v[0] - 1.2).abs() < 1e-15);
    }
}
