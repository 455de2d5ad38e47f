use std::collections::BTreeMap;

use crate::autodiff::functional::{avg_pool2d, conv2d, global_avg_pool2d, linear};
use crate::autodiff::Tensor;
use crate::params::{ParamSet, Partition};
use crate::{Error, Result};

use super::{kv_f64, kv_usize, NormCtx, ParamSpec};

/// Dense-stage classifier. Each stage is a run of dense block units
/// (squeeze-excite gate followed by a bottleneck); stages are joined by a
/// compressing transition layer.
///
/// Only the last unit of the last stage and the final linear layer are
/// adapted in the inner loop; everything else is shared.
#[derive(Clone, Debug, PartialEq)]
pub struct HighEndSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub stem_channels: usize,
    pub growth_rate: usize,
    pub units_per_stage: usize,
    pub num_stages: usize,
    pub compression: f64,
    pub se_reduction: usize,
    /// Bottleneck width as a multiple of the growth rate.
    pub bottleneck_factor: usize,
}

impl HighEndSpec {
    pub fn new(in_channels: usize, height: usize, width: usize, num_classes: usize, growth_rate: usize) -> Self {
        Self {
            in_channels,
            height,
            width,
            num_classes,
            stem_channels: 2 * growth_rate,
            growth_rate,
            units_per_stage: 2,
            num_stages: 2,
            compression: 0.5,
            se_reduction: 16,
            bottleneck_factor: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.in_channels > 0
            && self.num_classes > 0
            && self.stem_channels > 0
            && self.growth_rate > 0
            && self.units_per_stage > 0
            && self.num_stages > 0
            && self.se_reduction > 0
            && self.bottleneck_factor > 0
            && self.compression > 0.0
            && self.compression <= 1.0;
        if !ok {
            return Err(Error::Architecture(format!("invalid high-end spec {self:?}")));
        }
        let shrink = 1usize << (self.num_stages - 1);
        if self.height < shrink || self.width < shrink {
            return Err(Error::Architecture(format!(
                "{}x{} input too small for {} transition layers",
                self.height,
                self.width,
                self.num_stages - 1
            )));
        }
        Ok(())
    }

    pub fn unit_prefix(stage: usize, unit: usize) -> String {
        format!("stage{stage}.unit{unit}")
    }

    fn se_hidden(&self, channels: usize) -> usize {
        (channels / self.se_reduction).max(1)
    }

    /// Input channel count of every unit, per stage, plus each stage's output.
    pub fn channel_plan(&self) -> Vec<(Vec<usize>, usize)> {
        let mut c = self.stem_channels;
        let mut plan = Vec::new();
        for s in 0..self.num_stages {
            let ins: Vec<usize> = (0..self.units_per_stage).map(|u| c + u * self.growth_rate).collect();
            c += self.units_per_stage * self.growth_rate;
            plan.push((ins, c));
            if s + 1 < self.num_stages {
                c = self.transition_out(c);
            }
        }
        plan
    }

    fn transition_out(&self, c: usize) -> usize {
        ((c as f64 * self.compression).floor() as usize).max(1)
    }

    pub(crate) fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let conv = |specs: &mut Vec<ParamSpec>, name: &str, cout: usize, cin: usize, k: usize| {
            specs.push(ParamSpec::weight(format!("{name}.weight"), vec![cout, cin, k, k], cin * k * k, cout * k * k));
            specs.push(ParamSpec::bias(format!("{name}.bias"), cout, cin * k * k));
        };
        let dense = |specs: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize| {
            specs.push(ParamSpec::weight(format!("{name}.weight"), vec![cin, cout], cin, cout));
            specs.push(ParamSpec::bias(format!("{name}.bias"), cout, cin));
        };

        conv(&mut specs, "stem.conv", self.stem_channels, self.in_channels, 3);
        specs.extend(ParamSpec::norm("stem.norm", self.stem_channels));
        let bottleneck = self.bottleneck_factor * self.growth_rate;
        let plan = self.channel_plan();
        for (s, (unit_ins, stage_out)) in plan.iter().enumerate() {
            for (u, &c) in unit_ins.iter().enumerate() {
                let p = Self::unit_prefix(s, u);
                let r = self.se_hidden(c);
                dense(&mut specs, &format!("{p}.se.fc1"), c, r);
                dense(&mut specs, &format!("{p}.se.fc2"), r, c);
                specs.extend(ParamSpec::norm(&format!("{p}.norm1"), c));
                conv(&mut specs, &format!("{p}.conv1"), bottleneck, c, 1);
                specs.extend(ParamSpec::norm(&format!("{p}.norm2"), bottleneck));
                conv(&mut specs, &format!("{p}.conv2"), self.growth_rate, bottleneck, 3);
            }
            if s + 1 < self.num_stages {
                let p = format!("transition{s}");
                specs.extend(ParamSpec::norm(&format!("{p}.norm"), *stage_out));
                conv(&mut specs, &format!("{p}.conv"), self.transition_out(*stage_out), *stage_out, 1);
            }
        }
        let final_c = plan.last().map(|(_, c)| *c).unwrap_or(self.stem_channels);
        specs.extend(ParamSpec::norm("final.norm", final_c));
        dense(&mut specs, "head", final_c, self.num_classes);
        let n = specs.len();
        specs[n - 2].last_linear = true;
        specs[n - 1].last_linear = true;

        let adapted_prefix = format!("{}.", Self::unit_prefix(self.num_stages - 1, self.units_per_stage - 1));
        for spec in &mut specs {
            let adapted = spec.name.starts_with(&adapted_prefix) || spec.name.starts_with("head.");
            spec.partition = if adapted { Partition::Adapted } else { Partition::Shared };
        }
        specs
    }

    fn unit(&self, p: &str, x: &Tensor, params: &ParamSet, norm: &mut NormCtx<'_>) -> Result<Tensor> {
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let squeeze = global_avg_pool2d(x)?;
        let gate = linear(&squeeze, params.get(&format!("{p}.se.fc1.weight"))?, params.get(&format!("{p}.se.fc1.bias"))?)?
            .relu();
        let gate = linear(&gate, params.get(&format!("{p}.se.fc2.weight"))?, params.get(&format!("{p}.se.fc2.bias"))?)?
            .sigmoid()
            .reshape(&[b, c, 1, 1])?;
        let h = x.mul_bcast(&gate)?;
        let h = norm.apply(&format!("{p}.norm1"), &h, params)?.relu();
        let h = conv2d(&h, params.get(&format!("{p}.conv1.weight"))?, params.get(&format!("{p}.conv1.bias"))?, 1, 0)?;
        let h = norm.apply(&format!("{p}.norm2"), &h, params)?.relu();
        Ok(conv2d(&h, params.get(&format!("{p}.conv2.weight"))?, params.get(&format!("{p}.conv2.bias"))?, 1, 1)?)
    }

    pub(crate) fn forward(&self, params: &ParamSet, x: &Tensor, norm: &mut NormCtx<'_>) -> Result<Tensor> {
        let mut h = conv2d(x, params.get("stem.conv.weight")?, params.get("stem.conv.bias")?, 1, 1)?;
        h = norm.apply("stem.norm", &h, params)?.relu();
        for s in 0..self.num_stages {
            let mut feats = vec![h.clone()];
            for u in 0..self.units_per_stage {
                let inp = if feats.len() == 1 {
                    feats[0].clone()
                } else {
                    Tensor::concat(&feats, 1)?
                };
                feats.push(self.unit(&Self::unit_prefix(s, u), &inp, params, norm)?);
            }
            h = Tensor::concat(&feats, 1)?;
            if s + 1 < self.num_stages {
                let p = format!("transition{s}");
                h = norm.apply(&format!("{p}.norm"), &h, params)?.relu();
                h = conv2d(&h, params.get(&format!("{p}.conv.weight"))?, params.get(&format!("{p}.conv.bias"))?, 1, 0)?;
                h = avg_pool2d(&h)?;
            }
        }
        h = norm.apply("final.norm", &h, params)?.relu();
        let pooled = global_avg_pool2d(&h)?;
        Ok(linear(&pooled, params.get("head.weight")?, params.get("head.bias")?)?)
    }

    pub(crate) fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("kind".into(), "highend".into()),
            ("input".into(), format!("image:{}x{}x{}", self.in_channels, self.height, self.width)),
            ("classes".into(), self.num_classes.to_string()),
            ("stem_channels".into(), self.stem_channels.to_string()),
            ("growth_rate".into(), self.growth_rate.to_string()),
            ("units_per_stage".into(), self.units_per_stage.to_string()),
            ("num_stages".into(), self.num_stages.to_string()),
            ("compression".into(), self.compression.to_string()),
            ("se_reduction".into(), self.se_reduction.to_string()),
            ("bottleneck_factor".into(), self.bottleneck_factor.to_string()),
        ]
    }

    pub(crate) fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let input = kv
            .get("input")
            .ok_or_else(|| Error::Config("high-end architecture needs `input`".into()))?;
        let super::InputKind::Image { channels, height, width } = super::InputKind::parse(input)? else {
            return Err(Error::Config("high-end architecture needs an image input".into()));
        };
        let k = kv_usize(kv, "growth_rate", 64)?;
        let spec = Self {
            in_channels: channels,
            height,
            width,
            num_classes: kv_usize(kv, "classes", 5)?,
            stem_channels: kv_usize(kv, "stem_channels", 2 * k)?,
            growth_rate: k,
            units_per_stage: kv_usize(kv, "units_per_stage", 2)?,
            num_stages: kv_usize(kv, "num_stages", 2)?,
            compression: kv_f64(kv, "compression", 0.5)?,
            se_reduction: kv_usize(kv, "se_reduction", 16)?,
            bottleneck_factor: kv_usize(kv, "bottleneck_factor", 4)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Arch, InitScheme, DEFAULT_NORM_MOMENTUM};
    use super::*;

    fn tiny() -> HighEndSpec {
        HighEndSpec::new(1, 4, 4, 3, 8)
    }

    #[test]
    fn stage_output_adds_growth_per_unit() {
        let spec = tiny();
        let plan = spec.channel_plan();
        assert_eq!(plan[0], (vec![16, 24], 32));
        // transition halves 32 -> 16
        assert_eq!(plan[1], (vec![16, 24], 32));
    }

    #[test]
    fn tiny_forward_is_finite() {
        let arch = Arch::HighEnd(tiny());
        let p = arch.init_params(InitScheme::XavierExceptLast, 1).unwrap();
        let x = Tensor::constant(&[2, 1, 4, 4], (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let y = arch.forward(&p, &x, &arch.running_stats(DEFAULT_NORM_MOMENTUM)).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.is_finite());
    }

    #[test]
    fn adapted_partition_is_last_unit_and_head() {
        let arch = Arch::HighEnd(tiny());
        let p = arch.init_params(InitScheme::Xavier, 0).unwrap();
        let adapted = p.adapted_names();
        assert!(!adapted.is_empty());
        for name in &adapted {
            assert!(name.starts_with("stage1.unit1.") || name.starts_with("head."), "{name}");
        }
        let expected: Vec<String> = p
            .names()
            .filter(|n| n.starts_with("stage1.unit1.") || n.starts_with("head."))
            .map(String::from)
            .collect();
        assert_eq!(adapted, expected);
    }

    #[test]
    fn too_small_input_rejected() {
        assert!(HighEndSpec::new(1, 1, 1, 3, 8).validate().is_err());
    }
}
