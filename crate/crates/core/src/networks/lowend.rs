use std::collections::BTreeMap;

use crate::autodiff::functional::{conv2d, linear, max_pool2d};
use crate::autodiff::Tensor;
use crate::params::ParamSet;
use crate::{Error, Result};

use super::{kv_usize, NormCtx, ParamSpec};

/// Per-sample input layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    Image { channels: usize, height: usize, width: usize },
    Vector { dim: usize },
}

impl InputKind {
    pub fn sample_shape(&self) -> Vec<usize> {
        match *self {
            InputKind::Image { channels, height, width } => vec![channels, height, width],
            InputKind::Vector { dim } => vec![dim],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("input must be `vector:D` or `image:CxHxW`, got `{s}`"));
        if let Some(d) = s.strip_prefix("vector:") {
            return Ok(InputKind::Vector {
                dim: d.parse().map_err(|_| bad())?,
            });
        }
        if let Some(rest) = s.strip_prefix("image:") {
            let dims: Vec<usize> = rest
                .split('x')
                .map(|p| p.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            if let [channels, height, width] = dims[..] {
                return Ok(InputKind::Image { channels, height, width });
            }
        }
        Err(bad())
    }

    pub fn render(&self) -> String {
        match *self {
            InputKind::Image { channels, height, width } => format!("image:{channels}x{height}x{width}"),
            InputKind::Vector { dim } => format!("vector:{dim}"),
        }
    }
}

/// Low-end base classifier: `blocks` × (conv3×3 → norm → ReLU → 2×2 max-pool)
/// plus a linear head for image inputs; `blocks` × (linear → norm → ReLU)
/// plus a linear head for vector inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LowEndSpec {
    pub input: InputKind,
    pub num_classes: usize,
    pub blocks: usize,
    /// Filters per conv block, or hidden units per dense block.
    pub width: usize,
}

impl LowEndSpec {
    /// Desk-scale conv model: 3 blocks of 8 filters.
    pub fn conv(channels: usize, height: usize, width: usize, num_classes: usize) -> Self {
        Self {
            input: InputKind::Image { channels, height, width },
            num_classes,
            blocks: 3,
            width: 8,
        }
    }

    /// The 4-block, 48-filter VGG-style model on 84×84 RGB inputs.
    pub fn vgg(num_classes: usize) -> Self {
        Self {
            input: InputKind::Image {
                channels: 3,
                height: 84,
                width: 84,
            },
            num_classes,
            blocks: 4,
            width: 48,
        }
    }

    pub fn mlp(dim: usize, num_classes: usize, blocks: usize, width: usize) -> Self {
        Self {
            input: InputKind::Vector { dim },
            num_classes,
            blocks,
            width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || (self.blocks > 0 && self.width == 0) {
            return Err(Error::Architecture(format!("degenerate low-end spec {self:?}")));
        }
        if let InputKind::Image { channels, height, width } = self.input {
            if channels == 0 || height == 0 || width == 0 {
                return Err(Error::Architecture(format!("empty image input {:?}", self.input)));
            }
        }
        Ok(())
    }

    /// Spatial size after each pooling stage; pooling stops once a side
    /// would drop below 1.
    fn spatial_after_blocks(&self, height: usize, width: usize) -> Vec<(usize, usize, bool)> {
        let (mut h, mut w) = (height, width);
        (0..self.blocks)
            .map(|_| {
                let pool = h >= 2 && w >= 2;
                if pool {
                    h /= 2;
                    w /= 2;
                }
                (h, w, pool)
            })
            .collect()
    }

    fn head_in(&self) -> usize {
        match self.input {
            InputKind::Vector { dim } => {
                if self.blocks == 0 {
                    dim
                } else {
                    self.width
                }
            }
            InputKind::Image { channels, height, width } => {
                let (h, w) = self
                    .spatial_after_blocks(height, width)
                    .last()
                    .map(|&(h, w, _)| (h, w))
                    .unwrap_or((height, width));
                let c = if self.blocks == 0 { channels } else { self.width };
                c * h * w
            }
        }
    }

    pub(crate) fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut cin = match self.input {
            InputKind::Vector { dim } => dim,
            InputKind::Image { channels, .. } => channels,
        };
        for i in 0..self.blocks {
            let p = format!("block{i}");
            match self.input {
                InputKind::Vector { .. } => {
                    specs.push(ParamSpec::weight(format!("{p}.linear.weight"), vec![cin, self.width], cin, self.width));
                    specs.push(ParamSpec::bias(format!("{p}.linear.bias"), self.width, cin));
                }
                InputKind::Image { .. } => {
                    specs.push(ParamSpec::weight(
                        format!("{p}.conv.weight"),
                        vec![self.width, cin, 3, 3],
                        cin * 9,
                        self.width * 9,
                    ));
                    specs.push(ParamSpec::bias(format!("{p}.conv.bias"), self.width, cin * 9));
                }
            }
            specs.extend(ParamSpec::norm(&format!("{p}.norm"), self.width));
            cin = self.width;
        }
        let d = self.head_in();
        let mut w = ParamSpec::weight("head.weight".into(), vec![d, self.num_classes], d, self.num_classes);
        let mut b = ParamSpec::bias("head.bias".into(), self.num_classes, d);
        w.last_linear = true;
        b.last_linear = true;
        specs.push(w);
        specs.push(b);
        specs
    }

    pub(crate) fn forward(&self, params: &ParamSet, x: &Tensor, norm: &mut NormCtx<'_>) -> Result<Tensor> {
        let mut h = x.clone();
        match self.input {
            InputKind::Vector { .. } => {
                for i in 0..self.blocks {
                    let p = format!("block{i}");
                    h = linear(
                        &h,
                        params.get(&format!("{p}.linear.weight"))?,
                        params.get(&format!("{p}.linear.bias"))?,
                    )?;
                    h = norm.apply(&format!("{p}.norm"), &h, params)?.relu();
                }
            }
            InputKind::Image { height, width, .. } => {
                let pools = self.spatial_after_blocks(height, width);
                for (i, &(_, _, pool)) in pools.iter().enumerate() {
                    let p = format!("block{i}");
                    h = conv2d(
                        &h,
                        params.get(&format!("{p}.conv.weight"))?,
                        params.get(&format!("{p}.conv.bias"))?,
                        1,
                        1,
                    )?;
                    h = norm.apply(&format!("{p}.norm"), &h, params)?.relu();
                    if pool {
                        h = max_pool2d(&h)?;
                    }
                }
                h = h.flatten()?;
            }
        }
        Ok(linear(&h, params.get("head.weight")?, params.get("head.bias")?)?)
    }

    pub(crate) fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("kind".into(), "lowend".into()),
            ("input".into(), self.input.render()),
            ("classes".into(), self.num_classes.to_string()),
            ("blocks".into(), self.blocks.to_string()),
            ("width".into(), self.width.to_string()),
        ]
    }

    pub(crate) fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let input = InputKind::parse(
            kv.get("input")
                .ok_or_else(|| Error::Config("low-end architecture needs `input`".into()))?,
        )?;
        let spec = Self {
            input,
            num_classes: kv_usize(kv, "classes", 5)?,
            blocks: kv_usize(kv, "blocks", 3)?,
            width: kv_usize(kv, "width", 8)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Arch, InitScheme, DEFAULT_NORM_MOMENTUM};
    use super::*;

    #[test]
    fn conv_model_shapes() {
        let arch = Arch::LowEnd(LowEndSpec::conv(1, 14, 14, 5));
        let p = arch.init_params(InitScheme::FaninUniform, 0).unwrap();
        let x = Tensor::zeros(&[2, 1, 14, 14]);
        let y = arch.forward(&p, &x, &arch.running_stats(DEFAULT_NORM_MOMENTUM)).unwrap();
        assert_eq!(y.shape(), &[2, 5]);
        // 14 -> 7 -> 3 -> 1
        assert_eq!(p.get("head.weight").unwrap().shape(), &[8, 5]);
    }

    #[test]
    fn wrong_input_rejected() {
        let arch = Arch::LowEnd(LowEndSpec::mlp(4, 3, 1, 5));
        let p = arch.init_params(InitScheme::FaninUniform, 0).unwrap();
        let stats = arch.running_stats(DEFAULT_NORM_MOMENTUM);
        assert!(arch.forward(&p, &Tensor::zeros(&[2, 5]), &stats).is_err());
        assert!(arch.forward(&p, &Tensor::zeros(&[2, 4]), &stats).is_ok());
    }

    #[test]
    fn input_kind_round_trip() {
        for s in ["vector:16", "image:1x14x14"] {
            assert_eq!(InputKind::parse(s).unwrap().render(), s);
        }
        assert!(InputKind::parse("image:3x4").is_err());
    }
}
