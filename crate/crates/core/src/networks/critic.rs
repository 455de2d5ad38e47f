//! The label-free critic: a stack of dilated 1-D convolutions with dense
//! connectivity, followed by two fully connected layers that map to a
//! scalar loss.
//!
//! Layer `i` has dilation `2^i` and sees the concatenation of the raw input
//! and every earlier conv output, so its input channel count is
//! `1 + kernels_per_layer · i`. Zero padding keeps every conv output at the
//! input length `L`; with kernel size 2 the total pad equals the dilation,
//! and for layer 0 the single pad zero goes on the right. The FC head reads
//! the raw input plus all conv outputs (`1 + 5·8 = 41` channels), and its
//! first layer is square: `41·L → 41·L`.

use crate::autodiff::functional::{conv1d, linear, Conv1dAttrs};
use crate::autodiff::{grad, Tensor};
use crate::params::{ParamSet, Partition};
use crate::{Error, Result};

use super::{conforms, init_from_specs, InitScheme, ParamSpec};

pub const CRITIC_LAYERS: usize = 5;
pub const CRITIC_KERNEL: usize = 2;
pub const CRITIC_KERNELS_PER_LAYER: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CriticSpec {
    /// Length `L` of the flat feature vector.
    pub input_len: usize,
    pub num_conv_layers: usize,
    pub kernel_size: usize,
    pub kernels_per_layer: usize,
}

/// Shapes realized by a critic for a given input length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CriticShapes {
    pub conv_in_channels: Vec<usize>,
    pub conv_out_lens: Vec<usize>,
    pub fc_in_dim: usize,
    pub fc_hidden_dim: usize,
}

/// Zero padding `(left, right)` that keeps length for conv layer `layer`
/// of the standard 5-layer, kernel-2 critic.
pub fn pad_for_layer(layer: usize) -> Result<(usize, usize)> {
    if layer >= CRITIC_LAYERS {
        return Err(Error::Architecture(format!(
            "critic layer index {layer} out of range 0..{CRITIC_LAYERS}"
        )));
    }
    Ok(length_preserving_pad(1 << layer, CRITIC_KERNEL))
}

fn length_preserving_pad(dilation: usize, kernel: usize) -> (usize, usize) {
    let total = dilation * (kernel - 1);
    let left = total / 2;
    (left, total - left)
}

impl CriticSpec {
    pub fn new(input_len: usize) -> Self {
        Self {
            input_len,
            num_conv_layers: CRITIC_LAYERS,
            kernel_size: CRITIC_KERNEL,
            kernels_per_layer: CRITIC_KERNELS_PER_LAYER,
        }
    }

    /// Same topology with a different number of kernels per conv layer.
    pub fn with_width(input_len: usize, kernels_per_layer: usize) -> Self {
        Self {
            kernels_per_layer,
            ..Self::new(input_len)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.num_conv_layers == 0 || self.kernel_size < 2 || self.kernels_per_layer == 0 {
            return Err(Error::Architecture(format!("degenerate critic spec {self:?}")));
        }
        Ok(())
    }

    pub fn dilation(&self, layer: usize) -> usize {
        1 << layer
    }

    pub fn conv_in_channels(&self, layer: usize) -> usize {
        1 + self.kernels_per_layer * layer
    }

    /// Channels entering the FC head: the raw input plus every conv output.
    pub fn fc_channels(&self) -> usize {
        1 + self.kernels_per_layer * self.num_conv_layers
    }

    pub fn fc_in_dim(&self) -> usize {
        self.fc_channels() * self.input_len
    }

    pub fn pad(&self, layer: usize) -> (usize, usize) {
        length_preserving_pad(self.dilation(layer), self.kernel_size)
    }

    fn attrs(&self, layer: usize) -> Conv1dAttrs {
        let (pad_left, pad_right) = self.pad(layer);
        Conv1dAttrs {
            dilation: self.dilation(layer),
            stride: 1,
            pad_left,
            pad_right,
        }
    }

    pub(crate) fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let k = self.kernels_per_layer;
        for i in 0..self.num_conv_layers {
            let cin = self.conv_in_channels(i);
            let fan_in = cin * self.kernel_size;
            specs.push(ParamSpec::weight(
                format!("conv{i}.weight"),
                vec![k, cin, self.kernel_size],
                fan_in,
                k * self.kernel_size,
            ));
            specs.push(ParamSpec::bias(format!("conv{i}.bias"), k, fan_in));
        }
        let d = self.fc_in_dim();
        specs.push(ParamSpec::weight("fc1.weight".into(), vec![d, d], d, d));
        specs.push(ParamSpec::bias("fc1.bias".into(), d, d));
        specs.push(ParamSpec::weight("fc2.weight".into(), vec![d, 1], d, 1));
        specs.push(ParamSpec::bias("fc2.bias".into(), 1, d));
        for s in &mut specs {
            s.partition = Partition::Shared;
        }
        specs
    }

    pub fn num_params(&self) -> usize {
        self.param_specs().iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }

    /// Fan-in uniform initialization for every layer.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        self.validate()?;
        init_from_specs(&self.param_specs(), InitScheme::FaninUniform, seed)
    }

    pub fn check_params(&self, w: &ParamSet) -> Result<()> {
        conforms(w, &self.param_specs(), "critic")
    }

    /// Run the conv stack on a zero input and report the realized shapes.
    pub fn shapes(&self) -> Result<CriticShapes> {
        self.validate()?;
        let mut feats = vec![Tensor::zeros(&[1, 1, self.input_len])];
        let mut conv_in_channels = Vec::new();
        let mut conv_out_lens = Vec::new();
        for i in 0..self.num_conv_layers {
            let inp = Tensor::concat(&feats, 1)?;
            conv_in_channels.push(inp.shape()[1]);
            let cin = inp.shape()[1];
            let w = Tensor::zeros(&[self.kernels_per_layer, cin, self.kernel_size]);
            let b = Tensor::zeros(&[self.kernels_per_layer]);
            let y = conv1d(&inp, &w, &b, self.attrs(i))?;
            conv_out_lens.push(y.shape()[2]);
            feats.push(y);
        }
        let head_in = Tensor::concat(&feats, 1)?;
        let fc_in_dim = head_in.numel();
        Ok(CriticShapes {
            conv_in_channels,
            conv_out_lens,
            fc_in_dim,
            fc_hidden_dim: fc_in_dim,
        })
    }
}

/// Scalar critic value `C(F, W)` for a feature row `F` of shape `(1, L)`.
pub fn critic_forward(spec: &CriticSpec, w: &ParamSet, features: &Tensor) -> Result<Tensor> {
    if features.shape() != [1, spec.input_len] {
        return Err(Error::Architecture(format!(
            "critic built for feature length {} got features of shape {:?}",
            spec.input_len,
            features.shape()
        )));
    }
    spec.check_params(w)?;
    let mut feats = vec![features.reshape(&[1, 1, spec.input_len])?];
    for i in 0..spec.num_conv_layers {
        let inp = if feats.len() == 1 {
            feats[0].clone()
        } else {
            Tensor::concat(&feats, 1)?
        };
        let y = conv1d(
            &inp,
            w.get(&format!("conv{i}.weight"))?,
            w.get(&format!("conv{i}.bias"))?,
            spec.attrs(i),
        )?
        .relu();
        feats.push(y);
    }
    let head_in = Tensor::concat(&feats, 1)?.reshape(&[1, spec.fc_in_dim()])?;
    let hidden = linear(&head_in, w.get("fc1.weight")?, w.get("fc1.bias")?)?.relu();
    let out = linear(&hidden, w.get("fc2.weight")?, w.get("fc2.bias")?)?;
    Ok(out.reshape(&[])?)
}

/// `‖∂C/∂F‖₂` at the given features.
pub fn critic_input_gradient_norm(spec: &CriticSpec, w: &ParamSet, features: &Tensor) -> Result<f64> {
    let f = features.to_var();
    let c = critic_forward(spec, &w.detached(), &f)?;
    let g = grad(&c, &[f], false)?.remove(0);
    Ok(g.data().iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Bytes taken by the square first FC weight when the critic input is
/// dominated by `base_param_count` flattened parameters:
/// `(base_param_count · 41)² · bytes_per_value`.
pub fn estimate_critic_memory(base_param_count: u64, bytes_per_value: u64) -> Result<u128> {
    if base_param_count == 0 || bytes_per_value == 0 {
        return Err(Error::Config(format!(
            "memory estimate needs positive inputs, got params={base_param_count} bytes={bytes_per_value}"
        )));
    }
    let channels = CriticSpec::new(1).fc_channels() as u128;
    let side = base_param_count as u128 * channels;
    side.checked_mul(side)
        .and_then(|sq| sq.checked_mul(bytes_per_value as u128))
        .ok_or_else(|| Error::Config("memory estimate overflows u128".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn padding_table() {
        let table: Vec<_> = (0..5).map(|i| pad_for_layer(i).unwrap()).collect();
        assert_eq!(table, vec![(0, 1), (1, 1), (2, 2), (4, 4), (8, 8)]);
        assert!(pad_for_layer(5).is_err());
    }

    #[test]
    fn channel_counts_and_fc_dim() {
        let spec = CriticSpec::new(100);
        for i in 0..5 {
            assert_eq!(spec.conv_in_channels(i), 1 + 8 * i);
        }
        assert_eq!(spec.fc_in_dim(), 4100);
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes.conv_in_channels, vec![1, 9, 17, 25, 33]);
        assert_eq!(shapes.conv_out_lens, vec![100; 5]);
        assert_eq!(shapes.fc_in_dim, 4100);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let spec = CriticSpec::new(6);
        let w = spec.init_params(1).unwrap().map_tensors(|t| Tensor::zeros(t.shape()));
        let f = Tensor::constant(&[1, 6], vec![0.3, -2.0, 1.0, 4.0, 0.0, 7.0]).unwrap();
        assert_eq!(critic_forward(&spec, &w, &f).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_rejected() {
        let spec = CriticSpec::new(6);
        let w = spec.init_params(1).unwrap();
        assert!(critic_forward(&spec, &w, &Tensor::zeros(&[1, 5])).is_err());
        let other = CriticSpec::new(5).init_params(1).unwrap();
        assert!(critic_forward(&spec, &other, &Tensor::zeros(&[1, 6])).is_err());
    }

    #[test]
    fn memory_estimate_values() {
        assert_eq!(estimate_critic_memory(1, 4).unwrap(), 6724);
        assert_eq!(estimate_critic_memory(100, 4).unwrap(), 67_240_000);
        let big = estimate_critic_memory(70_000, 4).unwrap() as f64;
        assert!((big / 32e12 - 1.0).abs() < 0.05);
        assert!(estimate_critic_memory(0, 4).is_err());
    }

    #[test]
    fn input_gradient_is_nonzero_with_skip_head() {
        let spec = CriticSpec::new(12);
        for seed in 0..5 {
            let w = spec.init_params(seed).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100 + seed);
            let f: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
            let f = Tensor::constant(&[1, 12], f).unwrap();
            assert!(critic_input_gradient_norm(&spec, &w, &f).unwrap() > 0.0);
        }
    }
}
