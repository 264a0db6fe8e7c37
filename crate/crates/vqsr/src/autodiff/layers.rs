//! Declarative layer descriptions. A [`LayerSpec`] names a layer kind and its
//! hyperparameters; parameter tensors live outside (see `models::ParamStore`)
//! and are bound to a tape before calling [`LayerSpec::forward`].

use super::{PadMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: PadMode,
    },
    GroupNorm {
        channels: usize,
        groups: usize,
        eps: f64,
    },
    LeakyRelu {
        slope: f64,
    },
    NearestUpsample {
        factor: usize,
    },
    /// Downsampling convolution; stride must be >= 2.
    StridedDownsample {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Conv2d { kernel, stride, .. } => {
                if *kernel % 2 == 0 || *kernel == 0 {
                    return Err(Error::Config(format!("conv2d kernel {kernel} must be odd")));
                }
                if *stride == 0 {
                    return Err(Error::Config("conv2d stride must be >= 1".into()));
                }
            }
            LayerSpec::GroupNorm { channels, groups, eps } => {
                if *groups == 0 || channels % groups != 0 {
                    return Err(Error::Config(format!(
                        "group_norm: {groups} groups must divide {channels} channels"
                    )));
                }
                if *eps <= 0.0 {
                    return Err(Error::Config("group_norm eps must be positive".into()));
                }
            }
            LayerSpec::LeakyRelu { .. } => {}
            LayerSpec::NearestUpsample { factor } => {
                if *factor == 0 {
                    return Err(Error::Config("nearest_upsample factor must be >= 1".into()));
                }
            }
            LayerSpec::StridedDownsample { kernel, stride, .. } => {
                if *kernel % 2 == 0 || *kernel == 0 {
                    return Err(Error::Config(format!("downsample kernel {kernel} must be odd")));
                }
                if *stride < 2 {
                    return Err(Error::Config("strided_downsample stride must be >= 2".into()));
                }
            }
            LayerSpec::Linear { in_features, out_features } => {
                if *in_features == 0 || *out_features == 0 {
                    return Err(Error::Config("linear features must be nonzero".into()));
                }
            }
        }
        Ok(())
    }

    /// Shapes of the parameter tensors this layer owns, in binding order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, .. }
            | LayerSpec::StridedDownsample { in_ch, out_ch, kernel, .. } => {
                vec![vec![*out_ch, *in_ch, *kernel, *kernel], vec![*out_ch]]
            }
            LayerSpec::GroupNorm { channels, .. } => vec![vec![*channels], vec![*channels]],
            LayerSpec::LeakyRelu { .. } | LayerSpec::NearestUpsample { .. } => vec![],
            LayerSpec::Linear { in_features, out_features } => {
                vec![vec![*out_features, *in_features], vec![*out_features]]
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// Fresh parameters: conv and linear weights uniform in
    /// +-1/sqrt(fan_in), biases zero, norm gamma one and beta zero.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<Tensor<f32>> {
        match self {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, .. }
            | LayerSpec::StridedDownsample { in_ch, out_ch, kernel, .. } => {
                let fan_in = in_ch * kernel * kernel;
                let bound = 1.0 / (fan_in as f64).sqrt();
                vec![
                    Tensor::uniform(vec![*out_ch, *in_ch, *kernel, *kernel], -bound, bound, rng),
                    Tensor::zeros(vec![*out_ch]),
                ]
            }
            LayerSpec::GroupNorm { channels, .. } => vec![
                Tensor::full(vec![*channels], 1.0),
                Tensor::zeros(vec![*channels]),
            ],
            LayerSpec::LeakyRelu { .. } | LayerSpec::NearestUpsample { .. } => vec![],
            LayerSpec::Linear { in_features, out_features } => {
                let bound = 1.0 / (*in_features as f64).sqrt();
                vec![
                    Tensor::uniform(vec![*out_features, *in_features], -bound, bound, rng),
                    Tensor::zeros(vec![*out_features]),
                ]
            }
        }
    }

    /// Apply the layer on a tape. `params` must match `param_shapes` order.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, input: Var, params: &[Var]) -> Result<Var> {
        let want = self.param_shapes().len();
        if params.len() != want {
            return Err(Error::shape(
                format!("{self:?} params"),
                want,
                params.len(),
            ));
        }
        match self {
            LayerSpec::Conv2d { stride, pad, .. } => {
                tape.conv2d(input, params[0], Some(params[1]), *stride, *pad)
            }
            LayerSpec::GroupNorm { groups, eps, .. } => {
                tape.group_norm(input, params[0], params[1], *groups, *eps)
            }
            LayerSpec::LeakyRelu { slope } => Ok(tape.leaky_relu(input, F::from_f64(*slope))),
            LayerSpec::NearestUpsample { factor } => tape.nearest_upsample(input, *factor),
            LayerSpec::StridedDownsample { stride, .. } => {
                tape.conv2d(input, params[0], Some(params[1]), *stride, PadMode::Reflect)
            }
            LayerSpec::Linear { .. } => tape.linear(input, params[0], Some(params[1])),
        }
    }
}

/// Group count rule shared by all normalization layers: 32 groups, clamped
/// down to the channel count for narrow layers.
pub fn norm_groups(channels: usize) -> usize {
    channels.min(32)
}
