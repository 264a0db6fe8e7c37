//! Network definitions: the high-resolution encoder and decoder that carry
//! the codebook prior, the low-resolution encoder with its shortcut chain,
//! a U-Net discriminator with spectral weight normalization, and a frozen
//! random-filter feature extractor used for perceptual distances.
//!
//! Every network is a [`Net`]: an ordered list of [`LayerSpec`]s plus the
//! parameter tensors they own. Wiring (residual adds, skips, shortcuts) is
//! hand-written in each model's `forward`.

mod decoder;
mod discriminator;
mod encoder;
mod lr_encoder;
mod proxy;
mod sr;

pub use decoder::Decoder;
pub use discriminator::Discriminator;
pub use encoder::HrEncoder;
pub use lr_encoder::{LrEncoder, LrForward, ShallowScale};
pub use proxy::ProxyFeatures;
pub use sr::{sr_forward_graph, SrForward};

use crate::autodiff::{norm_groups, LayerSpec, PadMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use rand::Rng;
use sha2::{Digest, Sha256};

/// Architecture hyperparameters shared by all networks.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Width of the first encoder stage; later stages scale by `channel_multipliers`.
    pub base_channels: usize,
    /// One entry per downsampling stage; the decoder mirrors them. Three
    /// stages give the x8 latent reduction the prior is trained at.
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Code vector dimension.
    pub n_z: usize,
    /// Number of codebook entries.
    pub codebook_size: usize,
    /// Upscaling factor the restoration stage targets (power of two).
    pub sr_scale: usize,
    pub disc_base_channels: usize,
    pub disc_depth: usize,
    /// Width of the low-resolution encoder's deep feature extractor.
    pub lr_channels: usize,
    pub lr_blocks: usize,
    /// Width of the first frozen proxy feature stage.
    pub proxy_channels: usize,
    pub proxy_seed: u64,
    pub norm_eps: f64,
    pub leaky_slope: f64,
}

impl ModelConfig {
    /// Small widths for fast CPU runs; latent reduction stays x8.
    pub fn toy(n_z: usize, codebook_size: usize) -> Self {
        ModelConfig {
            in_channels: 3,
            base_channels: 8,
            channel_multipliers: vec![1, 2, 4],
            blocks_per_stage: 1,
            n_z,
            codebook_size,
            sr_scale: 4,
            disc_base_channels: 8,
            disc_depth: 2,
            lr_channels: 16,
            lr_blocks: 2,
            proxy_channels: 8,
            proxy_seed: 7777,
            norm_eps: 1e-6,
            leaky_slope: 0.2,
        }
    }

    /// Published-scale widths: 1024 codes of dimension 512, x8 latent
    /// reduction from 256x256 training patches.
    pub fn full_scale() -> Self {
        ModelConfig {
            in_channels: 3,
            base_channels: 64,
            channel_multipliers: vec![1, 2, 4],
            blocks_per_stage: 2,
            n_z: 512,
            codebook_size: 1024,
            sr_scale: 4,
            disc_base_channels: 64,
            disc_depth: 3,
            lr_channels: 128,
            lr_blocks: 4,
            proxy_channels: 16,
            proxy_seed: 7777,
            norm_eps: 1e-6,
            leaky_slope: 0.2,
        }
    }

    /// Channel widths of the encoder stages, outermost first.
    pub fn stage_channels(&self) -> Vec<usize> {
        self.channel_multipliers
            .iter()
            .map(|m| self.base_channels * m)
            .collect()
    }

    /// Spatial reduction of the codebook latent relative to HR input.
    pub fn latent_factor(&self) -> usize {
        1 << self.channel_multipliers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be nonzero".into()));
        }
        if self.channel_multipliers.is_empty() {
            return Err(Error::Config("at least one downsampling stage is required".into()));
        }
        if self.n_z == 0 || self.codebook_size == 0 {
            return Err(Error::Config("codebook dims must be nonzero".into()));
        }
        if !self.sr_scale.is_power_of_two() {
            return Err(Error::Config(format!(
                "sr_scale {} must be a power of two",
                self.sr_scale
            )));
        }
        if self.disc_depth == 0 {
            return Err(Error::Config("disc_depth must be >= 1".into()));
        }
        for &c in self
            .stage_channels()
            .iter()
            .chain([&self.lr_channels, &self.disc_base_channels])
        {
            let g = norm_groups(c);
            if c % g != 0 {
                return Err(Error::Config(format!(
                    "channel width {c} is not divisible by its {g} norm groups; \
                     widths above 32 must be multiples of 32"
                )));
            }
        }
        Ok(())
    }
}

/// One network: layer specs plus the parameter tensors they own, aligned by
/// spec index. Binding order (and therefore checkpoint naming) is the spec
/// order, which is fixed by construction.
pub struct Net {
    pub prefix: String,
    pub specs: Vec<LayerSpec>,
    pub params: Vec<Vec<Tensor<f32>>>,
}

/// Parameter slot suffixes: weight/gamma first, bias/beta second.
const SLOT_NAMES: [&str; 2] = ["a", "b"];

impl Net {
    pub fn new(prefix: impl Into<String>) -> Self {
        Net {
            prefix: prefix.into(),
            specs: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn add<R: Rng>(&mut self, spec: LayerSpec, rng: &mut R) -> Result<usize> {
        spec.validate()?;
        let params = spec.init_params(rng);
        self.specs.push(spec);
        self.params.push(params);
        Ok(self.specs.len() - 1)
    }

    /// Total learnable scalar count, from the stored tensors.
    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(|t| t.numel()).sum()
    }

    /// Total learnable scalar count, from the layer specs. Must equal
    /// `param_count`; divergence means config drift.
    pub fn spec_param_count(&self) -> usize {
        self.specs.iter().map(|s| s.param_count()).sum()
    }

    /// Bind all parameters onto a tape, trainable (leaf) or frozen
    /// (constant), casting to the tape precision.
    pub fn bind<F: Real>(&self, tape: &mut Tape<F>, trainable: bool) -> BoundNet {
        let vars = self
            .params
            .iter()
            .map(|ps| {
                ps.iter()
                    .map(|p| {
                        let t = p.cast::<F>();
                        if trainable {
                            tape.leaf(t)
                        } else {
                            tape.constant(t)
                        }
                    })
                    .collect()
            })
            .collect();
        BoundNet { vars }
    }

    /// Stable (name, tensor) walk used by checkpoints and hashing.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (i, ps) in self.params.iter().enumerate() {
            for (slot, p) in ps.iter().enumerate() {
                out.push((format!("{}.{}.{}", self.prefix, i, SLOT_NAMES[slot]), p));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        let prefix = self.prefix.clone();
        let mut out = Vec::new();
        for (i, ps) in self.params.iter_mut().enumerate() {
            for (slot, p) in ps.iter_mut().enumerate() {
                out.push((format!("{prefix}.{i}.{}", SLOT_NAMES[slot]), p));
            }
        }
        out
    }

    /// SHA-256 over parameter bytes in binding order; used to assert that
    /// frozen networks do not move during training.
    pub fn hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, t) in self.named_tensors() {
            hasher.update(name.as_bytes());
            for v in t.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

/// Tape bindings for one [`Net`], aligned with its spec indices.
pub struct BoundNet {
    vars: Vec<Vec<Var>>,
}

impl BoundNet {
    pub fn layer(&self, idx: usize) -> &[Var] {
        &self.vars[idx]
    }

    /// Flat list in binding order, matching `Net::named_tensors` order.
    pub fn flat(&self) -> Vec<Var> {
        self.vars.iter().flatten().copied().collect()
    }

    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, net: &Net, idx: usize, x: Var) -> Result<Var> {
        net.specs[idx].forward(tape, x, &self.vars[idx])
    }
}

/// Pre-activation residual block: GN, lrelu, conv, GN, lrelu, conv, plus the
/// skip. Channel count is preserved so the skip needs no projection.
#[derive(Clone, Copy, Debug)]
pub struct ResBlockIdx {
    gn1: usize,
    conv1: usize,
    gn2: usize,
    conv2: usize,
}

pub(crate) fn add_res_block<R: Rng>(
    net: &mut Net,
    ch: usize,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<ResBlockIdx> {
    let gn = |c: usize| LayerSpec::GroupNorm {
        channels: c,
        groups: norm_groups(c),
        eps: cfg.norm_eps,
    };
    let conv = |ci: usize, co: usize| LayerSpec::Conv2d {
        in_ch: ci,
        out_ch: co,
        kernel: 3,
        stride: 1,
        pad: PadMode::Reflect,
    };
    Ok(ResBlockIdx {
        gn1: net.add(gn(ch), rng)?,
        conv1: net.add(conv(ch, ch), rng)?,
        gn2: net.add(gn(ch), rng)?,
        conv2: net.add(conv(ch, ch), rng)?,
    })
}

pub(crate) fn res_block_forward<F: Real>(
    tape: &mut Tape<F>,
    net: &Net,
    bound: &BoundNet,
    idx: &ResBlockIdx,
    slope: f64,
    x: Var,
) -> Result<Var> {
    let h = bound.apply(tape, net, idx.gn1, x)?;
    let h = tape.leaky_relu(h, F::from_f64(slope));
    let h = bound.apply(tape, net, idx.conv1, h)?;
    let h = bound.apply(tape, net, idx.gn2, h)?;
    let h = tape.leaky_relu(h, F::from_f64(slope));
    let h = bound.apply(tape, net, idx.conv2, h)?;
    tape.add(x, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_validation_catches_bad_widths() {
        let mut cfg = ModelConfig::toy(8, 16);
        cfg.validate().unwrap();
        cfg.base_channels = 12; // stage width 48: >32 and not a multiple of 32
        assert!(cfg.validate().is_err());
        let mut cfg2 = ModelConfig::toy(8, 16);
        cfg2.sr_scale = 3;
        assert!(cfg2.validate().is_err());
    }

    #[test]
    fn full_scale_preset_is_valid() {
        let cfg = ModelConfig::full_scale();
        cfg.validate().unwrap();
        assert_eq!(cfg.codebook_size, 1024);
        assert_eq!(cfg.n_z, 512);
        assert_eq!(cfg.latent_factor(), 8);
    }

    #[test]
    fn net_param_count_matches_specs_and_hash_is_stable() {
        let cfg = ModelConfig::toy(8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Net::new("t");
        add_res_block(&mut net, 8, &cfg, &mut rng).unwrap();
        assert_eq!(net.param_count(), net.spec_param_count());
        let h1 = net.hash();
        let h2 = net.hash();
        assert_eq!(h1, h2);
        net.params[1][0].data_mut()[0] += 1.0;
        assert_ne!(net.hash(), h1, "hash must react to parameter changes");
    }

    #[test]
    fn res_block_is_identity_plus_learned_residual_at_zero_weights() {
        // Zeroing both conv weights and biases and the second GN's gamma
        // leaves only the skip: output equals input.
        let cfg = ModelConfig::toy(8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Net::new("t");
        let rb = add_res_block(&mut net, 4, &cfg, &mut rng).unwrap();
        for ps in net.params.iter_mut() {
            for p in ps.iter_mut() {
                for v in p.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut tape = Tape::<f32>::new();
        let bound = net.bind(&mut tape, false);
        let x = tape.constant(Tensor::uniform(
            vec![1, 4, 5, 5],
            -1.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(3),
        ));
        let y = res_block_forward(&mut tape, &net, &bound, &rb, 0.2, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }
}
