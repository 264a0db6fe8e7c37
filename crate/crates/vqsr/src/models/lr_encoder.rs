//! Low-resolution encoder for the restoration stage. It maps a degraded
//! low-resolution input to the codebook latent grid (matching the frozen
//! prior's resolution), and also emits one shortcut feature per decoder
//! stage so fine detail can bypass the quantization bottleneck.

use super::{add_res_block, res_block_forward, BoundNet, ModelConfig, Net, ResBlockIdx};
use crate::autodiff::{LayerSpec, PadMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use rand::Rng;

/// How the head bridges the gap between the LR input grid and the latent
/// grid. With an x8 latent reduction and x4 upscaling, the LR input is twice
/// the latent size, so one extra halving is needed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShallowScale {
    /// LR grid is larger than the latent grid: this many strided halvings.
    Down(usize),
    /// LR grid already matches the latent grid.
    None,
    /// LR grid is smaller than the latent grid: this many x2 upsamplings.
    Up(usize),
}

impl ShallowScale {
    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        let f = cfg.latent_factor();
        let s = cfg.sr_scale;
        Ok(if f == s {
            ShallowScale::None
        } else if f > s {
            ShallowScale::Down((f / s).trailing_zeros() as usize)
        } else {
            ShallowScale::Up((s / f).trailing_zeros() as usize)
        })
    }

    /// Spatial size of the latent grid for a given LR input size.
    pub fn latent_size(&self, lr: usize) -> usize {
        match *self {
            ShallowScale::Down(k) => lr >> k,
            ShallowScale::None => lr,
            ShallowScale::Up(k) => lr << k,
        }
    }
}

/// Outputs of one LR-encoder forward pass.
pub struct LrForward {
    /// Latent features on the codebook grid, before quantization.
    pub zhat_l: Var,
    /// Shortcut features, one per decoder stage, deepest first.
    pub bundle: Vec<Var>,
}

pub struct LrEncoder {
    pub net: Net,
    head: usize,
    shallow: ShallowScale,
    shallow_convs: Vec<usize>,
    blocks: Vec<ResBlockIdx>,
    fuse: usize,
    to_latent: usize,
    /// Shortcut chain, deepest first: nearest x2 then conv, one per stage.
    up_convs: Vec<usize>,
    slope: f64,
}

impl LrEncoder {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let chans = cfg.stage_channels();
        let mut net = Net::new("lrenc");
        let conv = |ci: usize, co: usize| LayerSpec::Conv2d {
            in_ch: ci,
            out_ch: co,
            kernel: 3,
            stride: 1,
            pad: PadMode::Reflect,
        };

        let head = net.add(conv(cfg.in_channels, cfg.lr_channels), rng)?;
        let shallow = ShallowScale::from_config(cfg)?;
        let mut shallow_convs = Vec::new();
        match shallow {
            ShallowScale::Down(k) => {
                for _ in 0..k {
                    shallow_convs.push(net.add(
                        LayerSpec::StridedDownsample {
                            in_ch: cfg.lr_channels,
                            out_ch: cfg.lr_channels,
                            kernel: 3,
                            stride: 2,
                        },
                        rng,
                    )?);
                }
            }
            ShallowScale::Up(k) => {
                for _ in 0..k {
                    shallow_convs.push(net.add(conv(cfg.lr_channels, cfg.lr_channels), rng)?);
                }
            }
            ShallowScale::None => {}
        }

        let mut blocks = Vec::new();
        for _ in 0..cfg.lr_blocks {
            blocks.push(add_res_block(&mut net, cfg.lr_channels, cfg, rng)?);
        }
        let fuse = net.add(conv(cfg.lr_channels, cfg.lr_channels), rng)?;
        let to_latent = net.add(conv(cfg.lr_channels, cfg.n_z), rng)?;

        // Shortcut chain mirrors the decoder's stage plan: deepest first,
        // doubling resolution each hop.
        let mut up_convs = Vec::new();
        let mut cur = cfg.n_z;
        for i in (0..chans.len()).rev() {
            up_convs.push(net.add(conv(cur, chans[i]), rng)?);
            cur = chans[i];
        }

        Ok(LrEncoder {
            net,
            head,
            shallow,
            shallow_convs,
            blocks,
            fuse,
            to_latent,
            up_convs,
            slope: cfg.leaky_slope,
        })
    }

    pub fn shallow_scale(&self) -> ShallowScale {
        self.shallow
    }

    /// Spec indices of the shortcut-chain convolutions, deepest first.
    pub fn shortcut_spec_indices(&self) -> &[usize] {
        &self.up_convs
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, bound: &BoundNet, x: Var) -> Result<Var> {
        let fwd = self.forward_with_bundle(tape, bound, x)?;
        Ok(fwd.zhat_l)
    }

    pub fn forward_with_bundle<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundNet,
        x: Var,
    ) -> Result<LrForward> {
        let mut h = bound.apply(tape, &self.net, self.head, x)?;
        for &c in &self.shallow_convs {
            if matches!(self.shallow, ShallowScale::Up(_)) {
                h = tape.nearest_upsample(h, 2)?;
            }
            h = bound.apply(tape, &self.net, c, h)?;
            h = tape.leaky_relu(h, F::from_f64(self.slope));
        }
        // Deep trunk with a long skip so early training passes the shallow
        // features through even while the blocks are near zero.
        let shallow_out = h;
        let mut t = h;
        for rb in &self.blocks {
            t = res_block_forward(tape, &self.net, bound, rb, self.slope, t)?;
        }
        t = bound.apply(tape, &self.net, self.fuse, t)?;
        h = tape.add(shallow_out, t)?;
        let zhat_l = bound.apply(tape, &self.net, self.to_latent, h)?;

        let mut bundle = Vec::new();
        let mut u = zhat_l;
        for &c in &self.up_convs {
            u = tape.nearest_upsample(u, 2)?;
            u = bound.apply(tape, &self.net, c, u)?;
            u = tape.leaky_relu(u, F::from_f64(self.slope));
            bundle.push(u);
        }
        Ok(LrForward { zhat_l, bundle })
    }

    /// Validate that an LR input's spatial size maps onto a whole latent grid.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = match shape {
            [_, _, h, w] => (*h, *w),
            other => {
                return Err(Error::shape("LR input", "rank-4 tensor", format!("{other:?}")))
            }
        };
        if let ShallowScale::Down(k) = self.shallow {
            let div = 1usize << k;
            if h % div != 0 || w % div != 0 {
                return Err(Error::Input(format!(
                    "LR input {h}x{w} is not divisible by the head's downscale {div}"
                )));
            }
        }
        Ok(())
    }

    /// Convenience forward for inference paths: fresh tape, frozen weights.
    pub fn encode(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(img.shape())?;
        let mut tape = Tape::<f32>::new();
        let bound = self.net.bind(&mut tape, false);
        let x = tape.constant(img.clone());
        let z = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(z).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shallow_scale_covers_all_regimes() {
        let mut cfg = ModelConfig::toy(8, 16); // latent factor 8
        cfg.sr_scale = 4;
        assert_eq!(ShallowScale::from_config(&cfg).unwrap(), ShallowScale::Down(1));
        cfg.sr_scale = 2;
        assert_eq!(ShallowScale::from_config(&cfg).unwrap(), ShallowScale::Down(2));
        cfg.sr_scale = 8;
        assert_eq!(ShallowScale::from_config(&cfg).unwrap(), ShallowScale::None);
        cfg.sr_scale = 16;
        assert_eq!(ShallowScale::from_config(&cfg).unwrap(), ShallowScale::Up(1));
        assert_eq!(ShallowScale::Down(1).latent_size(8), 4);
        assert_eq!(ShallowScale::Up(1).latent_size(2), 4);
    }

    #[test]
    fn x4_forward_produces_latent_grid_and_stage_bundle() {
        let cfg = ModelConfig::toy(8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = LrEncoder::new(&cfg, &mut rng).unwrap();
        let mut tape = Tape::<f32>::new();
        let bound = enc.net.bind(&mut tape, false);
        let x = tape.constant(Tensor::uniform(vec![2, 3, 8, 8], 0.0, 1.0, &mut rng));
        let fwd = enc.forward_with_bundle(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.shape(fwd.zhat_l), &[2, 8, 4, 4]);
        let bundle_shapes: Vec<_> = fwd.bundle.iter().map(|&v| tape.shape(v).to_vec()).collect();
        assert_eq!(
            bundle_shapes,
            vec![vec![2, 32, 8, 8], vec![2, 16, 16, 16], vec![2, 8, 32, 32]]
        );
    }

    #[test]
    fn x2_forward_downscales_twice() {
        let mut cfg = ModelConfig::toy(8, 16);
        cfg.sr_scale = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = LrEncoder::new(&cfg, &mut rng).unwrap();
        let z = enc
            .encode(&Tensor::uniform(vec![1, 3, 16, 16], 0.0, 1.0, &mut rng))
            .unwrap();
        assert_eq!(z.shape(), &[1, 8, 4, 4]);
    }

    #[test]
    fn x16_forward_upscales_the_head() {
        let mut cfg = ModelConfig::toy(8, 16);
        cfg.sr_scale = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = LrEncoder::new(&cfg, &mut rng).unwrap();
        let z = enc
            .encode(&Tensor::uniform(vec![1, 3, 4, 4], 0.0, 1.0, &mut rng))
            .unwrap();
        assert_eq!(z.shape(), &[1, 8, 8, 8]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let cfg = ModelConfig::toy(8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = LrEncoder::new(&cfg, &mut rng).unwrap();
        assert!(enc
            .encode(&Tensor::zeros(vec![1, 3, 9, 9]))
            .is_err());
    }

    #[test]
    fn lr_encoder_param_count_matches_specs() {
        let cfg = ModelConfig::toy(8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = LrEncoder::new(&cfg, &mut rng).unwrap();
        assert_eq!(enc.net.param_count(), enc.net.spec_param_count());
    }
}
