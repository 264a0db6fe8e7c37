//! Decoder: reconstructs an image from a (quantized) latent map, upsampling
//! x2 per stage with nearest-neighbor resize followed by a convolution.
//! During restoration it optionally receives one shortcut feature per stage,
//! added to the stage output, which lets gradients reach the LR encoder
//! directly through the otherwise frozen weights.

use super::{add_res_block, res_block_forward, BoundNet, ModelConfig, Net, ResBlockIdx};
use crate::autodiff::{norm_groups, LayerSpec, PadMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use rand::Rng;

struct Stage {
    up_conv: usize,
    blocks: Vec<ResBlockIdx>,
}

pub struct Decoder {
    pub net: Net,
    from_latent: usize,
    neck: ResBlockIdx,
    stages: Vec<Stage>,
    out_norm: usize,
    out_conv: usize,
    slope: f64,
    /// Channel width each stage produces, deepest stage first; the shortcut
    /// bundle must match these.
    shortcut_channels: Vec<usize>,
}

impl Decoder {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let chans = cfg.stage_channels();
        let last = *chans.last().expect("validated non-empty");
        let mut net = Net::new("dec");
        let conv = |ci: usize, co: usize| LayerSpec::Conv2d {
            in_ch: ci,
            out_ch: co,
            kernel: 3,
            stride: 1,
            pad: PadMode::Reflect,
        };

        let from_latent = net.add(conv(cfg.n_z, last), rng)?;
        let neck = add_res_block(&mut net, last, cfg, rng)?;
        // Mirror the encoder's downsamples: deepest up keeps the last width,
        // the rest step back down the channel plan.
        let mut stages = Vec::new();
        let mut shortcut_channels = Vec::new();
        let mut cur = last;
        for i in (0..chans.len()).rev() {
            let target = chans[i];
            let up_conv = net.add(conv(cur, target), rng)?;
            let mut blocks = Vec::new();
            for _ in 0..cfg.blocks_per_stage {
                blocks.push(add_res_block(&mut net, target, cfg, rng)?);
            }
            stages.push(Stage { up_conv, blocks });
            shortcut_channels.push(target);
            cur = target;
        }
        let out_norm = net.add(
            LayerSpec::GroupNorm { channels: cur, groups: norm_groups(cur), eps: cfg.norm_eps },
            rng,
        )?;
        let out_conv = net.add(conv(cur, cfg.in_channels), rng)?;
        Ok(Decoder {
            net,
            from_latent,
            neck,
            stages,
            out_norm,
            out_conv,
            slope: cfg.leaky_slope,
            shortcut_channels,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Per-stage output channel widths, deepest first. The shortcut chain in
    /// the LR encoder is built against this plan.
    pub fn shortcut_channels(&self) -> &[usize] {
        &self.shortcut_channels
    }

    /// Decode a latent map; `shortcuts`, when given, holds one feature map
    /// per stage (deepest first) that is added to that stage's output.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundNet,
        z: Var,
        shortcuts: Option<&[Var]>,
    ) -> Result<Var> {
        if let Some(s) = shortcuts {
            if s.len() != self.stages.len() {
                return Err(Error::shape(
                    "decoder shortcuts",
                    self.stages.len(),
                    s.len(),
                ));
            }
        }
        let mut h = bound.apply(tape, &self.net, self.from_latent, z)?;
        h = res_block_forward(tape, &self.net, bound, &self.neck, self.slope, h)?;
        for (i, stage) in self.stages.iter().enumerate() {
            h = tape.nearest_upsample(h, 2)?;
            h = bound.apply(tape, &self.net, stage.up_conv, h)?;
            for rb in &stage.blocks {
                h = res_block_forward(tape, &self.net, bound, rb, self.slope, h)?;
            }
            if let Some(s) = shortcuts {
                h = tape.add(h, s[i])?;
            }
        }
        h = bound.apply(tape, &self.net, self.out_norm, h)?;
        h = tape.leaky_relu(h, F::from_f64(self.slope));
        bound.apply(tape, &self.net, self.out_conv, h)
    }

    /// Convenience forward for inference paths: fresh tape, frozen weights.
    pub fn decode(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let bound = self.net.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let y = self.forward(&mut tape, &bound, zv, None)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toy_decoder_expands_4px_latent_to_32px_image() {
        let cfg = ModelConfig::toy(8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = Decoder::new(&cfg, &mut rng).unwrap();
        let z = Tensor::uniform(vec![2, 8, 4, 4], -1.0, 1.0, &mut rng);
        let y = dec.decode(&z).unwrap();
        assert_eq!(y.shape(), &[2, 3, 32, 32]);
    }

    #[test]
    fn zero_shortcuts_match_plain_decode_exactly() {
        let cfg = ModelConfig::toy(8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dec = Decoder::new(&cfg, &mut rng).unwrap();
        let z = Tensor::uniform(vec![1, 8, 4, 4], -1.0, 1.0, &mut rng);

        let plain = dec.decode(&z).unwrap();

        let mut tape = Tape::<f32>::new();
        let bound = dec.net.bind(&mut tape, false);
        let zv = tape.constant(z);
        // shortcut shapes: stage outputs at 8, 16, 32 px with the plan's widths
        let dims = [8usize, 16, 32];
        let shortcuts: Vec<_> = dec
            .shortcut_channels()
            .iter()
            .zip(dims)
            .map(|(&c, d)| tape.constant(Tensor::zeros(vec![1, c, d, d])))
            .collect();
        let y = dec.forward(&mut tape, &bound, zv, Some(&shortcuts)).unwrap();
        assert_eq!(tape.value(y).data(), plain.data());
    }

    #[test]
    fn shortcut_count_mismatch_is_rejected() {
        let cfg = ModelConfig::toy(8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dec = Decoder::new(&cfg, &mut rng).unwrap();
        let mut tape = Tape::<f32>::new();
        let bound = dec.net.bind(&mut tape, false);
        let z = tape.constant(Tensor::zeros(vec![1, 8, 4, 4]));
        let s = tape.constant(Tensor::zeros(vec![1, 32, 8, 8]));
        assert!(dec.forward(&mut tape, &bound, z, Some(&[s])).is_err());
    }

    #[test]
    fn decoder_param_count_matches_specs() {
        let cfg = ModelConfig::toy(8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dec = Decoder::new(&cfg, &mut rng).unwrap();
        assert_eq!(dec.net.param_count(), dec.net.spec_param_count());
    }
}
