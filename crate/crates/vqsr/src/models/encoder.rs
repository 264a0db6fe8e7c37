//! High-resolution encoder: maps clean HR patches to the latent map that is
//! quantized against the codebook. Spatial reduction is x2 per stage.

use super::{add_res_block, res_block_forward, BoundNet, ModelConfig, Net, ResBlockIdx};
use crate::autodiff::{norm_groups, LayerSpec, PadMode, Tape, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};
use rand::Rng;

struct Stage {
    blocks: Vec<ResBlockIdx>,
    down: usize,
}

pub struct HrEncoder {
    pub net: Net,
    stem: usize,
    stages: Vec<Stage>,
    neck: ResBlockIdx,
    out_norm: usize,
    to_latent: usize,
    slope: f64,
}

impl HrEncoder {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let chans = cfg.stage_channels();
        let last = *chans.last().expect("validated non-empty");
        let mut net = Net::new("enc");
        let conv = |ci: usize, co: usize, stride: usize| LayerSpec::Conv2d {
            in_ch: ci,
            out_ch: co,
            kernel: 3,
            stride,
            pad: PadMode::Reflect,
        };

        let stem = net.add(conv(cfg.in_channels, chans[0], 1), rng)?;
        let mut stages = Vec::new();
        for (i, &ch) in chans.iter().enumerate() {
            let mut blocks = Vec::new();
            for _ in 0..cfg.blocks_per_stage {
                blocks.push(add_res_block(&mut net, ch, cfg, rng)?);
            }
            let next = if i + 1 < chans.len() { chans[i + 1] } else { last };
            let down = net.add(
                LayerSpec::StridedDownsample { in_ch: ch, out_ch: next, kernel: 3, stride: 2 },
                rng,
            )?;
            stages.push(Stage { blocks, down });
        }
        let neck = add_res_block(&mut net, last, cfg, rng)?;
        let out_norm = net.add(
            LayerSpec::GroupNorm { channels: last, groups: norm_groups(last), eps: cfg.norm_eps },
            rng,
        )?;
        // Channel-matching convolution onto the code dimension.
        let to_latent = net.add(conv(last, cfg.n_z, 1), rng)?;
        Ok(HrEncoder {
            net,
            stem,
            stages,
            neck,
            out_norm,
            to_latent,
            slope: cfg.leaky_slope,
        })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, bound: &BoundNet, x: Var) -> Result<Var> {
        let mut h = bound.apply(tape, &self.net, self.stem, x)?;
        for stage in &self.stages {
            for rb in &stage.blocks {
                h = res_block_forward(tape, &self.net, bound, rb, self.slope, h)?;
            }
            h = bound.apply(tape, &self.net, stage.down, h)?;
        }
        h = res_block_forward(tape, &self.net, bound, &self.neck, self.slope, h)?;
        h = bound.apply(tape, &self.net, self.out_norm, h)?;
        h = tape.leaky_relu(h, F::from_f64(self.slope));
        bound.apply(tape, &self.net, self.to_latent, h)
    }

    /// Convenience forward for inference paths: fresh tape, frozen weights.
    pub fn encode(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let bound = self.net.bind(&mut tape, false);
        let x = tape.constant(img.clone());
        let z = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(z).clone())
    }
}
