//! Frozen random-filter feature pyramid used for perceptual distances and
//! as the semantic target for the latent regularizer. Filters are drawn once
//! from a fixed seed and mean-subtracted per output channel, so they respond
//! to local structure rather than raw brightness; no data ever trains them.

use super::{ModelConfig, Net};
use crate::autodiff::{LayerSpec, PadMode, Tape, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct ProxyFeatures {
    pub net: Net,
    /// Per stage: stride-1 conv then stride-2 conv; a tap is taken after
    /// each stage, at 1/2, 1/4, ... of the input resolution.
    stages: Vec<(usize, usize)>,
    slope: f64,
}

impl ProxyFeatures {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.proxy_seed);
        let mut net = Net::new("proxy");
        let conv = |ci: usize, co: usize, stride: usize| LayerSpec::Conv2d {
            in_ch: ci,
            out_ch: co,
            kernel: 3,
            stride,
            pad: PadMode::Reflect,
        };
        let mut stages = Vec::new();
        let mut cin = cfg.in_channels;
        // Depth follows the encoder stages so the deepest tap sits on the
        // codebook latent grid.
        for i in 0..cfg.channel_multipliers.len() {
            let cout = cfg.proxy_channels << i;
            let a = net.add(conv(cin, cout, 1), &mut rng)?;
            let b = net.add(conv(cout, cout, 2), &mut rng)?;
            stages.push((a, b));
            cin = cout;
        }
        // Zero-mean each filter and drop the biases.
        for ps in net.params.iter_mut() {
            let w = &mut ps[0];
            let per_filter = w.numel() / w.shape()[0];
            for f in 0..w.shape()[0] {
                let fd = &mut w.data_mut()[f * per_filter..(f + 1) * per_filter];
                let mean = fd.iter().sum::<f32>() / per_filter as f32;
                for x in fd.iter_mut() {
                    *x -= mean;
                }
            }
            for b in ps[1].data_mut() {
                *b = 0.0;
            }
        }
        Ok(ProxyFeatures { net, stages, slope: cfg.leaky_slope })
    }

    /// Channel width of the deepest tap (the semantic-target feature).
    pub fn deepest_channels(&self) -> usize {
        match self.net.specs[self.stages.last().unwrap().1] {
            LayerSpec::Conv2d { out_ch, .. } => out_ch,
            _ => unreachable!("stages are convs by construction"),
        }
    }

    /// Feature taps at 1/2, 1/4, ... of the input resolution. The weights
    /// are bound as constants, so no gradient ever reaches them.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Vec<Var>> {
        let bound = self.net.bind(tape, false);
        let slope = F::from_f64(self.slope);
        let mut taps = Vec::new();
        let mut h = x;
        for &(a, b) in &self.stages {
            h = bound.apply(tape, &self.net, a, h)?;
            h = tape.leaky_relu(h, slope);
            h = bound.apply(tape, &self.net, b, h)?;
            h = tape.leaky_relu(h, slope);
            taps.push(h);
        }
        Ok(taps)
    }

    /// Mean-squared feature distance, averaged over taps. Differentiable
    /// with respect to both images.
    pub fn distance<F: Real>(&self, tape: &mut Tape<F>, a: Var, b: Var) -> Result<Var> {
        let fa = self.forward(tape, a)?;
        let fb = self.forward(tape, b)?;
        let mut total = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let d = tape.mse(x, y)?;
            total = Some(match total {
                None => d,
                Some(t) => tape.add(t, d)?,
            });
        }
        let total = total.expect("at least one stage");
        Ok(tape.mul_scalar(total, F::from_f64(1.0 / self.stages.len() as f64)))
    }

    /// Distance on plain tensors, no graph.
    pub fn distance_value(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f32> {
        let mut tape = Tape::<f32>::new();
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let d = self.distance(&mut tape, av, bv)?;
        tape.value(d).item()
    }
}
