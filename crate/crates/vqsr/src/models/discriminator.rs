//! U-shaped patch discriminator. Every convolution weight is divided by a
//! power-iteration estimate of its largest singular value before use, which
//! keeps the adversarial signal Lipschitz-bounded; the per-weight iteration
//! vectors live here and advance one step per training update.

use super::{BoundNet, ModelConfig, Net};
use crate::autodiff::{power_iterate, LayerSpec, PadMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;
use rand::Rng;

pub struct Discriminator {
    pub net: Net,
    head: usize,
    downs: Vec<usize>,
    mid: usize,
    ups: Vec<usize>,
    out: usize,
    /// Power-iteration vectors (u, v) per conv spec index.
    sn_state: Vec<Option<(Vec<f32>, Vec<f32>)>>,
    depth: usize,
    slope: f64,
}

impl Discriminator {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.disc_base_channels;
        let depth = cfg.disc_depth;
        let mut net = Net::new("disc");
        let conv = |ci: usize, co: usize, stride: usize| LayerSpec::Conv2d {
            in_ch: ci,
            out_ch: co,
            kernel: 3,
            stride,
            pad: PadMode::Reflect,
        };

        let head = net.add(conv(cfg.in_channels, d, 1), rng)?;
        let mut downs = Vec::new();
        for i in 0..depth {
            downs.push(net.add(conv(d << i, d << (i + 1), 2), rng)?);
        }
        let deep = d << depth;
        let mid = net.add(conv(deep, deep, 1), rng)?;
        let mut ups = Vec::new();
        for i in (0..depth).rev() {
            ups.push(net.add(conv(d << (i + 1), d << i, 1), rng)?);
        }
        let out = net.add(conv(d, 1, 1), rng)?;

        // One (u, v) pair per conv, warmed by a single iteration so both
        // vectors are unit-norm from the start.
        let mut sn_state = vec![None; net.specs.len()];
        for (idx, spec) in net.specs.iter().enumerate() {
            if let LayerSpec::Conv2d { .. } = spec {
                let w = &net.params[idx][0];
                let rows = w.shape()[0];
                let cols = w.numel() / rows;
                let mut u: Vec<f32> = (0..rows).map(|_| rng.gen_range(0.1..1.0)).collect();
                let mut v = vec![0.0f32; cols];
                power_iterate(w, &mut u, &mut v);
                sn_state[idx] = Some((u, v));
            }
        }

        Ok(Discriminator {
            net,
            head,
            downs,
            mid,
            ups,
            out,
            sn_state,
            depth,
            slope: cfg.leaky_slope,
        })
    }

    /// Advance every weight's power iteration one step against the current
    /// parameters. Call once per optimizer update.
    pub fn refresh_sn(&mut self) {
        for (idx, entry) in self.sn_state.iter_mut().enumerate() {
            if let Some((u, v)) = entry {
                power_iterate(&self.net.params[idx][0], u, v);
            }
        }
    }

    pub fn sn_state(&self) -> &[Option<(Vec<f32>, Vec<f32>)>] {
        &self.sn_state
    }

    pub fn sn_state_mut(&mut self) -> &mut [Option<(Vec<f32>, Vec<f32>)>] {
        &mut self.sn_state
    }

    fn sn_conv<F: Real>(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundNet,
        idx: usize,
        x: Var,
        stride: usize,
    ) -> Result<Var> {
        let (u, v) = self.sn_state[idx]
            .as_ref()
            .expect("every conv spec has iteration vectors");
        let uf: Vec<F> = u.iter().map(|&x| F::from_f64(x as f64)).collect();
        let vf: Vec<F> = v.iter().map(|&x| F::from_f64(x as f64)).collect();
        let vars = bound.layer(idx);
        let w = tape.spectral_norm(vars[0], &uf, &vf)?;
        tape.conv2d(x, w, Some(vars[1]), stride, PadMode::Reflect)
    }

    /// Score map over the input, one logit per pixel: `[N, 1, H, W]`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, bound: &BoundNet, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        let (h, w) = match shape {
            [_, _, h, w] => (*h, *w),
            other => {
                return Err(Error::shape("disc input", "rank-4 tensor", format!("{other:?}")))
            }
        };
        let div = 1usize << self.depth;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Input(format!(
                "discriminator input {h}x{w} must be divisible by {div}"
            )));
        }
        let slope = F::from_f64(self.slope);
        let mut hcur = self.sn_conv(tape, bound, self.head, x, 1)?;
        hcur = tape.leaky_relu(hcur, slope);
        let mut skips = vec![hcur];
        for &dn in &self.downs {
            hcur = self.sn_conv(tape, bound, dn, hcur, 2)?;
            hcur = tape.leaky_relu(hcur, slope);
            skips.push(hcur);
        }
        hcur = self.sn_conv(tape, bound, self.mid, hcur, 1)?;
        hcur = tape.leaky_relu(hcur, slope);
        for (i, &up) in self.ups.iter().enumerate() {
            hcur = tape.nearest_upsample(hcur, 2)?;
            hcur = self.sn_conv(tape, bound, up, hcur, 1)?;
            // Skip connection from the same resolution on the way down.
            let skip = skips[self.depth - 1 - i];
            hcur = tape.add(hcur, skip)?;
            hcur = tape.leaky_relu(hcur, slope);
        }
        self.sn_conv(tape, bound, self.out, hcur, 1)
    }
}
