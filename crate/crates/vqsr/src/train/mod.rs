//! Training infrastructure: bias-corrected Adam, global-norm gradient
//! clipping, per-term loss history, and the two training loops (prior
//! pretraining and restoration with the frozen prior).

pub mod checkpoint;
pub mod stage1;
pub mod stage2;

pub use checkpoint::{config_digest, Checkpoint, CHECKPOINT_VERSION};
pub use stage1::{continue_stage1, train_stage1, Stage1Config, Stage1State};
pub use stage2::{continue_stage2, train_stage2, Stage2Config, Stage2State};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use std::io::Write as _;
use std::path::Path;

/// A training step aborts when the total loss passes this bound.
pub const DIVERGENCE_LOSS_BOUND: f64 = 1e6;

/// Gradients are rescaled so their global L2 norm never exceeds this.
pub const DEFAULT_CLIP_NORM: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Bias-corrected Adam over a fixed list of parameter tensors. Moments are
/// stored in f32 (matching checkpoint precision); per-element arithmetic runs
/// in f64.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[&Tensor<f32>]) -> Result<Self> {
        cfg.validate()?;
        Ok(Adam {
            cfg,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            t: 0,
        })
    }

    pub fn from_parts(
        cfg: AdamConfig,
        m: Vec<Tensor<f32>>,
        v: Vec<Tensor<f32>>,
        t: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if m.len() != v.len() {
            return Err(Error::Config("moment lists differ in length".into()));
        }
        Ok(Adam { cfg, m, v, t })
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn set_t(&mut self, t: u64) {
        self.t = t;
    }

    pub fn moments(&self) -> (&[Tensor<f32>], &[Tensor<f32>]) {
        (&self.m, &self.v)
    }

    /// One update. Rejects (without mutating anything) on count or shape
    /// mismatch and on non-finite gradients.
    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape(
                    format!("adam step, tensor {i}"),
                    format!("{:?}", self.m[i].shape()),
                    format!("param {:?} / grad {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient for tensor {i} (shape {:?}); step rejected",
                    g.shape()
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((pv, gv), (mv, vv)) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g64 = *gv as f64;
                let m64 = b1 * *mv as f64 + (1.0 - b1) * g64;
                let v64 = b2 * *vv as f64 + (1.0 - b2) * g64 * g64;
                *mv = m64 as f32;
                *vv = v64 as f32;
                let m_hat = *mv as f64 / bc1;
                let v_hat = *vv as f64 / bc2;
                *pv = (*pv as f64 - self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps)) as f32;
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| {
            let v = v as f64;
            v * v
        })
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Append-only per-term loss log: (step, term, value).
#[derive(Clone, Debug, Default)]
pub struct LossHistory {
    pub rows: Vec<(u64, String, f64)>,
}

impl LossHistory {
    pub fn push(&mut self, step: u64, term: &str, value: f64) {
        self.rows.push((step, term.to_string(), value));
    }

    /// All (step, value) points for one term, in log order.
    pub fn series(&self, term: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|(_, n, _)| n == term)
            .map(|&(s, _, v)| (s, v))
            .collect()
    }

    /// Mean of the last `window` points of a term's series, skipping back
    /// `offset` windows first. Returns None when not enough points exist.
    pub fn trailing_window_mean(&self, term: &str, window: usize, offset: usize) -> Option<f64> {
        let series = self.series(term);
        let end = series.len().checked_sub(window * offset)?;
        let start = end.checked_sub(window)?;
        if window == 0 {
            return None;
        }
        Some(series[start..end].iter().map(|(_, v)| v).sum::<f64>() / window as f64)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,term,value\n");
        for (step, term, value) in &self.rows {
            out.push_str(&format!("{step},{term},{value}\n"));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn divergence_error(
    step: u64,
    loss: f64,
    last_good: &Option<std::path::PathBuf>,
) -> Error {
    Error::Diverged { step, loss, last_good: last_good.clone() }
}

/// Checks a total-loss value against the divergence bound, mapping non-finite
/// totals onto the same abort path.
pub(crate) fn guard_total(
    total: Result<f64>,
    step: u64,
    last_good: &Option<std::path::PathBuf>,
) -> Result<f64> {
    match total {
        Ok(v) if v.abs() <= DIVERGENCE_LOSS_BOUND => Ok(v),
        Ok(v) => Err(divergence_error(step, v, last_good)),
        Err(Error::NonFinite(_)) => Err(divergence_error(step, f64::NAN, last_good)),
        Err(e) => Err(e),
    }
}

/// One hinge update of the discriminator on a (real, generated) batch pair.
/// Runs the per-step normalization power iteration first. Returns the loss.
pub(crate) fn discriminator_step(
    disc: &mut crate::models::Discriminator,
    opt: &mut Adam,
    real_batch: &Tensor<f32>,
    fake_batch: &Tensor<f32>,
    clip_norm: f64,
    step: u64,
    last_good: &Option<std::path::PathBuf>,
) -> Result<f64> {
    disc.refresh_sn();
    let mut tape: Tape<f32> = Tape::new();
    let bound = disc.net.bind(&mut tape, true);
    let real = tape.constant(real_batch.clone());
    let fake = tape.constant(fake_batch.clone());
    let real_scores = disc.forward(&mut tape, &bound, real)?;
    let fake_scores = disc.forward(&mut tape, &bound, fake)?;
    let loss = crate::losses::hinge_d(&mut tape, real_scores, fake_scores)?;
    let value = tape.value(loss).item()?.to_f64();
    let value = guard_total(
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite(format!("discriminator loss = {value}")))
        },
        step,
        last_good,
    )?;

    let grads = tape.backward(loss)?;
    let named: Vec<(String, Var)> = disc
        .net
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .zip(bound.flat())
        .collect();
    let mut d_grads = collect_grads(&tape, &grads, &named)?;
    clip_global_norm(&mut d_grads, clip_norm);
    drop(tape);

    let mut params: Vec<&mut Tensor<f32>> =
        disc.net.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
    opt.step(&mut params, &d_grads)?;
    Ok(value)
}

/// Pulls the gradient for every named leaf, rejecting non-finite values with
/// the parameter's name in the diagnostic.
pub(crate) fn collect_grads(
    tape: &Tape<f32>,
    grads: &Gradients<f32>,
    named_vars: &[(String, Var)],
) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(named_vars.len());
    for (name, var) in named_vars {
        let g = grads.get_or_zeros(*var, tape.shape(*var));
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}; step rejected")));
        }
        out.push(g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f32) -> Tensor<f32> {
        Tensor::scalar(v)
    }

    #[test]
    fn first_step_moves_by_roughly_the_learning_rate() {
        let cfg = AdamConfig::default();
        let mut p = scalar_param(0.5);
        let mut opt = Adam::new(cfg, &[&p]).unwrap();
        let g = Tensor::scalar(1.0f32);
        opt.step(&mut [&mut p], &[g]).unwrap();
        let delta = p.data()[0] as f64 - 0.5;
        assert!(delta < 0.0, "moves against the gradient");
        // Bias correction makes the first step exactly lr * g/(|g| + eps);
        // slack covers the f32 parameter storage.
        assert!((delta.abs() - cfg.lr).abs() < 1e-2 * cfg.lr, "{delta}");
    }

    #[test]
    fn zero_gradient_from_rest_leaves_parameters_and_decays_moments() {
        // With zero moments, a zero gradient moves nothing.
        let mut p = scalar_param(0.5);
        let mut opt = Adam::new(AdamConfig::default(), &[&p]).unwrap();
        opt.step(&mut [&mut p], &[Tensor::scalar(0.0f32)]).unwrap();
        assert_eq!(p.data()[0], 0.5, "zero grad on zero moments must not move the parameter");
        assert_eq!(opt.m[0].data()[0], 0.0);
        assert_eq!(opt.v[0].data()[0], 0.0);

        // With accumulated moments, a zero gradient only decays them.
        let mut p = scalar_param(0.5);
        let mut opt = Adam::from_parts(
            AdamConfig::default(),
            vec![Tensor::scalar(0.1f32)],
            vec![Tensor::scalar(0.01f32)],
            1,
        )
        .unwrap();
        opt.step(&mut [&mut p], &[Tensor::scalar(0.0f32)]).unwrap();
        assert!((opt.m[0].data()[0] as f64 - 0.09).abs() < 1e-7, "first moment decays by beta1");
        assert!((opt.v[0].data()[0] as f64 - 0.0099).abs() < 1e-7, "second moment decays by beta2");
    }

    #[test]
    fn fifty_steps_match_an_independent_recurrence_oracle() {
        // Quadratic bowl f(th) = 0.5 (th - 3)^2, gradient th - 3, from 0.
        let cfg = AdamConfig::default();
        let mut p = scalar_param(0.0);
        let mut opt = Adam::new(cfg, &[&p]).unwrap();

        // Oracle: hand-rolled recurrences with the same f32 storage points.
        let (mut th, mut m, mut v): (f32, f32, f32) = (0.0, 0.0, 0.0);
        for t in 1..=50u32 {
            let g = p.data()[0] - 3.0;
            opt.step(&mut [&mut p], &[Tensor::scalar(g)]).unwrap();

            let g64 = (th - 3.0) as f64;
            m = (cfg.beta1 * m as f64 + (1.0 - cfg.beta1) * g64) as f32;
            v = (cfg.beta2 * v as f64 + (1.0 - cfg.beta2) * g64 * g64) as f32;
            let m_hat = m as f64 / (1.0 - cfg.beta1.powi(t as i32));
            let v_hat = v as f64 / (1.0 - cfg.beta2.powi(t as i32));
            th = (th as f64 - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;

            assert!(
                (p.data()[0] as f64 - th as f64).abs() < 1e-10,
                "step {t}: {} vs oracle {th}",
                p.data()[0]
            );
        }
        assert_eq!(opt.t(), 50);
        assert!(th > 0.0 && th < 3.0, "50 small steps move part-way toward the minimum");
    }

    #[test]
    fn non_finite_gradient_rejected_without_mutation() {
        let mut p = scalar_param(0.25);
        let mut opt = Adam::new(AdamConfig::default(), &[&p]).unwrap();
        let err = opt.step(&mut [&mut p], &[Tensor::scalar(f32::NAN)]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        assert_eq!(p.data()[0], 0.25);
        assert_eq!(opt.t(), 0, "rejected step must not advance the counter");
    }

    #[test]
    fn shape_and_count_mismatches_rejected() {
        let mut p = scalar_param(0.0);
        let mut opt = Adam::new(AdamConfig::default(), &[&p]).unwrap();
        assert!(opt.step(&mut [&mut p], &[]).is_err());
        let bad = Tensor::zeros(vec![2]);
        assert!(opt.step(&mut [&mut p], &[bad]).is_err());
    }

    #[test]
    fn invalid_adam_configs_rejected() {
        let mut cfg = AdamConfig::default();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = AdamConfig::default();
        cfg.beta1 = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn clip_is_identity_below_the_bound_and_rescales_above() {
        let mut grads = vec![Tensor::new(vec![2], vec![3.0f32, 4.0]).unwrap()];
        let norm = clip_global_norm(&mut grads, 10.0);
        assert!((norm - 5.0).abs() < 1e-6);
        assert_eq!(grads[0].data(), &[3.0, 4.0], "below the bound nothing changes");

        let mut grads = vec![
            Tensor::new(vec![2], vec![30.0f32, 40.0]).unwrap(),
            Tensor::new(vec![1], vec![0.0f32]).unwrap(),
        ];
        let norm = clip_global_norm(&mut grads, 10.0);
        assert!((norm - 50.0).abs() < 1e-4);
        let clipped: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((clipped - 10.0).abs() < 1e-4, "{clipped}");
        assert!((grads[0].data()[0] - 6.0).abs() < 1e-4);
    }

    #[test]
    fn history_windows_and_csv_round_out() {
        let mut h = LossHistory::default();
        for s in 0..10u64 {
            h.push(s, "l1", s as f64);
            h.push(s, "other", 99.0);
        }
        assert_eq!(h.series("l1").len(), 10);
        // Last window of 5: mean of 5..9 = 7; previous window: mean of 0..4 = 2.
        assert_eq!(h.trailing_window_mean("l1", 5, 0), Some(7.0));
        assert_eq!(h.trailing_window_mean("l1", 5, 1), Some(2.0));
        assert_eq!(h.trailing_window_mean("l1", 11, 0), None);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        h.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,term,value\n"));
        assert_eq!(text.lines().count(), 21);
        assert!(text.contains("9,l1,9"));
    }
}
