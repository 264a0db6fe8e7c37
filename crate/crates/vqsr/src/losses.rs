//! Training objectives for both stages: pixel reconstruction, codebook and
//! commitment pulls, a semantic regularizer on the latent, feature matching
//! with Gram-texture agreement, a frozen-feature perceptual distance, and
//! the hinge adversarial pair. Every builder returns graph nodes so one
//! backward pass covers the full weighted sum.

use crate::autodiff::{
    finite_diff_check, GradCheckEntry, GradCheckReport, LayerSpec, PadMode, Tape, Var,
};
use crate::error::{Error, Result};
use crate::models::{BoundNet, Net};
use crate::tensor::Real;
use rand::Rng;

/// Scale factors for every term in the two stage objectives.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Commitment pull of encoder features toward their matched codes, and
    /// the feature-matching MSE in the restoration stage.
    pub commit_beta: f64,
    /// Latent semantic regularizer.
    pub semantic_gamma: f64,
    /// Gram-matrix agreement inside the feature-matching loss.
    pub gram_alpha: f64,
    /// Pixel L1 reconstruction.
    pub l1: f64,
    /// Frozen-feature perceptual distance.
    pub perceptual: f64,
    /// Adversarial generator term.
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            commit_beta: 0.25,
            semantic_gamma: 0.1,
            gram_alpha: 1.0,
            l1: 1.0,
            perceptual: 1.0,
            adversarial: 0.1,
        }
    }
}

/// A weighted sum of named scalar terms, kept apart for logging.
pub struct LossBreakdown {
    pub total: Var,
    /// (name, raw term node, weight applied in `total`).
    pub terms: Vec<(String, Var, f64)>,
}

impl LossBreakdown {
    /// Weighted sum of scalar terms. Weights of exactly zero still log but
    /// do not contribute a graph edge.
    pub fn build<F: Real>(tape: &mut Tape<F>, terms: Vec<(&str, Var, f64)>) -> Result<Self> {
        let mut total: Option<Var> = None;
        for &(_, term, weight) in &terms {
            if weight == 0.0 {
                continue;
            }
            let scaled = tape.mul_scalar(term, F::from_f64(weight));
            total = Some(match total {
                None => scaled,
                Some(t) => tape.add(t, scaled)?,
            });
        }
        let total = total.ok_or_else(|| Error::Config("loss has no active terms".into()))?;
        Ok(LossBreakdown {
            total,
            terms: terms
                .into_iter()
                .map(|(n, v, w)| (n.to_string(), v, w))
                .collect(),
        })
    }

    /// Raw (unweighted) value of every term, for CSV logging.
    pub fn term_values<F: Real>(&self, tape: &Tape<F>) -> Vec<(String, f64)> {
        self.terms
            .iter()
            .map(|(n, v, _)| (n.clone(), tape.value(*v).data()[0].to_f64()))
            .collect()
    }

    /// Total loss value; a non-finite value is an error so training can halt
    /// instead of stepping on garbage.
    pub fn total_value<F: Real>(&self, tape: &Tape<F>) -> Result<f64> {
        let v = tape.value(self.total).item()?.to_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("total loss = {v}")));
        }
        Ok(v)
    }
}

/// Discriminator hinge objective: real scores pushed above +1, fake scores
/// below -1, averaged over the score maps.
pub fn hinge_d<F: Real>(tape: &mut Tape<F>, real_scores: Var, fake_scores: Var) -> Result<Var> {
    let neg_real = tape.neg(real_scores);
    let m_real = tape.add_scalar(neg_real, F::ONE);
    let m_real = tape.relu(m_real);
    let m_real = tape.mean(m_real);
    let m_fake = tape.add_scalar(fake_scores, F::ONE);
    let m_fake = tape.relu(m_fake);
    let m_fake = tape.mean(m_fake);
    tape.add(m_real, m_fake)
}

/// Generator hinge objective: raise the discriminator's score on restored
/// images. Pass scores computed on the *non-detached* generator output.
pub fn hinge_g<F: Real>(tape: &mut Tape<F>, fake_scores: Var) -> Var {
    let m = tape.mean(fake_scores);
    tape.neg(m)
}

/// Feature-matching pair: plain MSE between latent features and a reference,
/// plus MSE between their Gram matrices (returned separately so each can be
/// weighted). The reference is typically the frozen HR encoder's latent.
pub fn feature_match_terms<F: Real>(
    tape: &mut Tape<F>,
    z: Var,
    z_ref: Var,
) -> Result<(Var, Var)> {
    let mse = tape.mse(z, z_ref)?;
    let g = tape.gram(z)?;
    let g_ref = tape.gram(z_ref)?;
    let gram_mse = tape.mse(g, g_ref)?;
    Ok((mse, gram_mse))
}

/// Learnable pointwise projection from the latent space onto the deepest
/// frozen-feature channels, used by the semantic regularizer. Trained with
/// the encoder in stage one, discarded afterwards.
pub struct SemanticHead {
    pub net: Net,
    conv: usize,
}

impl SemanticHead {
    pub fn new(n_z: usize, target_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Net::new("sem");
        let conv = net.add(
            LayerSpec::Conv2d {
                in_ch: n_z,
                out_ch: target_channels,
                kernel: 1,
                stride: 1,
                pad: PadMode::Zero,
            },
            rng,
        )?;
        Ok(SemanticHead { net, conv })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, bound: &BoundNet, z: Var) -> Result<Var> {
        bound.apply(tape, &self.net, self.conv, z)
    }
}

/// Semantic regularizer: the projected latent must agree with the target
/// feature map, which is held fixed (no gradient flows into it).
pub fn semantic_term<F: Real>(tape: &mut Tape<F>, projected: Var, target: Var) -> Result<Var> {
    let sg = tape.detach(target);
    tape.mse(projected, sg)
}

/// Finite-difference verification of each loss builder, merged into the
/// op-level report by the verification command.
pub fn losses_gradcheck(trials: usize, seed: u64) -> Result<GradCheckReport> {
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-4;
    const EPS: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();

    // Scores sampled well inside (-1, 1) so the hinge kinks at +-1 are never
    // straddled by the probe.
    let scores =
        |rng: &mut ChaCha8Rng| Tensor::<f64>::uniform(vec![2, 1, 3, 3], -0.7, 0.7, rng);

    let mut run = |name: &str,
                   trials: usize,
                   case: &mut dyn FnMut(
        &mut ChaCha8Rng,
    )
        -> (Tensor<f64>, Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>)|
     -> Result<()> {
        let mut worst = 0.0f64;
        let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
        for _ in 0..trials {
            let (x, build) = case(&mut r);
            worst = worst.max(finite_diff_check(|t, v| build(t, v), &x, EPS)?);
        }
        report.entries.push(GradCheckEntry {
            name: name.to_string(),
            trials,
            max_rel_err: worst,
            tolerance: TOL,
        });
        Ok(())
    };

    run("hinge_d_wrt_real", trials, &mut |r| {
        let x = scores(r);
        let fake = scores(r);
        (
            x,
            Box::new(move |t, v| {
                let f = t.constant(fake.clone());
                hinge_d(t, v, f)
            }),
        )
    })?;
    run("hinge_d_wrt_fake", trials, &mut |r| {
        let x = scores(r);
        let real = scores(r);
        (
            x,
            Box::new(move |t, v| {
                let re = t.constant(real.clone());
                hinge_d(t, re, v)
            }),
        )
    })?;
    run("hinge_g", trials, &mut |r| {
        let x = scores(r);
        (x, Box::new(move |t, v| Ok(hinge_g(t, v))))
    })?;
    run("feature_match", trials, &mut |r| {
        let x = Tensor::<f64>::uniform(vec![1, 3, 4, 4], -1.0, 1.0, r);
        let z_ref = Tensor::<f64>::uniform(vec![1, 3, 4, 4], -1.0, 1.0, r);
        (
            x,
            Box::new(move |t, v| {
                let zr = t.constant(z_ref.clone());
                let (mse, gram) = feature_match_terms(t, v, zr)?;
                let b = LossBreakdown::build(t, vec![("m", mse, 0.25), ("g", gram, 1.0)])?;
                Ok(b.total)
            }),
        )
    })?;
    run("semantic_term", trials, &mut |r| {
        let x = Tensor::<f64>::uniform(vec![1, 4, 3, 3], -1.0, 1.0, r);
        let w = Tensor::<f64>::uniform(vec![6, 4, 1, 1], -0.5, 0.5, r);
        let target = Tensor::<f64>::uniform(vec![1, 6, 3, 3], -1.0, 1.0, r);
        (
            x,
            Box::new(move |t, v| {
                let wv = t.constant(w.clone());
                let proj = t.conv2d(v, wv, None, 1, PadMode::Zero)?;
                let tg = t.constant(target.clone());
                semantic_term(t, proj, tg)
            }),
        )
    })?;
    // One trial: each probe re-runs two full proxy forwards per element.
    run("perceptual_proxy", 1, &mut |r| {
        let proxy =
            crate::models::ProxyFeatures::new(&crate::models::ModelConfig::toy(8, 16)).unwrap();
        let x = Tensor::<f64>::uniform(vec![1, 3, 12, 12], 0.0, 1.0, r);
        let other = Tensor::<f64>::uniform(vec![1, 3, 12, 12], 0.0, 1.0, r);
        (
            x,
            Box::new(move |t, v| {
                let o = t.constant(other.clone());
                proxy.distance(t, v, o)
            }),
        )
    })?;

    Ok(report)
}
