//! Central finite-difference verification of analytic gradients, run at f64.
//!
//! Straight-through and detach are excluded by design: their backward rule
//! intentionally disagrees with the forward perturbation response, so they
//! are covered by exactness tests instead of finite differences.

use super::{PadMode, Tape, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Max relative error between analytic and central finite-difference
/// gradients of a scalar-valued graph of `x`. A non-finite forward value
/// reports as infinity rather than an error.
pub fn finite_diff_check<F, B>(build: B, x: &Tensor<F>, eps: F) -> Result<f64>
where
    F: Real,
    B: Fn(&mut Tape<F>, Var) -> Result<Var>,
{
    let eval = |t: &Tensor<F>| -> Result<F> {
        let mut tape = Tape::new();
        let v = tape.leaf(t.clone());
        let out = build(&mut tape, v)?;
        tape.value(out).item()
    };

    let f0 = eval(x)?;
    if !f0.is_finite() {
        return Ok(f64::INFINITY);
    }

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = build(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(v, x.shape());

    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Ok(f64::INFINITY);
        }
        let numeric = (fp - fm).to_f64() / (2.0 * eps.to_f64());
        let a = analytic.data()[i].to_f64();
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((a - numeric).abs() / denom);
    }
    Ok(max_rel)
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Default, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed())
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.entries.extend(other.entries);
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{} {:<28} trials={} max_rel_err={:.3e} (tol {:.1e})\n",
                if e.passed() { "ok  " } else { "FAIL" },
                e.name,
                e.trials,
                e.max_rel_err,
                e.tolerance
            ));
        }
        s
    }
}

pub(crate) const GRADCHECK_TOL: f64 = 1e-4;
pub(crate) const GRADCHECK_EPS: f64 = 1e-5;

/// Values bounded away from zero so kinked ops (abs, relu) are not sampled
/// at their nondifferentiable point.
fn away_from_zero(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let mag = rng.gen_range(0.2..1.2);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("sized")
}

fn smooth(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Scalarize with a fixed random projection so elementwise errors cannot
/// cancel the way they could under a plain mean.
fn project<F: Real>(tape: &mut Tape<F>, out: Var, r: &Tensor<F>) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv)?;
    Ok(tape.sum(prod))
}

type BuildFn = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

/// Finite-difference suite over every differentiable tape op and layer kind.
pub fn gradcheck_suite(trials: usize, seed: u64) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Each case yields (checked input tensor, graph builder) per trial.
    let mut run = |name: &str,
                   rng: &mut ChaCha8Rng,
                   mk: &mut dyn FnMut(&mut ChaCha8Rng) -> (Tensor<f64>, BuildFn)|
     -> Result<()> {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let (x, build) = mk(rng);
            let err = finite_diff_check(|t, v| build(t, v), &x, GRADCHECK_EPS)?;
            worst = worst.max(err);
        }
        report.entries.push(GradCheckEntry {
            name: name.to_string(),
            trials,
            max_rel_err: worst,
            tolerance: GRADCHECK_TOL,
        });
        Ok(())
    };

    // ----- elementwise and reductions -----
    run("add", &mut rng, &mut |rng| {
        let x = smooth(vec![3, 4], rng);
        let other = smooth(vec![3, 4], rng);
        let r = smooth(vec![3, 4], rng);
        (
            x,
            Box::new(move |t, v| {
                let o = t.constant(other.clone());
                let s = t.add(v, o)?;
                project(t, s, &r)
            }),
        )
    })?;
    run("sub", &mut rng, &mut |rng| {
        let x = smooth(vec![3, 4], rng);
        let other = smooth(vec![3, 4], rng);
        let r = smooth(vec![3, 4], rng);
        (
            x,
            Box::new(move |t, v| {
                let o = t.constant(other.clone());
                let s = t.sub(o, v)?;
                project(t, s, &r)
            }),
        )
    })?;
    run("mul", &mut rng, &mut |rng| {
        let x = smooth(vec![3, 4], rng);
        let other = smooth(vec![3, 4], rng);
        let r = smooth(vec![3, 4], rng);
        (
            x,
            Box::new(move |t, v| {
                let o = t.constant(other.clone());
                let s = t.mul(v, o)?;
                project(t, s, &r)
            }),
        )
    })?;
    run("mul_self_square", &mut rng, &mut |rng| {
        let x = smooth(vec![2, 5], rng);
        let r = smooth(vec![2, 5], rng);
        (
            x,
            Box::new(move |t, v| {
                let s = t.mul(v, v)?;
                project(t, s, &r)
            }),
        )
    })?;
    run("add_scalar", &mut rng, &mut |rng| {
        let x = smooth(vec![6], rng);
        let r = smooth(vec![6], rng);
        (
            x,
            Box::new(move |t, v| {
                let s = t.add_scalar(v, 0.7);
                project(t, s, &r)
            }),
        )
    })?;
    run("mul_scalar", &mut rng, &mut |rng| {
        let x = smooth(vec![6], rng);
        let r = smooth(vec![6], rng);
        (
            x,
            Box::new(move |t, v| {
                let s = t.mul_scalar(v, -1.3);
                project(t, s, &r)
            }),
        )
    })?;
    run("neg", &mut rng, &mut |rng| {
        let x = smooth(vec![4, 2], rng);
        let r = smooth(vec![4, 2], rng);
        (
            x,
            Box::new(move |t, v| {
                let s = t.neg(v);
                project(t, s, &r)
            }),
        )
    })?;
    run("abs", &mut rng, &mut |rng| {
        let x = away_from_zero(vec![3, 5], rng);
        let r = smooth(vec![3, 5], rng);
        (
            x,
            Box::new(move |t, v| {
                let s = t.abs(v);
                project(t, s, &r)
            }),
        )
    })?;
    run("leaky_relu", &mut rng, &mut |rng| {
        let x = away_from_zero(vec![3, 5], rng);
        let r = smooth(vec![3, 5], rng);
        (
            x,
            Box::new(move |t, v| {
                let s = t.leaky_relu(v, 0.2);
                project(t, s, &r)
            }),
        )
    })?;
    run("relu", &mut rng, &mut |rng| {
        let x = away_from_zero(vec![3, 5], rng);
        let r = smooth(vec![3, 5], rng);
        (
            x,
            Box::new(move |t, v| {
                let s = t.relu(v);
                project(t, s, &r)
            }),
        )
    })?;
    run("sum", &mut rng, &mut |rng| {
        let x = smooth(vec![7], rng);
        (x, Box::new(move |t, v| Ok(t.sum(v))))
    })?;
    run("mean", &mut rng, &mut |rng| {
        let x = smooth(vec![2, 6], rng);
        (x, Box::new(move |t, v| Ok(t.mean(v))))
    })?;
    run("reshape", &mut rng, &mut |rng| {
        let x = smooth(vec![2, 6], rng);
        let r = smooth(vec![12], rng);
        (
            x,
            Box::new(move |t, v| {
                let s = t.reshape(v, vec![12])?;
                project(t, s, &r)
            }),
        )
    })?;

    // ----- conv2d -----
    let conv_case = |stride: usize, rng: &mut ChaCha8Rng| {
        let x = smooth(vec![1, 2, 6, 6], rng);
        let w = smooth(vec![3, 2, 3, 3], rng);
        let b = smooth(vec![3], rng);
        let os = 6 / stride;
        let r = smooth(vec![1, 3, os, os], rng);
        (x, w, b, r)
    };
    run("conv2d_s1_reflect_input", &mut rng, &mut |rng| {
        let (x, w, b, r) = conv_case(1, rng);
        (
            x,
            Box::new(move |t, v| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let y = t.conv2d(v, wv, Some(bv), 1, PadMode::Reflect)?;
                project(t, y, &r)
            }),
        )
    })?;
    run("conv2d_s1_reflect_weight", &mut rng, &mut |rng| {
        let (x, w, b, r) = conv_case(1, rng);
        (
            w,
            Box::new(move |t, v| {
                let xv = t.constant(x.clone());
                let bv = t.constant(b.clone());
                let y = t.conv2d(xv, v, Some(bv), 1, PadMode::Reflect)?;
                project(t, y, &r)
            }),
        )
    })?;
    run("conv2d_s1_reflect_bias", &mut rng, &mut |rng| {
        let (x, w, b, r) = conv_case(1, rng);
        (
            b,
            Box::new(move |t, v| {
                let xv = t.constant(x.clone());
                let wv = t.constant(w.clone());
                let y = t.conv2d(xv, wv, Some(v), 1, PadMode::Reflect)?;
                project(t, y, &r)
            }),
        )
    })?;
    run("conv2d_s2_reflect_input", &mut rng, &mut |rng| {
        let (x, w, b, r) = conv_case(2, rng);
        (
            x,
            Box::new(move |t, v| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let y = t.conv2d(v, wv, Some(bv), 2, PadMode::Reflect)?;
                project(t, y, &r)
            }),
        )
    })?;
    run("conv2d_s2_reflect_weight", &mut rng, &mut |rng| {
        let (x, w, b, r) = conv_case(2, rng);
        (
            w,
            Box::new(move |t, v| {
                let xv = t.constant(x.clone());
                let bv = t.constant(b.clone());
                let y = t.conv2d(xv, v, Some(bv), 2, PadMode::Reflect)?;
                project(t, y, &r)
            }),
        )
    })?;
    run("conv2d_s1_zeropad_input", &mut rng, &mut |rng| {
        let (x, w, b, r) = conv_case(1, rng);
        (
            x,
            Box::new(move |t, v| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let y = t.conv2d(v, wv, Some(bv), 1, PadMode::Zero)?;
                project(t, y, &r)
            }),
        )
    })?;

    // ----- group norm -----
    let gn_case = |rng: &mut ChaCha8Rng| {
        let x = smooth(vec![2, 4, 3, 3], rng);
        let gamma = smooth(vec![4], rng);
        let beta = smooth(vec![4], rng);
        let r = smooth(vec![2, 4, 3, 3], rng);
        (x, gamma, beta, r)
    };
    run("group_norm_input", &mut rng, &mut |rng| {
        let (x, gamma, beta, r) = gn_case(rng);
        (
            x,
            Box::new(move |t, v| {
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                let y = t.group_norm(v, g, b, 2, 1e-6)?;
                project(t, y, &r)
            }),
        )
    })?;
    run("group_norm_gamma", &mut rng, &mut |rng| {
        let (x, gamma, beta, r) = gn_case(rng);
        (
            gamma,
            Box::new(move |t, v| {
                let xv = t.constant(x.clone());
                let b = t.constant(beta.clone());
                let y = t.group_norm(xv, v, b, 2, 1e-6)?;
                project(t, y, &r)
            }),
        )
    })?;
    run("group_norm_beta", &mut rng, &mut |rng| {
        let (x, gamma, beta, r) = gn_case(rng);
        (
            beta,
            Box::new(move |t, v| {
                let xv = t.constant(x.clone());
                let g = t.constant(gamma.clone());
                let y = t.group_norm(xv, g, v, 2, 1e-6)?;
                project(t, y, &r)
            }),
        )
    })?;

    // ----- upsample, linear, gram, gather, spectral norm -----
    run("nearest_upsample", &mut rng, &mut |rng| {
        let x = smooth(vec![1, 2, 3, 3], rng);
        let r = smooth(vec![1, 2, 6, 6], rng);
        (
            x,
            Box::new(move |t, v| {
                let y = t.nearest_upsample(v, 2)?;
                project(t, y, &r)
            }),
        )
    })?;
    let lin_case = |rng: &mut ChaCha8Rng| {
        let x = smooth(vec![3, 4], rng);
        let w = smooth(vec![5, 4], rng);
        let b = smooth(vec![5], rng);
        let r = smooth(vec![3, 5], rng);
        (x, w, b, r)
    };
    run("linear_input", &mut rng, &mut |rng| {
        let (x, w, b, r) = lin_case(rng);
        (
            x,
            Box::new(move |t, v| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let y = t.linear(v, wv, Some(bv))?;
                project(t, y, &r)
            }),
        )
    })?;
    run("linear_weight", &mut rng, &mut |rng| {
        let (x, w, b, r) = lin_case(rng);
        (
            w,
            Box::new(move |t, v| {
                let xv = t.constant(x.clone());
                let bv = t.constant(b.clone());
                let y = t.linear(xv, v, Some(bv))?;
                project(t, y, &r)
            }),
        )
    })?;
    run("linear_bias", &mut rng, &mut |rng| {
        let (x, w, b, r) = lin_case(rng);
        (
            b,
            Box::new(move |t, v| {
                let xv = t.constant(x.clone());
                let wv = t.constant(w.clone());
                let y = t.linear(xv, wv, Some(v))?;
                project(t, y, &r)
            }),
        )
    })?;
    run("gram", &mut rng, &mut |rng| {
        let x = smooth(vec![2, 3, 4, 4], rng);
        let r = smooth(vec![2, 3, 3], rng);
        (
            x,
            Box::new(move |t, v| {
                let y = t.gram(v)?;
                project(t, y, &r)
            }),
        )
    })?;
    run("gather_table", &mut rng, &mut |rng| {
        let table = smooth(vec![5, 3], rng);
        let indices: Arc<Vec<usize>> = Arc::new((0..8).map(|_| rng.gen_range(0..5)).collect());
        let r = smooth(vec![2, 3, 2, 2], rng);
        (
            table,
            Box::new(move |t, v| {
                let y = t.gather_nchw(v, indices.clone(), 2, 2, 2)?;
                project(t, y, &r)
            }),
        )
    })?;
    run("spectral_norm_weight", &mut rng, &mut |rng| {
        let w = smooth(vec![4, 6], rng);
        let u: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = smooth(vec![4, 6], rng);
        (
            w,
            Box::new(move |t, var| {
                let y = t.spectral_norm(var, &u, &v)?;
                project(t, y, &r)
            }),
        )
    })?;

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_matches_simple_quadratic() {
        // f(x) = sum(x^2) at x = (1, 2): analytic grad (2, 4).
        let x = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let err = finite_diff_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn finite_diff_reports_nan_as_failure() {
        let x = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        let err = finite_diff_check(|t, v| Ok(t.sum(v)), &x, 1e-6).unwrap();
        assert!(err.is_infinite());
    }

    #[test]
    fn suite_smoke_two_trials() {
        let report = gradcheck_suite(2, 42).unwrap();
        assert!(report.all_passed(), "\n{}", report.render());
    }
}
