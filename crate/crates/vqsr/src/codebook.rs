//! Discrete feature codebook: nearest-neighbor quantization of feature-map
//! positions, straight-through wiring onto a tape, usage statistics, and a
//! flat binary export format.
//!
//! Distance search uses the expansion |a|^2 - 2ab + |b|^2 through a matrix
//! product, then re-scores a small candidate set with the exact sum of
//! squared differences so the assigned index always matches a brute-force
//! scan, including near-ties.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{idx4, Real, Tensor};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

pub const CODEBOOK_MAGIC: &[u8; 4] = b"VQCB";
pub const CODEBOOK_VERSION: u32 = 1;

/// How to resolve exact distance ties. The deterministic rule is the
/// default; random assignment among tied entries sits behind a flag.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    LowestIndex,
    Random,
}

#[derive(Clone, Debug)]
pub struct Codebook {
    /// [K, n_z]
    table: Tensor<f32>,
}

impl Codebook {
    /// Uniform init in [-1/K, 1/K), the scale the decoder is trained against.
    pub fn init_uniform<R: Rng>(k: usize, n_z: usize, rng: &mut R) -> Result<Self> {
        if k == 0 || n_z == 0 {
            return Err(Error::Config(format!("codebook dims must be nonzero, got {k}x{n_z}")));
        }
        let bound = 1.0 / k as f64;
        Ok(Codebook {
            table: Tensor::uniform(vec![k, n_z], -bound, bound, rng),
        })
    }

    pub fn from_table(table: Tensor<f32>) -> Result<Self> {
        if table.rank() != 2 || table.shape()[0] == 0 || table.shape()[1] == 0 {
            return Err(Error::shape("Codebook::from_table", "[K, n_z]", format!("{:?}", table.shape())));
        }
        Ok(Codebook { table })
    }

    pub fn len(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn table(&self) -> &Tensor<f32> {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut Tensor<f32> {
        &mut self.table
    }

    pub fn code(&self, i: usize) -> &[f32] {
        let n = self.dim();
        &self.table.data()[i * n..(i + 1) * n]
    }

    /// Flat binary export: magic, version, K, n_z, then K*n_z little-endian f32.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(CODEBOOK_MAGIC).map_err(|e| Error::io(path, e))?;
        f.write_u32::<LittleEndian>(CODEBOOK_VERSION).map_err(|e| Error::io(path, e))?;
        f.write_u32::<LittleEndian>(self.len() as u32).map_err(|e| Error::io(path, e))?;
        f.write_u32::<LittleEndian>(self.dim() as u32).map_err(|e| Error::io(path, e))?;
        for &v in self.table.data() {
            f.write_f32::<LittleEndian>(v).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != CODEBOOK_MAGIC {
            return Err(Error::Checkpoint(format!("bad codebook magic {magic:?}")));
        }
        let version = f.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        if version != CODEBOOK_VERSION {
            return Err(Error::Checkpoint(format!("unsupported codebook version {version}")));
        }
        let k = f.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
        let n_z = f.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
        let mut data = vec![0f32; k * n_z];
        for v in data.iter_mut() {
            *v = f.read_f32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        }
        Codebook::from_table(Tensor::new(vec![k, n_z], data)?)
    }
}

/// Quantization of an NCHW feature map (C = code dimension).
#[derive(Clone, Debug)]
pub struct QuantizeResult<F: Real> {
    /// Same shape as the input, each position replaced by its nearest code.
    pub quantized: Tensor<F>,
    /// Winning code per position, (n, h, w) order.
    pub indices: Vec<usize>,
    /// Exact squared distance to the winning code per position.
    pub distances: Vec<F>,
}

/// Nearest-neighbor quantization with deterministic lowest-index ties.
pub fn quantize<F: Real>(zhat: &Tensor<F>, table: &Tensor<F>) -> Result<QuantizeResult<F>> {
    quantize_with_ties::<F, rand_chacha::ChaCha8Rng>(zhat, table, TieBreak::LowestIndex, None)
}

pub fn quantize_with_ties<F: Real, R: Rng>(
    zhat: &Tensor<F>,
    table: &Tensor<F>,
    tie: TieBreak,
    mut rng: Option<&mut R>,
) -> Result<QuantizeResult<F>> {
    let (n, c, h, w) = zhat.dims4()?;
    let tshape = table.shape();
    if tshape.len() != 2 || tshape[1] != c {
        return Err(Error::shape("quantize table", format!("[K, {c}]"), format!("{tshape:?}")));
    }
    if !zhat.all_finite() || !table.all_finite() {
        return Err(Error::NonFinite("quantize input".into()));
    }
    let k = tshape[0];
    let positions = n * h * w;

    // Rearrange to [positions, c] rows in (n, h, w) order.
    let mut rows = vec![F::ZERO; positions * c];
    let zd = zhat.data();
    for s in 0..n {
        for y in 0..h {
            for x in 0..w {
                let p = (s * h + y) * w + x;
                for ch in 0..c {
                    rows[p * c + ch] = zd[idx4(c, h, w, s, ch, y, x)];
                }
            }
        }
    }

    let assign = assign_rows(&rows, table.data(), positions, k, c, tie, rng.as_deref_mut());
    let (indices, distances): (Vec<usize>, Vec<F>) = assign.into_iter().unzip();

    let mut qdata = vec![F::ZERO; zhat.numel()];
    let td = table.data();
    for (p, &ki) in indices.iter().enumerate() {
        let s = p / (h * w);
        let rem = p % (h * w);
        let (y, x) = (rem / w, rem % w);
        for ch in 0..c {
            qdata[idx4(c, h, w, s, ch, y, x)] = td[ki * c + ch];
        }
    }
    Ok(QuantizeResult {
        quantized: Tensor::new(zhat.shape().to_vec(), qdata)?,
        indices,
        distances,
    })
}

/// Core search over row vectors. Expansion scores prune to a candidate set,
/// exact squared distances decide the winner.
fn assign_rows<F: Real, R: Rng>(
    rows: &[F],
    table: &[F],
    positions: usize,
    k: usize,
    c: usize,
    tie: TieBreak,
    mut rng: Option<&mut R>,
) -> Vec<(usize, F)> {
    let code_norms: Vec<F> = (0..k)
        .map(|ki| {
            let mut acc = F::ZERO;
            for &v in &table[ki * c..(ki + 1) * c] {
                acc += v * v;
            }
            acc
        })
        .collect();

    let exact = |p: usize, ki: usize| -> F {
        let r = &rows[p * c..(p + 1) * c];
        let t = &table[ki * c..(ki + 1) * c];
        let mut acc = F::ZERO;
        for (a, b) in r.iter().zip(t) {
            let d = *a - *b;
            acc += d * d;
        }
        acc
    };

    let mut out = Vec::with_capacity(positions);
    let mut scores = vec![F::ZERO; k];
    for p in 0..positions {
        let r = &rows[p * c..(p + 1) * c];
        let mut rnorm = F::ZERO;
        for &v in r {
            rnorm += v * v;
        }
        let mut min_score = F::from_f64(f64::INFINITY);
        let mut max_abs = F::ZERO;
        for ki in 0..k {
            let t = &table[ki * c..(ki + 1) * c];
            let mut dot = F::ZERO;
            for (a, b) in r.iter().zip(t) {
                dot += *a * *b;
            }
            let s = rnorm - (dot + dot) + code_norms[ki];
            scores[ki] = s;
            if s < min_score {
                min_score = s;
            }
            max_abs = max_abs.maxv(s.abs());
        }
        // Candidates within the expansion's rounding slack of the best score.
        let margin = F::from_f64(1e-3) * (F::ONE + max_abs);
        let mut best_k = usize::MAX;
        let mut best_d = F::from_f64(f64::INFINITY);
        let mut tied: Vec<usize> = Vec::new();
        for ki in 0..k {
            if scores[ki] > min_score + margin {
                continue;
            }
            let d = exact(p, ki);
            if d < best_d {
                best_d = d;
                best_k = ki;
                tied.clear();
                tied.push(ki);
            } else if d == best_d {
                tied.push(ki);
            }
        }
        let chosen = match tie {
            TieBreak::LowestIndex => best_k,
            TieBreak::Random => {
                if tied.len() > 1 {
                    let r = rng.as_deref_mut().expect("random tie-break requires an rng");
                    tied[r.gen_range(0..tied.len())]
                } else {
                    best_k
                }
            }
        };
        out.push((chosen, if chosen == best_k { best_d } else { exact(p, chosen) }));
    }
    out
}

/// Quantization wired onto a tape: looks up nearest codes for the current
/// value of `zhat`, gathers them from the table node (codebook gradients flow
/// through this gather), and builds the straight-through estimator node.
pub struct TapeQuantize {
    pub indices: Arc<Vec<usize>>,
    /// Gathered codes as a graph node; backward scatter-adds into the table.
    pub zq: Var,
    /// Straight-through node: value of `zq`, gradient routed to `zhat`.
    pub ste: Var,
}

pub fn quantize_on_tape<F: Real>(tape: &mut Tape<F>, table: Var, zhat: Var) -> Result<TapeQuantize> {
    let result = quantize(tape.value(zhat), tape.value(table))?;
    let (n, _c, h, w) = tape.value(zhat).dims4()?;
    let indices = Arc::new(result.indices);
    let zq = tape.gather_nchw(table, indices.clone(), n, h, w)?;
    let ste = tape.straight_through(zq, zhat)?;
    Ok(TapeQuantize { indices, zq, ste })
}

/// The two quantization loss terms: the codebook term pulls codes toward the
/// (stopped) encoder features, the commitment term pulls encoder features
/// toward the (stopped) codes and is scaled by `beta`.
pub fn codebook_terms<F: Real>(
    tape: &mut Tape<F>,
    zhat: Var,
    zq: Var,
    beta: F,
) -> Result<(Var, Var)> {
    let zhat_sg = tape.detach(zhat);
    let zq_sg = tape.detach(zq);
    let codebook_term = tape.mse(zhat_sg, zq)?;
    let commit = tape.mse(zhat, zq_sg)?;
    let commitment_term = tape.mul_scalar(commit, beta);
    Ok((codebook_term, commitment_term))
}

/// Counts per code index. Indices must lie in [0, k).
pub fn usage_histogram(indices: &[usize], k: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; k];
    for &i in indices {
        if i >= k {
            return Err(Error::Input(format!("histogram index {i} out of range for K={k}")));
        }
        counts[i] += 1;
    }
    Ok(counts)
}

/// exp(entropy) of the empirical code distribution; 1.0 means a single code
/// dominates, K means perfectly uniform usage.
pub fn perplexity(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Input("perplexity of an all-zero histogram".into()));
    }
    let n = total as f64;
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.ln();
        }
    }
    Ok(h.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rowvec(vals: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![1, vals.len(), 1, 1], vals.to_vec()).unwrap()
    }

    /// Brute-force oracle: exact squared distance to every code, scanning in
    /// index order and keeping strict improvements (so ties stay lowest).
    fn oracle_assign(query: &[f32], table: &Tensor<f32>) -> (usize, f32) {
        let k = table.shape()[0];
        let c = table.shape()[1];
        let mut best = (0usize, f32::INFINITY);
        for ki in 0..k {
            let mut d = 0.0f32;
            for ch in 0..c {
                let diff = query[ch] - table.data()[ki * c + ch];
                d += diff * diff;
            }
            if d < best.1 {
                best = (ki, d);
            }
        }
        best
    }

    #[test]
    fn nearest_of_two_codes() {
        let table = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let q = quantize(&rowvec(&[0.9, 0.1]), &table).unwrap();
        assert_eq!(q.indices, vec![1]);
        assert_eq!(q.quantized.data(), &[1.0, 0.0]);
    }

    #[test]
    fn exact_code_has_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = Tensor::<f32>::uniform(vec![7, 4], -1.0, 1.0, &mut rng);
        let code = table.data()[3 * 4..4 * 4].to_vec();
        let q = quantize(&rowvec(&code), &table).unwrap();
        assert_eq!(q.indices, vec![3]);
        assert_eq!(q.distances[0], 0.0);
    }

    #[test]
    fn matches_bruteforce_oracle_on_random_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let table = Tensor::<f32>::uniform(vec![64, 8], -2.0, 2.0, &mut rng);
        for _ in 0..1000 {
            let query: Vec<f32> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let q = quantize(&rowvec(&query), &table).unwrap();
            let (oi, od) = oracle_assign(&query, &table);
            assert_eq!(q.indices[0], oi);
            assert!((q.distances[0] - od).abs() <= 1e-6 * (1.0 + od.abs()));
        }
    }

    #[test]
    fn equidistant_tie_takes_lowest_index() {
        let table = Tensor::new(vec![3, 1], vec![0.0, 1.0, 0.5]).unwrap();
        // query 0.5 is distance 0 to code 2 -> unique. Use 0.25: tie 0 vs 2.
        let q = quantize(&rowvec(&[0.25]), &table).unwrap();
        assert_eq!(q.indices, vec![0]);
    }

    #[test]
    fn random_tie_break_reaches_all_tied_codes() {
        let table = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let zhat = rowvec(&[0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seen = [false; 2];
        for _ in 0..64 {
            let q = quantize_with_ties(&zhat, &table, TieBreak::Random, Some(&mut rng)).unwrap();
            seen[q.indices[0]] = true;
        }
        assert!(seen[0] && seen[1], "random ties never hit both codes");
    }

    #[test]
    fn rejects_nan_input() {
        let table = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        assert!(quantize(&rowvec(&[f32::NAN]), &table).is_err());
    }

    #[test]
    fn histogram_counts_and_bounds() {
        let counts = usage_histogram(&[0, 1, 1, 3], 4).unwrap();
        assert_eq!(counts, vec![1, 2, 0, 1]);
        assert!(usage_histogram(&[4], 4).is_err());
        assert_eq!(usage_histogram(&[], 4).unwrap(), vec![0; 4]);
    }

    #[test]
    fn perplexity_reference_values() {
        // counts (3, 1): exp(-(0.75 ln 0.75 + 0.25 ln 0.25)) = 1.7548...
        let p = perplexity(&[3, 1]).unwrap();
        assert!((p - 1.754765_f64).abs() < 1e-4, "got {p}");
        let uniform = perplexity(&[5, 5, 5, 5]).unwrap();
        assert!((uniform - 4.0).abs() < 1e-12);
        assert_eq!(perplexity(&[9, 0, 0]).unwrap(), 1.0);
        assert!(perplexity(&[0, 0]).is_err());
    }

    #[test]
    fn histogram_multinomial_band_under_uniform_assignment() {
        // 16000 uniform draws over K=16: each count within 3 sigma of 1000.
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let indices: Vec<usize> = (0..16000).map(|_| rng.gen_range(0..16)).collect();
        let counts = usage_histogram(&indices, 16).unwrap();
        let sigma = (16000.0f64 * (1.0 / 16.0) * (15.0 / 16.0)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - 1000.0).abs();
            assert!(dev <= 3.0 * sigma, "bin {i}: count {c} deviates {dev:.1} > {:.1}", 3.0 * sigma);
        }
    }

    #[test]
    fn codebook_roundtrip_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cb = Codebook::init_uniform(16, 4, &mut rng).unwrap();
        let path = dir.path().join("codes.bin");
        cb.save(&path).unwrap();
        let loaded = Codebook::load(&path).unwrap();
        assert_eq!(loaded.table().data(), cb.table().data());

        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, b"NOPE").unwrap();
        assert!(Codebook::load(&bad).is_err());
    }

    #[test]
    fn init_uniform_respects_bound_and_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let ca = Codebook::init_uniform(32, 8, &mut a).unwrap();
        let cb = Codebook::init_uniform(32, 8, &mut b).unwrap();
        assert_eq!(ca.table().data(), cb.table().data());
        let bound = 1.0 / 32.0 + 1e-9;
        assert!(ca.table().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        use crate::autodiff::Tape;
        let mut tape = Tape::<f32>::new();
        let table = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let zhat_t = Tensor::new(vec![1, 2, 1, 1], vec![0.9, 0.8]).unwrap();
        let tv = tape.constant(table);
        let zv = tape.leaf(zhat_t);
        let q = quantize_on_tape(&mut tape, tv, zv).unwrap();
        // forward value is the quantized tensor, bit for bit
        assert_eq!(tape.value(q.ste).data(), tape.value(q.zq).data());
        let s = tape.sum(q.ste);
        let grads = tape.backward(s).unwrap();
        // d sum / d zhat = ones through the estimator
        assert_eq!(grads.get(zv).unwrap().data(), &[1.0, 1.0]);
        // the table was bound as a constant: no gradient anywhere for it
        assert!(grads.get(tv).is_none());
    }

    #[test]
    fn straight_through_composite_matches_direct_graph() {
        // Feeding quantized values through a linear map directly must give
        // bit-identical gradients to the straight-through path, because the
        // estimator forwards the same values and copies gradients verbatim.
        use crate::autodiff::{PadMode, Tape};
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let table = Tensor::<f32>::uniform(vec![4, 3], -1.0, 1.0, &mut rng);
        let zhat = Tensor::<f32>::uniform(vec![1, 3, 2, 2], -1.0, 1.0, &mut rng);
        let w = Tensor::<f32>::uniform(vec![2, 3, 1, 1], -1.0, 1.0, &mut rng);

        let mut t1 = Tape::<f32>::new();
        let tv = t1.constant(table.clone());
        let zv = t1.leaf(zhat.clone());
        let q = quantize_on_tape(&mut t1, tv, zv).unwrap();
        let wv = t1.constant(w.clone());
        let y = t1.conv2d(q.ste, wv, None, 1, PadMode::Reflect).unwrap();
        let loss = t1.sum(y);
        let g1 = t1.backward(loss).unwrap();
        let got = g1.get(zv).unwrap();

        let mut t2 = Tape::<f32>::new();
        let qv = t2.leaf(quantize(&zhat, &table).unwrap().quantized);
        let wv2 = t2.constant(w);
        let y2 = t2.conv2d(qv, wv2, None, 1, PadMode::Reflect).unwrap();
        let loss2 = t2.sum(y2);
        let g2 = t2.backward(loss2).unwrap();
        let want = g2.get(qv).unwrap();

        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn codebook_terms_route_gradients_one_sided() {
        use crate::autodiff::Tape;
        let mut tape = Tape::<f32>::new();
        let table_t = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let zhat_t = Tensor::new(vec![1, 1, 1, 2], vec![0.2, 0.9]).unwrap();
        let table = tape.leaf(table_t);
        let zhat = tape.leaf(zhat_t);
        let q = quantize_on_tape(&mut tape, table, zhat).unwrap();
        let (cb_term, commit) = codebook_terms(&mut tape, zhat, q.zq, 0.25).unwrap();

        // codebook term: gradient to the table only
        let g = tape.backward(cb_term).unwrap();
        assert!(g.get(zhat).is_none(), "codebook term leaked into encoder");
        let gt = g.get(table).unwrap();
        // z_q rows selected: code 0 for 0.2, code 1 for 0.9
        // d mean((sg[zhat]-zq)^2) / d table = 2(zq - zhat)/N per selected row
        assert!((gt.data()[0] - 2.0 * (0.0 - 0.2) / 2.0).abs() < 1e-6);
        assert!((gt.data()[1] - 2.0 * (1.0 - 0.9) / 2.0).abs() < 1e-6);

        // commitment term: gradient to the encoder features only
        let g2 = tape.backward(commit).unwrap();
        assert!(g2.get(table).is_none(), "commitment term leaked into codebook");
        let gz = g2.get(zhat).unwrap();
        assert!((gz.data()[0] - 0.25 * 2.0 * (0.2 - 0.0) / 2.0).abs() < 1e-6);
        assert!((gz.data()[1] - 0.25 * 2.0 * (0.9 - 1.0) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn quantize_values_and_fields_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let table = Tensor::<f32>::uniform(vec![16, 4], -1.0, 1.0, &mut rng);
        let zhat = Tensor::<f32>::uniform(vec![2, 4, 3, 3], -1.0, 1.0, &mut rng);
        let q = quantize(&zhat, &table).unwrap();
        assert_eq!(q.quantized.shape(), zhat.shape());
        assert_eq!(q.indices.len(), 2 * 3 * 3);
        // quantized positions hold the selected code rows
        for (p, &ki) in q.indices.iter().enumerate() {
            let s = p / 9;
            let rem = p % 9;
            let (y, x) = (rem / 3, rem % 3);
            for ch in 0..4 {
                let v = q.quantized.data()[idx4(4, 3, 3, s, ch, y, x)];
                assert_eq!(v, table.data()[ki * 4 + ch]);
            }
        }
    }
}
