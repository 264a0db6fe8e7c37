//! Prior pretraining: the HR encoder, codebook, and decoder learn to
//! compress-and-reconstruct clean texture patches, regularized by a semantic
//! projection onto frozen proxy features, a proxy perceptual term, and a
//! spectrally-normalized U-Net discriminator trained in lockstep.

use super::checkpoint::{config_digest, Checkpoint};
use super::{
    clip_global_norm, collect_grads, discriminator_step, guard_total, Adam, AdamConfig,
    LossHistory,
};
use crate::autodiff::{Tape, Var};
use crate::codebook::{codebook_terms, quantize_on_tape, Codebook};
use crate::degrade::derive_seed;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{hinge_g, semantic_term, LossBreakdown, LossWeights, SemanticHead};
use crate::models::{Decoder, Discriminator, HrEncoder, ModelConfig, ProxyFeatures};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Seed streams, kept apart so initialization draws never collide with
/// per-step draws.
const STREAM_INIT: u64 = 0x01;
const STREAM_STEP: u64 = 0x02;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Stage1Config {
    /// Target total step count; resuming continues toward the same target.
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    /// Steps during which the adversarial weight is forced to zero.
    pub adversarial_warmup_steps: u64,
    /// Write a checkpoint every N steps (0 = only the initial safety copy).
    pub checkpoint_every: u64,
    pub clip_norm: f64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Stage1Config {
    pub fn new(steps: u64, seed: u64) -> Self {
        Stage1Config {
            steps,
            batch_size: 16,
            seed,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            adversarial_warmup_steps: 0,
            checkpoint_every: 0,
            clip_norm: super::DEFAULT_CLIP_NORM,
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

pub struct Stage1State {
    pub cfg: ModelConfig,
    pub encoder: HrEncoder,
    pub codebook: Codebook,
    pub decoder: Decoder,
    pub semantic: SemanticHead,
    pub proxy: ProxyFeatures,
    pub disc: Discriminator,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    pub step: u64,
    pub master_seed: u64,
    pub history: LossHistory,
    /// Most recent on-disk checkpoint, reported when a run aborts.
    pub last_good: Option<PathBuf>,
}

impl Stage1State {
    pub fn new(cfg: ModelConfig, seed: u64, adam: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        let init = derive_seed(seed, STREAM_INIT);
        let mut rngs =
            (0..5u64).map(|i| ChaCha8Rng::seed_from_u64(derive_seed(init, i)));
        let mut next = || rngs.next().expect("five init streams");
        let encoder = HrEncoder::new(&cfg, &mut next())?;
        let codebook = Codebook::init_uniform(cfg.codebook_size, cfg.n_z, &mut next())?;
        let decoder = Decoder::new(&cfg, &mut next())?;
        let proxy = ProxyFeatures::new(&cfg)?;
        let semantic = SemanticHead::new(cfg.n_z, proxy.deepest_channels(), &mut next())?;
        let disc = Discriminator::new(&cfg, &mut next())?;

        let gen_refs: Vec<&Tensor<f32>> = encoder
            .net
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t)
            .chain(std::iter::once(codebook.table()))
            .chain(decoder.net.named_tensors().into_iter().map(|(_, t)| t))
            .chain(semantic.net.named_tensors().into_iter().map(|(_, t)| t))
            .collect();
        let gen_opt = Adam::new(adam, &gen_refs)?;
        let disc_refs: Vec<&Tensor<f32>> =
            disc.net.named_tensors().into_iter().map(|(_, t)| t).collect();
        let disc_opt = Adam::new(adam, &disc_refs)?;

        Ok(Stage1State {
            cfg,
            encoder,
            codebook,
            decoder,
            semantic,
            proxy,
            disc,
            gen_opt,
            disc_opt,
            step: 0,
            master_seed: seed,
            history: LossHistory::default(),
            last_good: None,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(config_digest(&self.cfg)?, self.step, self.master_seed);
        ck.push_net(&self.encoder.net);
        ck.push_tensor("codebook.table", self.codebook.table());
        ck.push_net(&self.decoder.net);
        ck.push_net(&self.semantic.net);
        ck.push_net(&self.disc.net);
        push_sn_state(&mut ck, "disc.sn", self.disc.sn_state());
        push_moments(&mut ck, "opt.gen", &self.gen_opt);
        push_moments(&mut ck, "opt.disc", &self.disc_opt);
        Ok(ck)
    }

    pub fn from_checkpoint(cfg: &ModelConfig, adam: AdamConfig, ck: &Checkpoint) -> Result<Self> {
        ck.check_digest(cfg)?;
        let mut state = Stage1State::new(cfg.clone(), ck.seed, adam)?;
        ck.load_net(&mut state.encoder.net)?;
        let table = ck.tensor("codebook.table")?;
        if table.shape() != state.codebook.table().shape() {
            return Err(Error::Checkpoint(format!(
                "codebook.table: file {:?} vs model {:?}",
                table.shape(),
                state.codebook.table().shape()
            )));
        }
        *state.codebook.table_mut() = table;
        ck.load_net(&mut state.decoder.net)?;
        ck.load_net(&mut state.semantic.net)?;
        ck.load_net(&mut state.disc.net)?;
        load_sn_state(ck, "disc.sn", state.disc.sn_state_mut())?;
        state.gen_opt = load_moments(ck, "opt.gen", adam, state.gen_opt.moments().0.len(), ck.step)?;
        state.disc_opt =
            load_moments(ck, "opt.disc", adam, state.disc_opt.moments().0.len(), ck.step)?;
        state.step = ck.step;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.write(path)
    }

    pub fn load(cfg: &ModelConfig, adam: AdamConfig, path: &Path) -> Result<Self> {
        Stage1State::from_checkpoint(cfg, adam, &Checkpoint::read(path)?)
    }
}

pub(crate) fn push_sn_state(
    ck: &mut Checkpoint,
    prefix: &str,
    sn: &[Option<(Vec<f32>, Vec<f32>)>],
) {
    for (i, entry) in sn.iter().enumerate() {
        if let Some((u, v)) = entry {
            ck.push_raw(&format!("{prefix}.{i}.u"), vec![u.len()], u.clone());
            ck.push_raw(&format!("{prefix}.{i}.v"), vec![v.len()], v.clone());
        }
    }
}

pub(crate) fn load_sn_state(
    ck: &Checkpoint,
    prefix: &str,
    sn: &mut [Option<(Vec<f32>, Vec<f32>)>],
) -> Result<()> {
    for (i, entry) in sn.iter_mut().enumerate() {
        if entry.is_some() {
            let (_, u) = ck.raw(&format!("{prefix}.{i}.u"))?;
            let (_, v) = ck.raw(&format!("{prefix}.{i}.v"))?;
            *entry = Some((u.to_vec(), v.to_vec()));
        }
    }
    Ok(())
}

pub(crate) fn push_moments(ck: &mut Checkpoint, prefix: &str, opt: &Adam) {
    let (m, v) = opt.moments();
    for (i, (mt, vt)) in m.iter().zip(v).enumerate() {
        ck.push_tensor(&format!("{prefix}.{i}.m"), mt);
        ck.push_tensor(&format!("{prefix}.{i}.v"), vt);
    }
}

pub(crate) fn load_moments(
    ck: &Checkpoint,
    prefix: &str,
    cfg: AdamConfig,
    count: usize,
    t: u64,
) -> Result<Adam> {
    let mut m = Vec::with_capacity(count);
    let mut v = Vec::with_capacity(count);
    for i in 0..count {
        m.push(ck.tensor(&format!("{prefix}.{i}.m"))?);
        v.push(ck.tensor(&format!("{prefix}.{i}.v"))?);
    }
    Adam::from_parts(cfg, m, v, t)
}

/// Draws `batch` patches (with replacement) and stacks them.
pub(crate) fn sample_batch(
    dataset: &[Image],
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    let picks: Vec<Image> =
        (0..batch).map(|_| dataset[rng.gen_range(0..dataset.len())].clone()).collect();
    Image::batch_tensor(&picks)
}

pub fn train_stage1(
    dataset: &[Image],
    model_cfg: &ModelConfig,
    tcfg: &Stage1Config,
) -> Result<Stage1State> {
    let mut state = Stage1State::new(model_cfg.clone(), tcfg.seed, tcfg.adam)?;
    continue_stage1(&mut state, dataset, tcfg)?;
    Ok(state)
}

/// Runs steps until `state.step` reaches `tcfg.steps`. Safe to call on a
/// freshly loaded checkpoint; per-step seeds depend only on (seed, step).
pub fn continue_stage1(
    state: &mut Stage1State,
    dataset: &[Image],
    tcfg: &Stage1Config,
) -> Result<()> {
    tcfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("stage 1 needs a non-empty patch dataset".into()));
    }
    if let Some(dir) = &tcfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("stage1_step{}.ckpt", state.step));
        state.save(&path)?;
        state.last_good = Some(path);
    }
    let step_stream = derive_seed(state.master_seed, STREAM_STEP);
    while state.step < tcfg.steps {
        let step = state.step;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(step_stream, step));
        let batch = sample_batch(dataset, tcfg.batch_size, &mut rng)?;
        stage1_step(state, &batch, tcfg)?;
        state.step += 1;
        if tcfg.checkpoint_every > 0 && state.step % tcfg.checkpoint_every == 0 {
            if let Some(dir) = &tcfg.checkpoint_dir {
                let path = dir.join(format!("stage1_step{}.ckpt", state.step));
                state.save(&path)?;
                state.last_good = Some(path);
            }
        }
    }
    Ok(())
}

/// One generator update followed by one discriminator update.
fn stage1_step(state: &mut Stage1State, batch: &Tensor<f32>, tcfg: &Stage1Config) -> Result<()> {
    let step = state.step;
    let w = &tcfg.weights;

    // Generator pass: reconstruct through the quantized bottleneck.
    let mut tape: Tape<f32> = Tape::new();
    let enc_b = state.encoder.net.bind(&mut tape, true);
    let table_v = tape.leaf(state.codebook.table().clone());
    let dec_b = state.decoder.net.bind(&mut tape, true);
    let sem_b = state.semantic.net.bind(&mut tape, true);
    let x = tape.constant(batch.clone());

    let zhat = state.encoder.forward(&mut tape, &enc_b, x)?;
    let tq = quantize_on_tape(&mut tape, table_v, zhat)?;
    let recon = state.decoder.forward(&mut tape, &dec_b, tq.ste, None)?;

    let l1 = tape.l1(recon, x)?;
    let (cb_term, commit_term) =
        codebook_terms(&mut tape, zhat, tq.zq, w.commit_beta as f32)?;
    let taps = state.proxy.forward(&mut tape, x)?;
    let deepest = *taps.last().expect("proxy has at least one stage");
    let projected = state.semantic.forward(&mut tape, &sem_b, zhat)?;
    let sem = semantic_term(&mut tape, projected, deepest)?;
    let perc = state.proxy.distance(&mut tape, recon, x)?;

    let disc_b = state.disc.net.bind(&mut tape, false);
    let fake_scores = state.disc.forward(&mut tape, &disc_b, recon)?;
    let adv = hinge_g(&mut tape, fake_scores);
    let adv_weight = if step < tcfg.adversarial_warmup_steps { 0.0 } else { w.adversarial };

    let breakdown = LossBreakdown::build(
        &mut tape,
        vec![
            ("l1", l1, w.l1),
            ("codebook", cb_term, 1.0),
            ("commitment", commit_term, 1.0),
            ("semantic", sem, w.semantic_gamma),
            ("perceptual", perc, w.perceptual),
            ("adversarial", adv, adv_weight),
        ],
    )?;
    let total = guard_total(breakdown.total_value(&tape), step, &state.last_good)?;

    let grads = tape.backward(breakdown.total)?;
    let mut named_vars: Vec<(String, Var)> = Vec::new();
    for ((name, _), var) in
        state.encoder.net.named_tensors().into_iter().zip(enc_b.flat())
    {
        named_vars.push((name, var));
    }
    named_vars.push(("codebook.table".into(), table_v));
    for ((name, _), var) in
        state.decoder.net.named_tensors().into_iter().zip(dec_b.flat())
    {
        named_vars.push((name, var));
    }
    for ((name, _), var) in
        state.semantic.net.named_tensors().into_iter().zip(sem_b.flat())
    {
        named_vars.push((name, var));
    }
    let mut gen_grads = collect_grads(&tape, &grads, &named_vars)?;
    clip_global_norm(&mut gen_grads, tcfg.clip_norm);

    let term_values = breakdown.term_values(&tape);
    let recon_value = tape.value(recon).clone();
    drop(tape);

    // Generator parameters in the same fixed binding order the optimizer
    // tracks (encoder, table, decoder, semantic head).
    let mut params: Vec<&mut Tensor<f32>> = Vec::new();
    params.extend(state.encoder.net.named_tensors_mut().into_iter().map(|(_, t)| t));
    params.push(state.codebook.table_mut());
    params.extend(state.decoder.net.named_tensors_mut().into_iter().map(|(_, t)| t));
    params.extend(state.semantic.net.named_tensors_mut().into_iter().map(|(_, t)| t));
    state.gen_opt.step(&mut params, &gen_grads)?;
    drop(params);

    // Discriminator update on the same batch; the generator output enters as
    // a constant here.
    let d_value = discriminator_step(
        &mut state.disc,
        &mut state.disc_opt,
        batch,
        &recon_value,
        tcfg.clip_norm,
        step,
        &state.last_good,
    )?;

    for (name, value) in &term_values {
        state.history.push(step, name, *value);
    }
    state.history.push(step, "total", total);
    state.history.push(step, "disc", d_value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::DIVERGENCE_LOSS_BOUND;
    use rand::Rng;

    fn tiny_dataset(n: usize, size: usize, seed: u64) -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut img = Image::new(3, size, size);
                for v in img.data_mut() {
                    *v = rng.gen_range(0.0..1.0);
                }
                img
            })
            .collect()
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig::toy(8, 16)
    }

    fn tiny_tcfg(steps: u64) -> Stage1Config {
        let mut t = Stage1Config::new(steps, 99);
        t.batch_size = 2;
        t
    }

    #[test]
    fn two_runs_with_one_seed_are_identical() {
        let data = tiny_dataset(2, 32, 5);
        let a = train_stage1(&data, &tiny_cfg(), &tiny_tcfg(2)).unwrap();
        let b = train_stage1(&data, &tiny_cfg(), &tiny_tcfg(2)).unwrap();
        assert_eq!(a.step, 2);
        assert_eq!(a.history.rows.len(), b.history.rows.len());
        for (ra, rb) in a.history.rows.iter().zip(&b.history.rows) {
            assert_eq!(ra.0, rb.0);
            assert_eq!(ra.1, rb.1);
            assert_eq!(ra.2, rb.2, "term {} at step {}", ra.1, ra.0);
        }
        assert_eq!(a.encoder.net.hash(), b.encoder.net.hash());
        let names: Vec<&str> = a.history.rows.iter().map(|r| r.1.as_str()).collect();
        for want in ["l1", "codebook", "commitment", "semantic", "perceptual", "adversarial", "total", "disc"] {
            assert!(names.contains(&want), "missing {want}");
        }
        for (_, _, v) in &a.history.rows {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn checkpoint_resume_matches_an_uninterrupted_run() {
        let data = tiny_dataset(2, 32, 6);
        let full = train_stage1(&data, &tiny_cfg(), &tiny_tcfg(4)).unwrap();

        let partial = train_stage1(&data, &tiny_cfg(), &tiny_tcfg(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.ckpt");
        partial.save(&path).unwrap();
        let mut resumed =
            Stage1State::load(&tiny_cfg(), AdamConfig::default(), &path).unwrap();
        assert_eq!(resumed.step, 2);
        continue_stage1(&mut resumed, &data, &tiny_tcfg(4)).unwrap();

        assert_eq!(resumed.encoder.net.hash(), full.encoder.net.hash());
        assert_eq!(resumed.decoder.net.hash(), full.decoder.net.hash());
        let tail_full: Vec<_> =
            full.history.rows.iter().filter(|r| r.0 >= 2).collect();
        let tail_res: Vec<_> = resumed.history.rows.iter().collect();
        assert_eq!(tail_full.len(), tail_res.len());
        for (a, b) in tail_full.iter().zip(&tail_res) {
            assert!(
                (a.2 - b.2).abs() <= 1e-6 * a.2.abs().max(1.0),
                "step {} term {}: {} vs {}",
                a.0,
                a.1,
                a.2,
                b.2
            );
        }
    }

    #[test]
    fn state_checkpoint_round_trips_bit_exactly() {
        let data = tiny_dataset(2, 32, 7);
        let state = train_stage1(&data, &tiny_cfg(), &tiny_tcfg(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.ckpt");
        state.save(&path).unwrap();
        let back = Stage1State::load(&tiny_cfg(), AdamConfig::default(), &path).unwrap();
        assert_eq!(back.step, 1);
        assert_eq!(back.master_seed, state.master_seed);
        assert_eq!(back.encoder.net.hash(), state.encoder.net.hash());
        assert_eq!(back.decoder.net.hash(), state.decoder.net.hash());
        assert_eq!(back.semantic.net.hash(), state.semantic.net.hash());
        assert_eq!(back.disc.net.hash(), state.disc.net.hash());
        assert_eq!(back.codebook.table().data(), state.codebook.table().data());
        let (m1, v1) = state.gen_opt.moments();
        let (m2, v2) = back.gen_opt.moments();
        for (a, b) in m1.iter().zip(m2).chain(v1.iter().zip(v2)) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(back.gen_opt.t(), 1);
        assert_eq!(back.disc.sn_state().len(), state.disc.sn_state().len());
        for (a, b) in back.disc.sn_state().iter().zip(state.disc.sn_state()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn exploding_loss_aborts_with_the_last_good_checkpoint() {
        let data = tiny_dataset(2, 32, 8);
        let dir = tempfile::tempdir().unwrap();
        let mut tcfg = tiny_tcfg(5);
        tcfg.weights.l1 = 1e9; // guarantees total > divergence bound at step 0
        tcfg.checkpoint_dir = Some(dir.path().to_path_buf());
        let err = match train_stage1(&data, &tiny_cfg(), &tcfg) {
            Err(e) => e,
            Ok(_) => panic!("expected divergence"),
        };
        match err {
            Error::Diverged { step, loss, last_good } => {
                assert_eq!(step, 0);
                assert!(loss > DIVERGENCE_LOSS_BOUND);
                let path = last_good.expect("divergence must point at a checkpoint");
                assert!(path.exists());
                let restored =
                    Stage1State::load(&tiny_cfg(), AdamConfig::default(), &path).unwrap();
                assert_eq!(restored.step, 0);
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn wrong_architecture_checkpoint_rejected() {
        let data = tiny_dataset(2, 32, 9);
        let state = train_stage1(&data, &tiny_cfg(), &tiny_tcfg(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.ckpt");
        state.save(&path).unwrap();
        let other = ModelConfig::toy(8, 32); // different codebook size
        let err = match Stage1State::load(&other, AdamConfig::default(), &path) {
            Err(e) => e,
            Ok(_) => panic!("expected rejection"),
        };
        assert!(err.to_string().contains("digest"), "{err}");
    }
}
