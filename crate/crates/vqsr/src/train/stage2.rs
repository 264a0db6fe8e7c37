//! Restoration training: a low-resolution encoder learns to land its
//! features on the frozen codebook (feature matching in code space) while
//! the frozen decoder, conditioned on trainable multi-scale shortcuts,
//! renders the output. The codebook, decoder core, and HR encoder never
//! move; hashes assert it.

use super::checkpoint::{config_digest, tensor_hash, Checkpoint};
use super::stage1::{load_moments, load_sn_state, push_moments, push_sn_state};
use super::{
    clip_global_norm, collect_grads, discriminator_step, guard_total, Adam, AdamConfig,
    LossHistory,
};
use crate::autodiff::{Tape, Var};
use crate::codebook::{quantize_on_tape, Codebook};
use crate::degrade::{apply_plan, derive_seed, plan_degradation, DegradationConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{feature_match_terms, hinge_g, LossBreakdown, LossWeights};
use crate::models::{Decoder, Discriminator, HrEncoder, LrEncoder, ModelConfig, ProxyFeatures};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

const STREAM_INIT: u64 = 0x11;
const STREAM_STEP: u64 = 0x12;
/// Sub-stream of each step seed reserved for degradation plans.
const STREAM_DEGRADE: u64 = 0x1D;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Stage2Config {
    /// Target total step count; resuming continues toward the same target.
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub degrade: DegradationConfig,
    /// Side length HR images are randomly cropped to before degradation.
    pub hr_patch: usize,
    /// Disables the multi-scale shortcut injection (ablation switch).
    pub use_shortcuts: bool,
    pub adversarial_warmup_steps: u64,
    pub checkpoint_every: u64,
    pub clip_norm: f64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Stage2Config {
    pub fn new(steps: u64, seed: u64) -> Self {
        Stage2Config {
            steps,
            batch_size: 16,
            seed,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            degrade: DegradationConfig::default(),
            hr_patch: 256,
            use_shortcuts: true,
            adversarial_warmup_steps: 0,
            checkpoint_every: 0,
            clip_norm: super::DEFAULT_CLIP_NORM,
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.adam.validate()?;
        self.degrade.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.degrade.scale != model.sr_scale {
            return Err(Error::Config(format!(
                "degradation scale {} does not match the model's sr_scale {}",
                self.degrade.scale, model.sr_scale
            )));
        }
        if self.hr_patch % model.latent_factor() != 0 {
            return Err(Error::Config(format!(
                "hr_patch {} must be divisible by the latent factor {}",
                self.hr_patch,
                model.latent_factor()
            )));
        }
        Ok(())
    }
}

/// Hashes of everything that must stay untouched during restoration training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrozenHashes {
    pub hr_encoder: [u8; 32],
    pub codebook: [u8; 32],
    pub decoder: [u8; 32],
}

pub struct Stage2State {
    pub cfg: ModelConfig,
    pub lr_encoder: LrEncoder,
    pub hr_encoder: HrEncoder,
    pub codebook: Codebook,
    pub decoder: Decoder,
    pub proxy: ProxyFeatures,
    pub disc: Discriminator,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    pub step: u64,
    pub master_seed: u64,
    pub history: LossHistory,
    pub last_good: Option<PathBuf>,
    pub frozen: FrozenHashes,
}

impl Stage2State {
    /// Builds restoration training state around an already-trained prior.
    pub fn new(
        cfg: ModelConfig,
        hr_encoder: HrEncoder,
        codebook: Codebook,
        decoder: Decoder,
        seed: u64,
        adam: AdamConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if codebook.len() != cfg.codebook_size || codebook.dim() != cfg.n_z {
            return Err(Error::Config(format!(
                "codebook is {}x{}, config expects {}x{}",
                codebook.len(),
                codebook.dim(),
                cfg.codebook_size,
                cfg.n_z
            )));
        }
        let init = derive_seed(seed, STREAM_INIT);
        let mut rng0 = ChaCha8Rng::seed_from_u64(derive_seed(init, 0));
        let mut rng1 = ChaCha8Rng::seed_from_u64(derive_seed(init, 1));
        let lr_encoder = LrEncoder::new(&cfg, &mut rng0)?;
        let disc = Discriminator::new(&cfg, &mut rng1)?;
        let proxy = ProxyFeatures::new(&cfg)?;

        let gen_refs: Vec<&Tensor<f32>> =
            lr_encoder.net.named_tensors().into_iter().map(|(_, t)| t).collect();
        let gen_opt = Adam::new(adam, &gen_refs)?;
        let disc_refs: Vec<&Tensor<f32>> =
            disc.net.named_tensors().into_iter().map(|(_, t)| t).collect();
        let disc_opt = Adam::new(adam, &disc_refs)?;

        let frozen = FrozenHashes {
            hr_encoder: hr_encoder.net.hash(),
            codebook: tensor_hash(codebook.table()),
            decoder: decoder.net.hash(),
        };
        Ok(Stage2State {
            cfg,
            lr_encoder,
            hr_encoder,
            codebook,
            decoder,
            proxy,
            disc,
            gen_opt,
            disc_opt,
            step: 0,
            master_seed: seed,
            history: LossHistory::default(),
            last_good: None,
            frozen,
        })
    }

    /// Starts restoration training from a prior-pretraining checkpoint:
    /// loads the frozen parts, initializes fresh trainables.
    pub fn from_prior_checkpoint(
        cfg: &ModelConfig,
        adam: AdamConfig,
        ck: &Checkpoint,
        seed: u64,
    ) -> Result<Self> {
        ck.check_digest(cfg)?;
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let mut hr_encoder = HrEncoder::new(cfg, &mut scratch)?;
        ck.load_net(&mut hr_encoder.net)?;
        let codebook = Codebook::from_table(ck.tensor("codebook.table")?)?;
        let mut decoder = Decoder::new(cfg, &mut scratch)?;
        ck.load_net(&mut decoder.net)?;
        Stage2State::new(cfg.clone(), hr_encoder, codebook, decoder, seed, adam)
    }

    /// Confirms the prior has not moved since this state was built.
    pub fn verify_frozen(&self) -> Result<()> {
        let now = FrozenHashes {
            hr_encoder: self.hr_encoder.net.hash(),
            codebook: tensor_hash(self.codebook.table()),
            decoder: self.decoder.net.hash(),
        };
        if now != self.frozen {
            return Err(Error::Checkpoint(format!(
                "frozen parameters drifted during restoration training: \
                 hr_encoder moved: {}, codebook moved: {}, decoder moved: {}",
                now.hr_encoder != self.frozen.hr_encoder,
                now.codebook != self.frozen.codebook,
                now.decoder != self.frozen.decoder
            )));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(config_digest(&self.cfg)?, self.step, self.master_seed);
        ck.push_net(&self.lr_encoder.net);
        ck.push_net(&self.hr_encoder.net);
        ck.push_tensor("codebook.table", self.codebook.table());
        ck.push_net(&self.decoder.net);
        ck.push_net(&self.disc.net);
        push_sn_state(&mut ck, "disc.sn", self.disc.sn_state());
        push_moments(&mut ck, "opt.gen", &self.gen_opt);
        push_moments(&mut ck, "opt.disc", &self.disc_opt);
        Ok(ck)
    }

    pub fn from_checkpoint(cfg: &ModelConfig, adam: AdamConfig, ck: &Checkpoint) -> Result<Self> {
        let mut state = Stage2State::from_prior_checkpoint(cfg, adam, ck, ck.seed)?;
        ck.load_net(&mut state.lr_encoder.net)?;
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
        Stage2State::from_checkpoint(cfg, adam, &Checkpoint::read(path)?)
    }

    /// Restores one low-resolution image with the current weights.
    pub fn restore(&self, lr: &Image) -> Result<Image> {
        let x = Image::batch_tensor(std::slice::from_ref(lr))?;
        let mut tape: Tape<f32> = Tape::new();
        let enc_b = self.lr_encoder.net.bind(&mut tape, false);
        let table_v = tape.constant(self.codebook.table().clone());
        let dec_b = self.decoder.net.bind(&mut tape, false);
        let xv = tape.constant(x);
        let srf = crate::models::sr_forward_graph(
            &mut tape,
            &self.lr_encoder,
            &enc_b,
            table_v,
            &self.decoder,
            &dec_b,
            xv,
        )?;
        let mut out = Image::from_tensor(tape.value(srf.output), 0)?;
        out.clamp01();
        Ok(out)
    }
}

/// Random crop to `patch` x `patch`; identity when already that size.
pub(crate) fn random_crop(img: &Image, patch: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if h < patch || w < patch {
        return Err(Error::Input(format!(
            "image {h}x{w} is smaller than the {patch}x{patch} training crop"
        )));
    }
    if h == patch && w == patch {
        return Ok(img.clone());
    }
    let y0 = rng.gen_range(0..=h - patch);
    let x0 = rng.gen_range(0..=w - patch);
    img.crop(x0, y0, patch, patch)
}

pub fn train_stage2(
    dataset: &[Image],
    model_cfg: &ModelConfig,
    prior: &Checkpoint,
    tcfg: &Stage2Config,
) -> Result<Stage2State> {
    let mut state = Stage2State::from_prior_checkpoint(model_cfg, tcfg.adam, prior, tcfg.seed)?;
    continue_stage2(&mut state, dataset, tcfg)?;
    Ok(state)
}

/// Runs steps until `state.step` reaches `tcfg.steps`, then re-checks the
/// frozen-prior hashes.
pub fn continue_stage2(
    state: &mut Stage2State,
    dataset: &[Image],
    tcfg: &Stage2Config,
) -> Result<()> {
    tcfg.validate(&state.cfg)?;
    if dataset.is_empty() {
        return Err(Error::Input("stage 2 needs a non-empty HR dataset".into()));
    }
    if let Some(dir) = &tcfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("stage2_step{}.ckpt", state.step));
        state.save(&path)?;
        state.last_good = Some(path);
    }
    let step_stream = derive_seed(state.master_seed, STREAM_STEP);
    while state.step < tcfg.steps {
        let step = state.step;
        let step_seed = derive_seed(step_stream, step);
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed);

        // Draw HR crops, then degrade each under its own derived seed.
        // Source images may differ in size; only the crops must agree.
        let mut hrs = Vec::with_capacity(tcfg.batch_size);
        for _ in 0..tcfg.batch_size {
            let img = &dataset[rng.gen_range(0..dataset.len())];
            hrs.push(random_crop(img, tcfg.hr_patch, &mut rng)?);
        }
        let degrade_stream = derive_seed(step_seed, STREAM_DEGRADE);
        let mut lrs = Vec::with_capacity(hrs.len());
        for (i, hr) in hrs.iter().enumerate() {
            let plan = plan_degradation(&tcfg.degrade, derive_seed(degrade_stream, i as u64))?;
            lrs.push(apply_plan(hr, &plan)?);
        }
        let hr_batch = Image::batch_tensor(&hrs)?;
        let lr_batch = Image::batch_tensor(&lrs)?;

        stage2_step(state, &hr_batch, &lr_batch, tcfg)?;
        state.step += 1;
        if tcfg.checkpoint_every > 0 && state.step % tcfg.checkpoint_every == 0 {
            if let Some(dir) = &tcfg.checkpoint_dir {
                let path = dir.join(format!("stage2_step{}.ckpt", state.step));
                state.save(&path)?;
                state.last_good = Some(path);
            }
        }
    }
    state.verify_frozen()
}

fn stage2_step(
    state: &mut Stage2State,
    hr_batch: &Tensor<f32>,
    lr_batch: &Tensor<f32>,
    tcfg: &Stage2Config,
) -> Result<()> {
    let step = state.step;
    let w = &tcfg.weights;

    let mut tape: Tape<f32> = Tape::new();
    let enc_b = state.lr_encoder.net.bind(&mut tape, true);
    let table_v = tape.constant(state.codebook.table().clone());
    let dec_b = state.decoder.net.bind(&mut tape, false);
    let hr_enc_b = state.hr_encoder.net.bind(&mut tape, false);
    let x_lr = tape.constant(lr_batch.clone());
    let x_hr = tape.constant(hr_batch.clone());

    state.lr_encoder.check_input(tape.shape(x_lr))?;
    let fwd = state.lr_encoder.forward_with_bundle(&mut tape, &enc_b, x_lr)?;
    let tq = quantize_on_tape(&mut tape, table_v, fwd.zhat_l)?;
    let shortcuts = if tcfg.use_shortcuts { Some(fwd.bundle.as_slice()) } else { None };
    let output = state.decoder.forward(&mut tape, &dec_b, tq.ste, shortcuts)?;

    // Code-space target from the frozen HR encoder, computed on the fly.
    let z_gt = state.hr_encoder.forward(&mut tape, &hr_enc_b, x_hr)?;
    let (fm_mse, fm_gram) = feature_match_terms(&mut tape, fwd.zhat_l, z_gt)?;
    let l1 = tape.l1(output, x_hr)?;
    let perc = state.proxy.distance(&mut tape, output, x_hr)?;

    let disc_b = state.disc.net.bind(&mut tape, false);
    let fake_scores = state.disc.forward(&mut tape, &disc_b, output)?;
    let adv = hinge_g(&mut tape, fake_scores);
    let adv_weight = if step < tcfg.adversarial_warmup_steps { 0.0 } else { w.adversarial };

    let breakdown = LossBreakdown::build(
        &mut tape,
        vec![
            ("fema_mse", fm_mse, w.commit_beta),
            ("fema_gram", fm_gram, w.gram_alpha),
            ("l1", l1, w.l1),
            ("perceptual", perc, w.perceptual),
            ("adversarial", adv, adv_weight),
        ],
    )?;
    let total = guard_total(breakdown.total_value(&tape), step, &state.last_good)?;

    let grads = tape.backward(breakdown.total)?;
    let named: Vec<(String, Var)> = state
        .lr_encoder
        .net
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .zip(enc_b.flat())
        .collect();
    let mut gen_grads = collect_grads(&tape, &grads, &named)?;
    clip_global_norm(&mut gen_grads, tcfg.clip_norm);

    let term_values = breakdown.term_values(&tape);
    let output_value = tape.value(output).clone();
    drop(tape);

    let mut params: Vec<&mut Tensor<f32>> =
        state.lr_encoder.net.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
    state.gen_opt.step(&mut params, &gen_grads)?;
    drop(params);

    let d_value = discriminator_step(
        &mut state.disc,
        &mut state.disc_opt,
        hr_batch,
        &output_value,
        tcfg.clip_norm,
        step,
        &state.last_good,
    )?;

    let mut fema = 0.0;
    for (name, value) in &term_values {
        state.history.push(step, name, *value);
        match name.as_str() {
            "fema_mse" => fema += w.commit_beta * value,
            "fema_gram" => fema += w.gram_alpha * value,
            _ => {}
        }
    }
    state.history.push(step, "fema", fema);
    state.history.push(step, "total", total);
    state.history.push(step, "disc", d_value);
    Ok(())
}
