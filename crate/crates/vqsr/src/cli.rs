//! Command-line driver: merged run configuration, fixed output-directory
//! layout, and one handler per subcommand.
//!
//! Exit codes: 0 success, 1 validation or runtime failure (one-line
//! machine-parsable error on stderr), 2 unknown command or flag (usage).

use crate::codebook::{quantize, Codebook};
use crate::dataprep::{prepare_dir, PrepOptions};
use crate::degrade::{
    apply_plan, derive_seed, make_testset, plan_degradation, DegradationConfig,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::LossWeights;
use crate::metrics::evaluate_pairs;
use crate::models::{Decoder, ModelConfig};
use crate::train::{
    train_stage1, train_stage2, AdamConfig, Checkpoint, Stage1Config, Stage1State, Stage2Config,
    Stage2State, DEFAULT_CLIP_NORM,
};
use crate::viz::write_code_atlas;
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Run configuration: one TOML file covering every module, flag-overridable
// ---------------------------------------------------------------------------

fn default_model() -> ModelConfig {
    ModelConfig::full_scale()
}

/// Per-stage training knobs that live in the config file. Seeds never do:
/// training seeds come from the required `--seed` flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Section {
    pub steps: u64,
    pub batch_size: usize,
    pub adversarial_warmup_steps: u64,
    /// Checkpoint every N steps (0 = initial safety copy and final only).
    pub checkpoint_every: u64,
    pub clip_norm: f64,
}

impl Default for Stage1Section {
    fn default() -> Self {
        Stage1Section {
            steps: 2000,
            batch_size: 16,
            adversarial_warmup_steps: 0,
            checkpoint_every: 0,
            clip_norm: DEFAULT_CLIP_NORM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Section {
    pub steps: u64,
    pub batch_size: usize,
    /// Side length HR images are cropped to before degradation.
    pub hr_patch: usize,
    /// Multi-scale shortcut injection into the frozen decoder.
    pub use_shortcuts: bool,
    pub adversarial_warmup_steps: u64,
    pub checkpoint_every: u64,
    pub clip_norm: f64,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Stage2Section {
            steps: 2000,
            batch_size: 16,
            hr_patch: 256,
            use_shortcuts: true,
            adversarial_warmup_steps: 0,
            checkpoint_every: 0,
            clip_norm: DEFAULT_CLIP_NORM,
        }
    }
}

/// What this run was: command, master seed, and resolved flag values. Filled
/// in by the CLI so the effective-config snapshot alone can reproduce a run.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub command: String,
    pub seed: Option<u64>,
    pub args: BTreeMap<String, String>,
}

/// Merged view of every module's configuration. Loaded from TOML; any
/// missing section falls back to defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelConfig,
    pub degrade: DegradationConfig,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSection::default(),
            model: default_model(),
            degrade: DegradationConfig::default(),
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            stage1: Stage1Section::default(),
            stage2: Stage2Section::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), flatten(&e.to_string()))))
    }

    /// Load from an optional path, defaults when none is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.degrade.validate()?;
        self.adam.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialize: {e}")))
    }

    pub fn stage1_config(&self, seed: u64, checkpoint_dir: Option<PathBuf>) -> Stage1Config {
        Stage1Config {
            steps: self.stage1.steps,
            batch_size: self.stage1.batch_size,
            seed,
            adam: self.adam,
            weights: self.weights.clone(),
            adversarial_warmup_steps: self.stage1.adversarial_warmup_steps,
            checkpoint_every: self.stage1.checkpoint_every,
            clip_norm: self.stage1.clip_norm,
            checkpoint_dir,
        }
    }

    pub fn stage2_config(&self, seed: u64, checkpoint_dir: Option<PathBuf>) -> Stage2Config {
        Stage2Config {
            steps: self.stage2.steps,
            batch_size: self.stage2.batch_size,
            seed,
            adam: self.adam,
            weights: self.weights.clone(),
            degrade: self.degrade.clone(),
            hr_patch: self.stage2.hr_patch,
            use_shortcuts: self.stage2.use_shortcuts,
            adversarial_warmup_steps: self.stage2.adversarial_warmup_steps,
            checkpoint_every: self.stage2.checkpoint_every,
            clip_norm: self.stage2.clip_norm,
            checkpoint_dir,
        }
    }
}

// ---------------------------------------------------------------------------
// Output directory layout
// ---------------------------------------------------------------------------

/// Fixed run-directory layout so tests and users can rely on paths.
pub struct OutDirs {
    pub root: PathBuf,
    pub checkpoints: PathBuf,
    pub logs: PathBuf,
    pub samples: PathBuf,
    pub reports: PathBuf,
}

impl OutDirs {
    pub fn prepare(root: &Path) -> Result<OutDirs> {
        let dirs = OutDirs {
            root: root.to_path_buf(),
            checkpoints: root.join("checkpoints"),
            logs: root.join("logs"),
            samples: root.join("samples"),
            reports: root.join("reports"),
        };
        for d in [&dirs.root, &dirs.checkpoints, &dirs.logs, &dirs.samples, &dirs.reports] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d.as_path(), e))?;
        }
        Ok(dirs)
    }

    /// Effective-config snapshot, written verbatim before any work.
    pub fn write_config(&self, rc: &RunConfig) -> Result<PathBuf> {
        let path = self.root.join("config.toml");
        std::fs::write(&path, rc.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn append_log(&self, lines: &[String]) -> Result<PathBuf> {
        let path = self.logs.join("run.log");
        let mut text = lines.join("\n");
        text.push('\n');
        use std::io::Write as _;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Snapshot + log for commands whose `--out` is a single file: both sit next
/// to the output as `<stem>.config.toml` and `<stem>.log`.
fn write_sidecars(out_file: &Path, rc: &RunConfig, log_lines: &[String]) -> Result<()> {
    let cfg_path = out_file.with_extension("config.toml");
    std::fs::write(&cfg_path, rc.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
    let log_path = out_file.with_extension("log");
    let mut text = log_lines.join("\n");
    text.push('\n');
    std::fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Argument grammar
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(
    name = "vqsr",
    version,
    about = "Blind super-resolution with a learned vector-quantized texture prior"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Tile source images into training patches, dropping flat ones.
    PrepareData {
        /// Directory of source PNG images.
        #[arg(long)]
        input: PathBuf,
        /// Run directory; patches land in <out>/patches.
        #[arg(long)]
        out: PathBuf,
        /// TOML run configuration (defaults used when absent).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Square patch side length (default 512).
        #[arg(long)]
        patch_size: Option<usize>,
        /// Minimum edge-response variance for a patch to be kept.
        #[arg(long)]
        min_variance: Option<f64>,
        /// Face mode: one random resize-crop per image instead of tiling.
        #[arg(long)]
        face: bool,
        /// Master seed for face-mode crops (default 0).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Degrade one HR image into an LR image, recording the sampled plan.
    Degrade {
        /// HR input PNG.
        #[arg(long)]
        input: PathBuf,
        /// LR output PNG; the plan is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Downscale factor override.
        #[arg(long)]
        scale: Option<usize>,
        /// Master seed override for the degradation draw.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build a paired LR/HR benchmark with a manifest of every sampled plan.
    MakeTestset {
        /// Directory of HR PNG images.
        #[arg(long)]
        input: PathBuf,
        /// Run directory; writes <out>/lr, <out>/hr, <out>/manifest.toml.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scale: Option<usize>,
        /// Master seed; every per-image draw derives from it.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the texture prior (encoder, codebook, decoder).
    TrainStage1 {
        /// Directory of same-sized training patch PNGs.
        #[arg(long)]
        data: PathBuf,
        /// Run directory (checkpoints/, logs/, samples/, reports/).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master random seed; required so no run is silently nondeterministic.
        #[arg(long)]
        seed: u64,
        /// Total step target override.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Resume from an existing checkpoint toward the same step target.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the restoration encoder against the frozen prior.
    TrainStage2 {
        /// Directory of HR PNG images (cropped to hr_patch during training).
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint providing the frozen prior.
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master random seed; required so no run is silently nondeterministic.
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Ablation: disable the multi-scale shortcuts into the decoder.
        #[arg(long)]
        no_shortcuts: bool,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Restore one LR image with a trained stage-2 checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// LR input PNG.
        #[arg(long)]
        input: PathBuf,
        /// Expected upscale factor; must match the model configuration.
        #[arg(long)]
        scale: Option<usize>,
        /// SR output PNG.
        #[arg(long)]
        out: PathBuf,
        /// Config file; defaults to config.toml next to (or one level above)
        /// the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// PSNR/SSIM report for a directory of restored images vs references.
    Eval {
        /// Directory of restored PNGs.
        #[arg(long)]
        restored: PathBuf,
        /// Directory of reference PNGs with matching file names.
        #[arg(long)]
        reference: PathBuf,
        /// Run directory; the report lands in <out>/reports/metrics.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render every codebook entry as a texture tile atlas.
    VizCodebook {
        /// Any checkpoint containing the codebook and decoder.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Latent tile side per code (1 tile = one code repeated t x t).
        #[arg(long, default_value_t = 4)]
        tile: usize,
        #[arg(long, default_value_t = 16)]
        columns: usize,
    },
    /// Finite-difference verification of every differentiable op and loss.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional run directory for the report and config snapshot.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Parse and execute; returns the process exit code. Unknown commands or
/// flags print usage and return 2; failures print one line on stderr and
/// return 1.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", one_line_error(&e));
            1
        }
    }
}

/// `error: <kind>: <message>` on a single line.
pub fn one_line_error(e: &Error) -> String {
    let kind = match e {
        Error::Shape { .. } => "shape",
        Error::Config(_) => "config",
        Error::Input(_) => "input",
        Error::NonScalarBackward(_) => "backward",
        Error::NonFinite(_) => "nonfinite",
        Error::Diverged { .. } => "diverged",
        Error::Checkpoint(_) => "checkpoint",
        Error::Io { .. } => "io",
        Error::Image { .. } => "image",
        Error::Failed { .. } => "failed",
    };
    format!("error: {kind}: {}", flatten(&e.to_string()))
}

fn flatten(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::PrepareData { input, out, config, patch_size, min_variance, face, seed } => {
            cmd_prepare_data(&input, &out, config.as_deref(), patch_size, min_variance, face, seed)
        }
        Command::Degrade { input, out, config, scale, seed } => {
            cmd_degrade(&input, &out, config.as_deref(), scale, seed)
        }
        Command::MakeTestset { input, out, config, scale, seed } => {
            cmd_make_testset(&input, &out, config.as_deref(), scale, seed)
        }
        Command::TrainStage1 { data, out, config, seed, steps, batch_size, resume } => {
            cmd_train_stage1(&data, &out, config.as_deref(), seed, steps, batch_size, resume)
        }
        Command::TrainStage2 {
            data,
            prior,
            out,
            config,
            seed,
            steps,
            batch_size,
            no_shortcuts,
            resume,
        } => cmd_train_stage2(
            &data,
            &prior,
            &out,
            config.as_deref(),
            seed,
            steps,
            batch_size,
            no_shortcuts,
            resume,
        ),
        Command::Infer { checkpoint, input, scale, out, config } => {
            cmd_infer(&checkpoint, &input, scale, &out, config.as_deref())
        }
        Command::Eval { restored, reference, out } => cmd_eval(&restored, &reference, &out),
        Command::VizCodebook { checkpoint, out, config, tile, columns } => {
            cmd_viz_codebook(&checkpoint, &out, config.as_deref(), tile, columns)
        }
        Command::Gradcheck { trials, seed, out } => cmd_gradcheck(trials, seed, out.as_deref()),
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn load_pngs_sorted(dir: &Path) -> Result<Vec<(String, Image)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let name = p
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.push((name, Image::load_png(&p)?));
    }
    Ok(out)
}

fn same_sized_dataset(images: Vec<(String, Image)>) -> Result<Vec<Image>> {
    let mut it = images.into_iter();
    let Some((first_name, first)) = it.next() else {
        return Ok(Vec::new());
    };
    let dims = (first.channels(), first.height(), first.width());
    let mut out = vec![first];
    for (name, img) in it {
        if (img.channels(), img.height(), img.width()) != dims {
            return Err(Error::Input(format!(
                "training patches must share one size: {first_name} is {}x{}x{}, {name} is {}x{}x{}",
                dims.0,
                dims.1,
                dims.2,
                img.channels(),
                img.height(),
                img.width()
            )));
        }
        out.push(img);
    }
    Ok(out)
}

/// Explicit config, or the snapshot written next to / one level above the
/// checkpoint by the training run.
fn resolve_config(explicit: Option<&Path>, checkpoint: &Path) -> Result<RunConfig> {
    if let Some(p) = explicit {
        return RunConfig::load(p);
    }
    let mut candidates = Vec::new();
    if let Some(dir) = checkpoint.parent() {
        candidates.push(dir.join("config.toml"));
        if let Some(up) = dir.parent() {
            candidates.push(up.join("config.toml"));
        }
    }
    if let Some(found) = candidates.iter().find(|c| c.is_file()) {
        return RunConfig::load(found);
    }
    Err(Error::Input(format!(
        "no config.toml found near {}; pass --config",
        checkpoint.display()
    )))
}

fn args_map(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Seeds recorded in the TOML config snapshot must fit a TOML integer
/// (i64). Derived per-item seeds use the full u64 range and are stored in
/// JSON artifacts instead, which have no such bound.
fn check_seed(seed: u64) -> Result<u64> {
    if seed > i64::MAX as u64 {
        return Err(Error::Config(format!(
            "seed {seed} exceeds the config-file integer range (max {})",
            i64::MAX
        )));
    }
    Ok(seed)
}

fn mean_tail(state_hist: &crate::train::LossHistory, term: &str, window: usize) -> Option<f64> {
    state_hist.trailing_window_mean(term, window, 0)
}

// ---------------------------------------------------------------------------
// Command handlers
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cmd_prepare_data(
    input: &Path,
    out: &Path,
    config: Option<&Path>,
    patch_size: Option<usize>,
    min_variance: Option<f64>,
    face: bool,
    seed: Option<u64>,
) -> Result<()> {
    let mut rc = RunConfig::load_or_default(config)?;
    rc.validate()?;
    let mut opts = PrepOptions::default();
    if let Some(p) = patch_size {
        opts.patch_size = p;
    }
    if let Some(v) = min_variance {
        opts.variance_threshold = v;
    }
    opts.face_mode = face;
    opts.master_seed = check_seed(seed.unwrap_or(0))?;
    if opts.patch_size == 0 {
        return Err(Error::Config("patch size must be >= 1".into()));
    }

    rc.run = RunSection {
        command: "prepare-data".into(),
        seed,
        args: args_map(&[
            ("input", input.display().to_string()),
            ("out", out.display().to_string()),
            ("patch_size", opts.patch_size.to_string()),
            ("min_variance", opts.variance_threshold.to_string()),
            ("face", face.to_string()),
        ]),
    };
    let dirs = OutDirs::prepare(out)?;
    dirs.write_config(&rc)?;

    let patches = dirs.root.join("patches");
    let summary = prepare_dir(input, &patches, &opts)?;
    dirs.append_log(&[
        "command: prepare-data".into(),
        format!("input: {}", input.display()),
        format!(
            "images: {} cropped: {} kept: {} dropped: {}",
            summary.images, summary.cropped, summary.kept, summary.dropped
        ),
        format!("patches: {}", patches.display()),
    ])?;
    println!(
        "prepared {} patches ({} dropped) -> {}",
        summary.kept, summary.dropped, patches.display()
    );
    Ok(())
}

fn cmd_degrade(
    input: &Path,
    out: &Path,
    config: Option<&Path>,
    scale: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut rc = RunConfig::load_or_default(config)?;
    if let Some(s) = scale {
        rc.degrade.scale = s;
    }
    if let Some(s) = seed {
        rc.degrade.master_seed = check_seed(s)?;
    }
    rc.validate()?;
    rc.run = RunSection {
        command: "degrade".into(),
        seed: Some(rc.degrade.master_seed),
        args: args_map(&[
            ("input", input.display().to_string()),
            ("out", out.display().to_string()),
            ("scale", rc.degrade.scale.to_string()),
        ]),
    };

    let hr = Image::load_png(input)?;
    let plan = plan_degradation(&rc.degrade, derive_seed(rc.degrade.master_seed, 0))?;
    let lr = apply_plan(&hr, &plan)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    lr.save_png(out)?;
    let plan_path = out.with_extension("plan.json");
    let plan_text = serde_json::to_string_pretty(&plan)
        .map_err(|e| Error::Config(format!("plan serialize: {e}")))?;
    std::fs::write(&plan_path, plan_text).map_err(|e| Error::io(&plan_path, e))?;
    write_sidecars(
        out,
        &rc,
        &[
            "command: degrade".into(),
            format!("input: {} ({}x{})", input.display(), hr.height(), hr.width()),
            format!("output: {} ({}x{})", out.display(), lr.height(), lr.width()),
            format!("plan: {}", plan_path.display()),
        ],
    )?;
    println!("degraded {} -> {} ({}x{})", input.display(), out.display(), lr.height(), lr.width());
    Ok(())
}

fn cmd_make_testset(
    input: &Path,
    out: &Path,
    config: Option<&Path>,
    scale: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut rc = RunConfig::load_or_default(config)?;
    if let Some(s) = scale {
        rc.degrade.scale = s;
    }
    if let Some(s) = seed {
        rc.degrade.master_seed = check_seed(s)?;
    }
    rc.validate()?;
    rc.run = RunSection {
        command: "make-testset".into(),
        seed: Some(rc.degrade.master_seed),
        args: args_map(&[
            ("input", input.display().to_string()),
            ("out", out.display().to_string()),
            ("scale", rc.degrade.scale.to_string()),
        ]),
    };
    let dirs = OutDirs::prepare(out)?;
    dirs.write_config(&rc)?;

    let images = load_pngs_sorted(input)?;
    let (pairs, manifest) = make_testset(&images, &rc.degrade)?;

    let lr_dir = dirs.root.join("lr");
    let hr_dir = dirs.root.join("hr");
    std::fs::create_dir_all(&lr_dir).map_err(|e| Error::io(&lr_dir, e))?;
    std::fs::create_dir_all(&hr_dir).map_err(|e| Error::io(&hr_dir, e))?;
    for p in &pairs {
        p.lr.save_png(&lr_dir.join(&p.source))?;
        p.hr.save_png(&hr_dir.join(&p.source))?;
    }
    let manifest_path = dirs.root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialize: {e}")))?;
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;

    dirs.append_log(&[
        "command: make-testset".into(),
        format!("input: {} ({} images)", input.display(), pairs.len()),
        format!("scale: {}", rc.degrade.scale),
        format!("seed: {}", rc.degrade.master_seed),
        format!("manifest: {}", manifest_path.display()),
    ])?;
    println!("wrote {} LR/HR pairs under {}", pairs.len(), dirs.root.display());
    Ok(())
}

fn stage1_reconstruct(state: &Stage1State, img: &Image) -> Result<Image> {
    let x = Image::batch_tensor(std::slice::from_ref(img))?;
    let z = state.encoder.encode(&x)?;
    let q = quantize(&z, state.codebook.table())?;
    let y = state.decoder.decode(&q.quantized)?;
    let mut out = Image::from_tensor(&y, 0)?;
    out.clamp01();
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_stage1(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: u64,
    steps: Option<u64>,
    batch_size: Option<usize>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let mut rc = RunConfig::load_or_default(config)?;
    if let Some(s) = steps {
        rc.stage1.steps = s;
    }
    if let Some(b) = batch_size {
        rc.stage1.batch_size = b;
    }
    rc.validate()?;
    let seed = check_seed(seed)?;
    rc.run = RunSection {
        command: "train-stage1".into(),
        seed: Some(seed),
        args: args_map(&[
            ("data", data.display().to_string()),
            ("out", out.display().to_string()),
            ("steps", rc.stage1.steps.to_string()),
            ("batch_size", rc.stage1.batch_size.to_string()),
            (
                "resume",
                resume.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
        ]),
    };
    let dirs = OutDirs::prepare(out)?;
    dirs.write_config(&rc)?;
    let tcfg = rc.stage1_config(seed, Some(dirs.checkpoints.clone()));
    tcfg.validate()?;

    let dataset = same_sized_dataset(load_pngs_sorted(data)?)?;
    dirs.append_log(&[
        "command: train-stage1".into(),
        format!("seed: {seed}"),
        format!("data: {} patches from {}", dataset.len(), data.display()),
        format!("target steps: {}", tcfg.steps),
    ])?;

    let state = match resume {
        Some(ck_path) => {
            let mut state = Stage1State::load(&rc.model, tcfg.adam, &ck_path)?;
            if state.master_seed != seed {
                dirs.append_log(&[format!(
                    "note: resume keeps checkpoint seed {} (flag was {seed})",
                    state.master_seed
                )])?;
            }
            crate::train::continue_stage1(&mut state, &dataset, &tcfg)?;
            state
        }
        None => train_stage1(&dataset, &rc.model, &tcfg)?,
    };

    let final_ckpt = dirs.checkpoints.join("stage1_final.ckpt");
    state.save(&final_ckpt)?;
    state.history.write_csv(&dirs.logs.join("stage1_loss.csv"))?;
    if let Some(first) = dataset.first() {
        first.save_png(&dirs.samples.join("recon_input.png"))?;
        stage1_reconstruct(&state, first)?.save_png(&dirs.samples.join("recon_final.png"))?;
    }
    let mut lines = vec![
        format!("finished at step {}", state.step),
        format!("checkpoint: {}", final_ckpt.display()),
    ];
    for term in ["l1", "total"] {
        if let Some(m) = mean_tail(&state.history, term, 50.min(state.step as usize).max(1)) {
            lines.push(format!("trailing {term}: {m:.6}"));
        }
    }
    dirs.append_log(&lines)?;
    println!("stage 1 done at step {}; checkpoint {}", state.step, final_ckpt.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_stage2(
    data: &Path,
    prior: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: u64,
    steps: Option<u64>,
    batch_size: Option<usize>,
    no_shortcuts: bool,
    resume: Option<PathBuf>,
) -> Result<()> {
    let mut rc = RunConfig::load_or_default(config)?;
    if let Some(s) = steps {
        rc.stage2.steps = s;
    }
    if let Some(b) = batch_size {
        rc.stage2.batch_size = b;
    }
    if no_shortcuts {
        rc.stage2.use_shortcuts = false;
    }
    rc.validate()?;
    let seed = check_seed(seed)?;
    rc.run = RunSection {
        command: "train-stage2".into(),
        seed: Some(seed),
        args: args_map(&[
            ("data", data.display().to_string()),
            ("prior", prior.display().to_string()),
            ("out", out.display().to_string()),
            ("steps", rc.stage2.steps.to_string()),
            ("batch_size", rc.stage2.batch_size.to_string()),
            ("use_shortcuts", rc.stage2.use_shortcuts.to_string()),
            (
                "resume",
                resume.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
        ]),
    };
    let dirs = OutDirs::prepare(out)?;
    dirs.write_config(&rc)?;
    let tcfg = rc.stage2_config(seed, Some(dirs.checkpoints.clone()));
    tcfg.validate(&rc.model)?;

    let dataset: Vec<Image> = load_pngs_sorted(data)?.into_iter().map(|(_, i)| i).collect();
    dirs.append_log(&[
        "command: train-stage2".into(),
        format!("seed: {seed}"),
        format!("data: {} HR images from {}", dataset.len(), data.display()),
        format!("prior: {}", prior.display()),
        format!("target steps: {}", tcfg.steps),
        format!("shortcuts: {}", tcfg.use_shortcuts),
    ])?;

    let state = match resume {
        Some(ck_path) => {
            let mut state = Stage2State::load(&rc.model, tcfg.adam, &ck_path)?;
            crate::train::continue_stage2(&mut state, &dataset, &tcfg)?;
            state
        }
        None => {
            let prior_ck = Checkpoint::read(prior)?;
            train_stage2(&dataset, &rc.model, &prior_ck, &tcfg)?
        }
    };

    let final_ckpt = dirs.checkpoints.join("stage2_final.ckpt");
    state.save(&final_ckpt)?;
    state.history.write_csv(&dirs.logs.join("stage2_loss.csv"))?;

    // Sample restoration: degrade the first usable HR image and restore it.
    if let Some(hr) = dataset
        .iter()
        .find(|i| i.height() >= tcfg.hr_patch && i.width() >= tcfg.hr_patch)
    {
        let crop = hr.crop(0, 0, tcfg.hr_patch, tcfg.hr_patch)?;
        let plan = plan_degradation(&tcfg.degrade, derive_seed(tcfg.degrade.master_seed, 0))?;
        let lr = apply_plan(&crop, &plan)?;
        let sr = state.restore(&lr)?;
        crop.save_png(&dirs.samples.join("sample_hr.png"))?;
        lr.save_png(&dirs.samples.join("sample_lr.png"))?;
        sr.save_png(&dirs.samples.join("sample_sr.png"))?;
    }

    let mut lines = vec![
        format!("finished at step {}", state.step),
        format!("checkpoint: {}", final_ckpt.display()),
    ];
    for term in ["fema", "l1", "total"] {
        if let Some(m) = mean_tail(&state.history, term, 50.min(state.step as usize).max(1)) {
            lines.push(format!("trailing {term}: {m:.6}"));
        }
    }
    dirs.append_log(&lines)?;
    println!("stage 2 done at step {}; checkpoint {}", state.step, final_ckpt.display());
    Ok(())
}

fn cmd_infer(
    checkpoint: &Path,
    input: &Path,
    scale: Option<usize>,
    out: &Path,
    config: Option<&Path>,
) -> Result<()> {
    let mut rc = resolve_config(config, checkpoint)?;
    rc.validate()?;
    if let Some(s) = scale {
        if s != rc.model.sr_scale {
            return Err(Error::Config(format!(
                "--scale {s} does not match the model's upscale factor {}",
                rc.model.sr_scale
            )));
        }
    }
    rc.run = RunSection {
        command: "infer".into(),
        seed: None,
        args: args_map(&[
            ("checkpoint", checkpoint.display().to_string()),
            ("input", input.display().to_string()),
            ("out", out.display().to_string()),
            ("scale", rc.model.sr_scale.to_string()),
        ]),
    };

    let state = Stage2State::load(&rc.model, rc.adam, checkpoint)?;
    let lr = Image::load_png(input)?;
    let sr = state.restore(&lr)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    sr.save_png(out)?;
    write_sidecars(
        out,
        &rc,
        &[
            "command: infer".into(),
            format!("input: {} ({}x{})", input.display(), lr.height(), lr.width()),
            format!("output: {} ({}x{})", out.display(), sr.height(), sr.width()),
        ],
    )?;
    println!(
        "restored {}x{} -> {}x{} at {}",
        lr.height(),
        lr.width(),
        sr.height(),
        sr.width(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(restored: &Path, reference: &Path, out: &Path) -> Result<()> {
    let mut rc = RunConfig::default();
    rc.run = RunSection {
        command: "eval".into(),
        seed: None,
        args: args_map(&[
            ("restored", restored.display().to_string()),
            ("reference", reference.display().to_string()),
            ("out", out.display().to_string()),
        ]),
    };
    let dirs = OutDirs::prepare(out)?;
    dirs.write_config(&rc)?;

    let rest = load_pngs_sorted(restored)?;
    if rest.is_empty() {
        return Err(Error::Input(format!("no PNG images under {}", restored.display())));
    }
    let mut pairs = Vec::with_capacity(rest.len());
    for (name, img) in rest {
        let ref_path = reference.join(&name);
        if !ref_path.is_file() {
            return Err(Error::Input(format!(
                "no reference image for {name} under {}",
                reference.display()
            )));
        }
        pairs.push((name, img, Image::load_png(&ref_path)?));
    }
    let report = evaluate_pairs(&pairs)?;
    let report_path = dirs.reports.join("metrics.txt");
    std::fs::write(&report_path, report.render()).map_err(|e| Error::io(&report_path, e))?;
    dirs.append_log(&[
        "command: eval".into(),
        format!("pairs: {}", report.per_image.len()),
        format!(
            "mean psnr: {:.4} dB, mean ssim: {:.6}",
            report.mean_psnr, report.mean_ssim
        ),
        format!("report: {}", report_path.display()),
    ])?;
    println!(
        "evaluated {} pairs: mean psnr {:.4} dB, mean ssim {:.6} ({})",
        report.per_image.len(),
        report.mean_psnr,
        report.mean_ssim,
        report_path.display()
    );
    Ok(())
}

fn cmd_viz_codebook(
    checkpoint: &Path,
    out: &Path,
    config: Option<&Path>,
    tile: usize,
    columns: usize,
) -> Result<()> {
    let mut rc = resolve_config(config, checkpoint)?;
    rc.validate()?;
    if tile == 0 || columns == 0 {
        return Err(Error::Config("tile and columns must be >= 1".into()));
    }
    rc.run = RunSection {
        command: "viz-codebook".into(),
        seed: None,
        args: args_map(&[
            ("checkpoint", checkpoint.display().to_string()),
            ("out", out.display().to_string()),
            ("tile", tile.to_string()),
            ("columns", columns.to_string()),
        ]),
    };
    let dirs = OutDirs::prepare(out)?;
    dirs.write_config(&rc)?;

    let ck = Checkpoint::read(checkpoint)?;
    ck.check_digest(&rc.model)?;
    let mut scratch = ChaCha8Rng::seed_from_u64(0);
    let mut dec = Decoder::new(&rc.model, &mut scratch)?;
    ck.load_net(&mut dec.net)?;
    let cb = Codebook::from_table(ck.tensor("codebook.table")?)?;

    let (png, txt) = write_code_atlas(&cb, &dec, &dirs.samples, tile, columns)?;
    dirs.append_log(&[
        "command: viz-codebook".into(),
        format!("codes: {}", cb.len()),
        format!("atlas: {}", png.display()),
        format!("legend: {}", txt.display()),
    ])?;
    println!("rendered {} codes -> {}", cb.len(), png.display());
    Ok(())
}

fn cmd_gradcheck(trials: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let report = crate::autodiff::gradcheck_suite(trials, seed)?;
    let rendered = report.render();
    println!("{rendered}");
    if let Some(dir) = out {
        let mut rc = RunConfig::default();
        rc.run = RunSection {
            command: "gradcheck".into(),
            seed: Some(check_seed(seed)?),
            args: args_map(&[("trials", trials.to_string())]),
        };
        let dirs = OutDirs::prepare(dir)?;
        dirs.write_config(&rc)?;
        let report_path = dirs.reports.join("gradcheck.txt");
        std::fs::write(&report_path, &rendered).map_err(|e| Error::io(&report_path, e))?;
        dirs.append_log(&[
            "command: gradcheck".into(),
            format!("trials: {trials}"),
            format!("all passed: {}", report.all_passed()),
        ])?;
    }
    if !report.all_passed() {
        let failing: Vec<&str> = report
            .entries
            .iter()
            .filter(|e| !e.passed())
            .map(|e| e.name.as_str())
            .collect();
        return Err(Error::Failed {
            context: "gradient check".into(),
            details: format!(
                "{} of {} ops exceed tolerance: {}",
                failing.len(),
                report.entries.len(),
                failing.join(", ")
            ),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
