//! End-to-end runs of the command-line binary: exit codes, output layout,
//! and the full prepare -> train -> infer -> eval pipeline at toy scale.

use std::path::{Path, PathBuf};
use std::process::Command;
use vqsr::cli::RunConfig;
use vqsr::image::Image;
use vqsr::models::ModelConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vqsr"))
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = bin().args(args).output().expect("spawn vqsr");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Deterministic texture: diagonal gratings with per-image phase.
fn texture(h: usize, w: usize, k: u64) -> Image {
    let mut img = Image::new(3, h, w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let t = (x as f64 * 0.7 + y as f64 * 1.3 + k as f64 * 2.1 + c as f64).sin();
                img.set(c, y, x, (0.5 + 0.45 * t) as f32);
            }
        }
    }
    img
}

fn write_toy_config(dir: &Path) -> PathBuf {
    let mut rc = RunConfig::default();
    rc.model = ModelConfig::toy(8, 16);
    rc.stage1.steps = 3;
    rc.stage1.batch_size = 2;
    rc.stage2.steps = 2;
    rc.stage2.batch_size = 2;
    rc.stage2.hr_patch = 32;
    // 32px patches can shrink to ~19px mid-degradation; keep kernels smaller.
    rc.degrade.kernel_size_range = (7, 9);
    rc.degrade.mid_resize_range = (0.6, 1.0);
    let path = dir.join("toy.toml");
    std::fs::write(&path, rc.to_toml().unwrap()).unwrap();
    path
}

#[test]
fn unknown_command_and_flags_exit_2() {
    let (code, _, err) = run(&["frobnicate"]);
    assert_eq!(code, 2, "{err}");
    assert!(err.to_lowercase().contains("usage") || err.contains("vqsr"), "{err}");

    let (code, _, err) = run(&["gradcheck", "--no-such-flag"]);
    assert_eq!(code, 2, "{err}");

    // Training without --seed is refused up front.
    let (code, _, err) = run(&["train-stage1", "--data", "x", "--out", "y"]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("--seed"), "{err}");
}

#[test]
fn help_and_version_exit_0() {
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    for cmd in [
        "prepare-data",
        "degrade",
        "make-testset",
        "train-stage1",
        "train-stage2",
        "infer",
        "eval",
        "viz-codebook",
        "gradcheck",
    ] {
        assert!(out.contains(cmd), "missing {cmd} in help:\n{out}");
    }
    let (code, _, _) = run(&["--version"]);
    assert_eq!(code, 0);
}

#[test]
fn validation_failures_exit_1_with_one_line_error() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let cfg = write_toy_config(tmp.path());
    let out_dir = tmp.path().join("run");

    let (code, _, err) = run(&[
        "train-stage1",
        "--data",
        &s(&empty),
        "--out",
        &s(&out_dir),
        "--config",
        &s(&cfg),
        "--seed",
        "1",
    ]);
    assert_eq!(code, 1, "{err}");
    let line = err.lines().last().unwrap();
    assert!(line.starts_with("error: "), "{err}");
    assert_eq!(err.trim().lines().count(), 1, "one-line error expected:\n{err}");

    // Bad config file: unknown key.
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[stage1]\nnot_a_key = 3\n").unwrap();
    let (code, _, err) = run(&[
        "make-testset",
        "--input",
        &s(&empty),
        "--out",
        &s(&out_dir),
        "--config",
        &s(&bad),
    ]);
    assert_eq!(code, 1, "{err}");
    assert!(err.starts_with("error: config: "), "{err}");
}

#[test]
fn gradcheck_smoke_run_exits_0() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("gc");
    let (code, out, err) = run(&[
        "gradcheck",
        "--trials",
        "2",
        "--seed",
        "3",
        "--out",
        &s(&out_dir),
    ]);
    assert_eq!(code, 0, "stdout:\n{out}\nstderr:\n{err}");
    assert!(out.contains("ok   "), "{out}");
    assert!(!out.contains("FAIL"), "{out}");
    assert!(out_dir.join("reports/gradcheck.txt").is_file());
    assert!(out_dir.join("config.toml").is_file());
    assert!(out_dir.join("logs/run.log").is_file());
}

#[test]
fn full_pipeline_produces_the_documented_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(tmp.path());

    // Source images: textured so Sobel filtering keeps them.
    let src = tmp.path().join("src");
    std::fs::create_dir_all(&src).unwrap();
    for i in 0..3u64 {
        texture(64, 64, i).save_png(&src.join(format!("im{i}.png"))).unwrap();
    }

    // prepare-data: 64x64 inputs tile into four 32x32 patches each.
    let prep = tmp.path().join("prep");
    let (code, out, err) = run(&[
        "prepare-data",
        "--input",
        &s(&src),
        "--out",
        &s(&prep),
        "--config",
        &s(&cfg),
        "--patch-size",
        "32",
    ]);
    assert_eq!(code, 0, "stdout:\n{out}\nstderr:\n{err}");
    let patches = prep.join("patches");
    assert!(patches.join("manifest.tsv").is_file());
    assert!(prep.join("config.toml").is_file());
    assert!(prep.join("logs/run.log").is_file());
    let n_patches = std::fs::read_dir(&patches)
        .unwrap()
        .filter(|e| {
            e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")
        })
        .count();
    assert_eq!(n_patches, 12, "3 images x 4 tiles kept");

    // train-stage1 at a tiny step budget.
    let run1 = tmp.path().join("run1");
    let (code, out, err) = run(&[
        "train-stage1",
        "--data",
        &s(&patches),
        "--out",
        &s(&run1),
        "--config",
        &s(&cfg),
        "--seed",
        "11",
    ]);
    assert_eq!(code, 0, "stdout:\n{out}\nstderr:\n{err}");
    let prior = run1.join("checkpoints/stage1_final.ckpt");
    assert!(prior.is_file());
    assert!(run1.join("logs/stage1_loss.csv").is_file());
    assert!(run1.join("samples/recon_final.png").is_file());
    assert!(run1.join("config.toml").is_file());

    // viz-codebook picks the config snapshot up from the run directory.
    let viz = tmp.path().join("viz");
    let (code, out, err) = run(&[
        "viz-codebook",
        "--checkpoint",
        &s(&prior),
        "--out",
        &s(&viz),
        "--tile",
        "1",
        "--columns",
        "8",
    ]);
    assert_eq!(code, 0, "stdout:\n{out}\nstderr:\n{err}");
    let atlas = viz.join("samples/codes_t1.png");
    assert!(atlas.is_file());
    assert!(viz.join("samples/codes_t1.txt").is_file());
    // 16 codes, 8 columns, 8x8 tiles, 2px gap.
    let sheet = Image::load_png(&atlas).unwrap();
    assert_eq!((sheet.height(), sheet.width()), (18, 78));

    // make-testset over the HR sources.
    let testset = tmp.path().join("testset");
    let (code, out, err) = run(&[
        "make-testset",
        "--input",
        &s(&src),
        "--out",
        &s(&testset),
        "--config",
        &s(&cfg),
        "--seed",
        "123",
    ]);
    assert_eq!(code, 0, "stdout:\n{out}\nstderr:\n{err}");
    assert!(testset.join("manifest.json").is_file());
    let lr0 = Image::load_png(&testset.join("lr/im0.png")).unwrap();
    assert_eq!((lr0.height(), lr0.width()), (16, 16), "64/4");

    // train-stage2 against the frozen prior.
    let run2 = tmp.path().join("run2");
    let (code, out, err) = run(&[
        "train-stage2",
        "--data",
        &s(&src),
        "--prior",
        &s(&prior),
        "--out",
        &s(&run2),
        "--config",
        &s(&cfg),
        "--seed",
        "12",
    ]);
    assert_eq!(code, 0, "stdout:\n{out}\nstderr:\n{err}");
    let ckpt2 = run2.join("checkpoints/stage2_final.ckpt");
    assert!(ckpt2.is_file());
    assert!(run2.join("logs/stage2_loss.csv").is_file());
    assert!(run2.join("samples/sample_sr.png").is_file());

    // infer: output is exactly scale x the input dims.
    let sr_path = tmp.path().join("sr/im0.png");
    let (code, out, err) = run(&[
        "infer",
        "--checkpoint",
        &s(&ckpt2),
        "--input",
        &s(&testset.join("lr/im0.png")),
        "--scale",
        "4",
        "--out",
        &s(&sr_path),
    ]);
    assert_eq!(code, 0, "stdout:\n{out}\nstderr:\n{err}");
    let sr = Image::load_png(&sr_path).unwrap();
    assert_eq!((sr.height(), sr.width()), (64, 64));
    assert!(sr_path.with_extension("config.toml").is_file());
    assert!(sr_path.with_extension("log").is_file());

    // A wrong --scale is a validation failure.
    let (code, _, err) = run(&[
        "infer",
        "--checkpoint",
        &s(&ckpt2),
        "--input",
        &s(&testset.join("lr/im0.png")),
        "--scale",
        "2",
        "--out",
        &s(&sr_path),
    ]);
    assert_eq!(code, 1, "{err}");
    assert!(err.starts_with("error: config: "), "{err}");

    // eval: restored vs reference by matching file name.
    let eval_out = tmp.path().join("evalrun");
    let (code, out, err) = run(&[
        "eval",
        "--restored",
        &s(&sr_path.parent().unwrap().to_path_buf()),
        "--reference",
        &s(&testset.join("hr")),
        "--out",
        &s(&eval_out),
    ]);
    assert_eq!(code, 0, "stdout:\n{out}\nstderr:\n{err}");
    let report = std::fs::read_to_string(eval_out.join("reports/metrics.txt")).unwrap();
    assert!(report.contains("im0.png"), "{report}");
    assert!(report.contains("mean"), "{report}");
    assert!(out.contains("mean psnr"), "{out}");
}

#[test]
fn degrade_writes_image_plan_and_sidecars() {
    let tmp = tempfile::tempdir().unwrap();
    let hr_path = tmp.path().join("hr.png");
    texture(64, 64, 9).save_png(&hr_path).unwrap();
    let lr_path = tmp.path().join("out/lr.png");
    let (code, out, err) = run(&[
        "degrade",
        "--input",
        &s(&hr_path),
        "--out",
        &s(&lr_path),
        "--scale",
        "2",
        "--seed",
        "5",
    ]);
    assert_eq!(code, 0, "stdout:\n{out}\nstderr:\n{err}");
    let lr = Image::load_png(&lr_path).unwrap();
    assert_eq!((lr.height(), lr.width()), (32, 32));
    assert!(lr_path.with_extension("plan.json").is_file());
    assert!(lr_path.with_extension("config.toml").is_file());
    assert!(lr_path.with_extension("log").is_file());

    // Same seed reproduces the same LR bytes; a different seed needn't.
    let lr2_path = tmp.path().join("out/lr2.png");
    let (code, _, _) = run(&[
        "degrade",
        "--input",
        &s(&hr_path),
        "--out",
        &s(&lr2_path),
        "--scale",
        "2",
        "--seed",
        "5",
    ]);
    assert_eq!(code, 0);
    assert_eq!(
        std::fs::read(&lr_path).unwrap(),
        std::fs::read(&lr2_path).unwrap(),
        "same seed, same bytes"
    );
}
