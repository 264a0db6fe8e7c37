//! Throwaway timing probe for sizing the acceptance-test budgets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use vqsr::image::Image;
use vqsr::models::ModelConfig;
use vqsr::train::{train_stage1, train_stage2, Stage1Config, Stage2Config};

fn gratings(n: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let fx = rng.gen_range(0.2..2.0);
            let fy = rng.gen_range(0.2..2.0);
            let phase = rng.gen_range(0.0..6.28);
            let mut img = Image::new(3, size, size);
            for c in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        let t = (fx * x as f64 + fy * y as f64 + phase + c as f64).sin();
                        img.set(c, y, x, (0.5 + 0.45 * t) as f32);
                    }
                }
            }
            img
        })
        .collect()
}

#[test]
#[ignore]
fn overfit_probe() {
    // Single-image overfit trajectory: PSNR vs steps at lr 1e-3.
    let img = gratings(1, 32, 77).remove(0);
    let cfg = ModelConfig::toy(8, 32);
    let mut tcfg = Stage1Config::new(1500, 5);
    tcfg.batch_size = 1;
    tcfg.adam.lr = 1e-3;
    tcfg.weights.semantic_gamma = 0.0;
    tcfg.weights.perceptual = 0.0;
    tcfg.adversarial_warmup_steps = u64::MAX;
    let t0 = Instant::now();
    let state = train_stage1(std::slice::from_ref(&img), &cfg, &tcfg).unwrap();
    let x = Image::batch_tensor(std::slice::from_ref(&img)).unwrap();
    let z = state.encoder.encode(&x).unwrap();
    let q = vqsr::codebook::quantize(&z, state.codebook.table()).unwrap();
    let y = state.decoder.decode(&q.quantized).unwrap();
    let mut recon = Image::from_tensor(&y, 0).unwrap();
    recon.clamp01();
    let psnr = vqsr::metrics::psnr(&recon, &img, 1.0).unwrap();
    println!(
        "overfit: 1500 steps in {:.1}s, psnr {psnr:.2} dB, l1 tail {:?}",
        t0.elapsed().as_secs_f64(),
        state.history.trailing_window_mean("l1", 50, 0)
    );
}

#[test]
#[ignore]
fn convergence_probe() {
    // Criterion-5 style: 500 patches, K=64, how fast does l1 halve?
    let data = gratings(500, 32, 2);
    let cfg = ModelConfig::toy(8, 64);
    for (batch, label) in [(4usize, "batch4"), (2, "batch2")] {
        let mut tcfg = Stage1Config::new(2000, 11);
        tcfg.batch_size = batch;
        tcfg.adversarial_warmup_steps = u64::MAX;
        let t0 = Instant::now();
        let state = train_stage1(&data, &cfg, &tcfg).unwrap();
        let series = state.history.series("l1");
        let first: f64 = series[..200].iter().map(|(_, v)| v).sum::<f64>() / 200.0;
        let last: f64 = series[series.len() - 200..].iter().map(|(_, v)| v).sum::<f64>() / 200.0;
        println!(
            "{label}: 2000 steps in {:.1}s, first200 {first:.4}, last200 {last:.4}, ratio {:.3}",
            t0.elapsed().as_secs_f64(),
            last / first
        );
    }
}

fn texture_family(n: usize, size: usize, seed: u64) -> Vec<Image> {
    // Low-dimensional family: 8 orientations x 4 frequencies, random phase,
    // fixed high contrast, gray (same pattern on all channels), half overlaid
    // with a coarse checker.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let ang = (rng.gen_range(0..8) as f64) * std::f64::consts::PI / 8.0;
            let freq = [0.4, 0.8, 1.2, 1.8][rng.gen_range(0..4)];
            let phase = rng.gen_range(0.0..6.28);
            let amp = 0.45;
            let checker = rng.gen_bool(0.5);
            let cell = [4usize, 8][rng.gen_range(0..2)];
            let mut img = Image::new(3, size, size);
            for y in 0..size {
                for x in 0..size {
                    let u = ang.cos() * x as f64 + ang.sin() * y as f64;
                    let mut v = 0.5 + amp * (freq * u + phase).sin();
                    if checker && ((x / cell) + (y / cell)) % 2 == 0 {
                        v = 1.0 - v;
                    }
                    for c in 0..3 {
                        img.set(c, y, x, v as f32);
                    }
                }
            }
            img
        })
        .collect()
}

/// Patch family with a dominant, quickly learnable factor (a per-patch
/// brightness level) plus oriented low-frequency texture.
fn shaded_family(n: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mu = [0.2f64, 0.5, 0.8][rng.gen_range(0..3)];
            let ang = (rng.gen_range(0..4) as f64) * std::f64::consts::PI / 4.0;
            let freq = [0.3, 0.7][rng.gen_range(0..2)];
            let phase = rng.gen_range(0.0..6.28);
            let mut img = Image::new(3, size, size);
            for y in 0..size {
                for x in 0..size {
                    let u = ang.cos() * x as f64 + ang.sin() * y as f64;
                    let v = mu + 0.2 * (freq * u + phase).sin();
                    for c in 0..3 {
                        img.set(c, y, x, v as f32);
                    }
                }
            }
            img
        })
        .collect()
}

/// Binary block patterns whose cells align with the 8x downsampled latent
/// grid, so the code vocabulary maps directly onto tile appearances.
fn block_family(n: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let cell = [4usize, 8][rng.gen_range(0..2)];
            let grid = size / cell;
            // Completely uniform patches are rejected, mirroring the edge
            // filter real training data passes through.
            let values: Vec<f32> = loop {
                let v: Vec<f32> =
                    (0..grid * grid).map(|_| if rng.gen_bool(0.5) { 0.9 } else { 0.1 }).collect();
                if v.iter().any(|x| *x != v[0]) {
                    break v;
                }
            };
            let mut img = Image::new(3, size, size);
            for y in 0..size {
                for x in 0..size {
                    let v = values[(y / cell) * grid + x / cell];
                    for c in 0..3 {
                        img.set(c, y, x, v);
                    }
                }
            }
            img
        })
        .collect()
}

/// Colored texture family: per-channel phase offsets and random contrast.
fn colored_family(n: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let ang = (rng.gen_range(0..8) as f64) * std::f64::consts::PI / 8.0;
            let freq = [0.4, 0.8, 1.2, 1.8][rng.gen_range(0..4)];
            let phase = rng.gen_range(0.0..6.28);
            let amp = rng.gen_range(0.25..0.45);
            let checker = rng.gen_bool(0.5);
            let cell = [4usize, 8][rng.gen_range(0..2)];
            let mut img = Image::new(3, size, size);
            for c in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        let u = ang.cos() * x as f64 + ang.sin() * y as f64;
                        let mut v = 0.5 + amp * (freq * u + phase + 0.7 * c as f64).sin();
                        if checker && ((x / cell) + (y / cell)) % 2 == 0 {
                            v = 1.0 - v;
                        }
                        img.set(c, y, x, v as f32);
                    }
                }
            }
            img
        })
        .collect()
}

/// Same block patterns restricted to one cell size aligned with the latent
/// grid (8 px cell = exactly one latent position per cell).
fn block8_family(n: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = 8usize;
    let grid = size / cell;
    (0..n)
        .map(|_| {
            let values: Vec<f32> = loop {
                let v: Vec<f32> =
                    (0..grid * grid).map(|_| if rng.gen_bool(0.5) { 0.9 } else { 0.1 }).collect();
                if v.iter().any(|x| *x != v[0]) {
                    break v;
                }
            };
            let mut img = Image::new(3, size, size);
            for y in 0..size {
                for x in 0..size {
                    let v = values[(y / cell) * grid + x / cell];
                    for c in 0..3 {
                        img.set(c, y, x, v);
                    }
                }
            }
            img
        })
        .collect()
}

#[test]
#[ignore]
fn variant_probe() {
    let cfg = ModelConfig::toy(8, 64);
    let blocks = block_family(500, 32, 2);
    let blocks8 = block8_family(500, 32, 2);
    let cases: Vec<(&str, &Vec<Image>, f64, usize)> = vec![
        ("blocks48", &blocks, 3e-4, 4),
        ("blocks8", &blocks8, 1e-3, 2),
        ("blocks8", &blocks8, 3e-4, 4),
    ];
    for (label, data, lr, batch) in cases {
        let mut tcfg = Stage1Config::new(2000, 11);
        tcfg.batch_size = batch;
        tcfg.adam.lr = lr;
        tcfg.adversarial_warmup_steps = u64::MAX;
        let t0 = Instant::now();
        let state = train_stage1(data, &cfg, &tcfg).unwrap();
        let series = state.history.series("l1");
        let first: f64 = series[..200].iter().map(|(_, v)| v).sum::<f64>() / 200.0;
        let last: f64 = series[series.len() - 200..].iter().map(|(_, v)| v).sum::<f64>() / 200.0;
        println!(
            "{label} lr {lr:.0e} batch {batch}: {:.0}s first200 {first:.4} last200 {last:.4} ratio {:.3}",
            t0.elapsed().as_secs_f64(),
            last / first
        );
    }
}

#[test]
#[ignore]
fn codebook_trend_probe() {
    // Criterion-7 rehearsal: K in {16, 64, 256}, same data and schedule,
    // final L1 should not increase with K.
    let data = texture_family(500, 32, 2);
    for seed in [21u64, 22, 23] {
        let mut finals = Vec::new();
        for k in [16usize, 64, 256] {
            let cfg = ModelConfig::toy(8, k);
            let mut tcfg = Stage1Config::new(800, seed);
            tcfg.batch_size = 2;
            tcfg.adversarial_warmup_steps = u64::MAX;
            let t0 = Instant::now();
            let state = train_stage1(&data, &cfg, &tcfg).unwrap();
            let last = state.history.trailing_window_mean("l1", 200, 0).unwrap();
            finals.push((k, last, t0.elapsed().as_secs_f64()));
        }
        println!(
            "seed {seed}: {}",
            finals
                .iter()
                .map(|(k, l, s)| format!("K={k} l1={l:.4} ({s:.0}s)"))
                .collect::<Vec<_>>()
                .join("  ")
        );
    }
}

#[test]
#[ignore]
fn shortcut_probe() {
    // Criterion-8 rehearsal: restoration trains better with the shortcut
    // injection than without, measured on the feature-matching term.
    let data = texture_family(500, 32, 2);
    let cfg = ModelConfig::toy(8, 64);
    let mut pcfg = Stage1Config::new(500, 3);
    pcfg.batch_size = 2;
    pcfg.adversarial_warmup_steps = u64::MAX;
    let t0 = Instant::now();
    let prior = train_stage1(&data, &cfg, &pcfg).unwrap().to_checkpoint().unwrap();
    println!("prior: 500 steps in {:.0}s", t0.elapsed().as_secs_f64());
    for seed in [31u64, 32, 33] {
        let mut finals = Vec::new();
        for shortcuts in [true, false] {
            let mut t2 = Stage2Config::new(400, seed);
            t2.batch_size = 2;
            t2.hr_patch = 32;
            t2.use_shortcuts = shortcuts;
            t2.adversarial_warmup_steps = u64::MAX;
            t2.degrade.kernel_size_range = (7, 9);
            t2.degrade.mid_resize_range = (0.6, 1.0);
            let t0 = Instant::now();
            let s2 = train_stage2(&data, &cfg, &prior, &t2).unwrap();
            let fema = s2.history.trailing_window_mean("fema", 100, 0).unwrap();
            let l1 = s2.history.trailing_window_mean("l1", 100, 0).unwrap();
            finals.push((shortcuts, fema, l1, t0.elapsed().as_secs_f64()));
        }
        println!(
            "seed {seed}: {}",
            finals
                .iter()
                .map(|(sc, f, l, s)| format!("shortcuts={sc} fema={f:.4} l1={l:.4} ({s:.0}s)"))
                .collect::<Vec<_>>()
                .join("  ")
        );
    }
}

#[test]
#[ignore]
fn timing_probe() {
    let data = gratings(50, 32, 1);
    let cfg = ModelConfig::toy(8, 64);

    for batch in [1usize, 4, 8] {
        let mut tcfg = Stage1Config::new(50, 7);
        tcfg.batch_size = batch;
        tcfg.adversarial_warmup_steps = 50;
        let t0 = Instant::now();
        let state = train_stage1(&data, &cfg, &tcfg).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        println!(
            "stage1 batch={batch}: 50 steps in {dt:.2}s ({:.1} ms/step), l1 last {:?}",
            dt * 20.0,
            state.history.trailing_window_mean("l1", 5, 0)
        );
    }

    // Stage 2 probe: tiny prior, then a few stage-2 steps.
    let mut pcfg = Stage1Config::new(20, 3);
    pcfg.batch_size = 2;
    pcfg.adversarial_warmup_steps = 20;
    let prior = train_stage1(&data, &cfg, &pcfg).unwrap().to_checkpoint().unwrap();
    let hr = gratings(20, 32, 9);
    for batch in [1usize, 4] {
        let mut t2 = Stage2Config::new(20, 5);
        t2.batch_size = batch;
        t2.hr_patch = 32;
        t2.adversarial_warmup_steps = 20;
        // Small patches need small blur kernels and gentle mid-resizes.
        t2.degrade.kernel_size_range = (7, 9);
        t2.degrade.mid_resize_range = (0.6, 1.0);
        let t0 = Instant::now();
        let s2 = train_stage2(&hr, &cfg, &prior, &t2).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        println!(
            "stage2 batch={batch}: 20 steps in {dt:.2}s ({:.1} ms/step), fema last {:?}",
            dt * 50.0,
            s2.history.trailing_window_mean("fema", 5, 0)
        );
    }
}
