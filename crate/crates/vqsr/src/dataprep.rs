//! Training-patch preparation: grid-crop source images, measure edge
//! activity with a Sobel filter, drop flat patches, and (for face corpora)
//! random resize-then-crop. Every kept patch is reproducible from the
//! manifest line that records it.

use crate::degrade::{derive_seed, resize, ResizeMode};
use crate::error::{Error, Result};
use crate::image::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Write};
use std::path::Path;

/// Default edge-variance threshold below which a patch is considered
/// textureless and dropped.
pub const SOBEL_VARIANCE_THRESHOLD: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub source: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub sobel_mu: f64,
    pub sobel_sigma2: f64,
    pub kept: bool,
}

/// Mean and variance of the Sobel gradient magnitude over the patch
/// interior (where the 3x3 stencil fits), measured on the 0-255 luma scale.
pub fn sobel_stats(patch: &Image) -> Result<(f64, f64)> {
    let (h, w) = (patch.height(), patch.width());
    if h < 3 || w < 3 {
        return Err(Error::Input(format!("sobel needs at least 3x3, got {h}x{w}")));
    }
    let luma = patch.luma_bt601()?;
    let at = |y: usize, x: usize| luma[y * w + x] as f64 * 255.0;
    let n = (h - 2) * (w - 2);
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = -at(y - 1, x - 1) + at(y - 1, x + 1) - 2.0 * at(y, x - 1)
                + 2.0 * at(y, x + 1)
                - at(y + 1, x - 1)
                + at(y + 1, x + 1);
            let gy = -at(y - 1, x - 1) - 2.0 * at(y - 1, x) - at(y - 1, x + 1)
                + at(y + 1, x - 1)
                + 2.0 * at(y + 1, x)
                + at(y + 1, x + 1);
            let mag = (gx * gx + gy * gy).sqrt();
            sum += mag;
            sumsq += mag * mag;
        }
    }
    let mu = sum / n as f64;
    let sigma2 = (sumsq / n as f64 - mu * mu).max(0.0);
    Ok((mu, sigma2))
}

/// Non-overlapping grid crops of `size` x `size`, with their edge stats.
/// An image smaller than one tile yields an empty list.
pub fn crop_patches(source: &str, img: &Image, size: usize) -> Result<Vec<(PatchRecord, Image)>> {
    if size < 3 {
        return Err(Error::Config(format!("patch size {size} too small for edge stats")));
    }
    let rows = img.height() / size;
    let cols = img.width() / size;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = (c * size, r * size);
            let patch = img.crop(x, y, size, size)?;
            let (sobel_mu, sobel_sigma2) = sobel_stats(&patch)?;
            out.push((
                PatchRecord {
                    source: source.to_string(),
                    x,
                    y,
                    size,
                    sobel_mu,
                    sobel_sigma2,
                    kept: true,
                },
                patch,
            ));
        }
    }
    Ok(out)
}

/// Keep iff sigma^2 >= threshold: the drop rule is written as "variance
/// strictly below the threshold", so the boundary value stays.
pub fn filter_patches(
    records: Vec<PatchRecord>,
    threshold: f64,
) -> (Vec<PatchRecord>, Vec<PatchRecord>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for mut r in records {
        if r.sobel_sigma2 >= threshold {
            r.kept = true;
            kept.push(r);
        } else {
            r.kept = false;
            dropped.push(r);
        }
    }
    (kept, dropped)
}

/// Face-corpus variant: resize the whole image by a factor drawn from
/// [0.5, 1.0], then take one random crop. At the lower bound a 1024 input
/// becomes exactly one 512 tile, so the crop offset collapses to (0, 0).
pub fn face_resize_crop(
    img: &Image,
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Image, PatchRecord)> {
    if img.height() < 2 * patch || img.width() < 2 * patch {
        return Err(Error::Input(format!(
            "face crop needs at least {0}x{0}, got {1}x{2}",
            2 * patch,
            img.height(),
            img.width()
        )));
    }
    let s = rng.gen_range(0.5..=1.0);
    let nh = (img.height() as f64 * s).round() as usize;
    let nw = (img.width() as f64 * s).round() as usize;
    debug_assert!(nh >= patch && nw >= patch, "scale bounds guarantee room for one tile");
    let resized = resize(img, nh, nw, ResizeMode::Bicubic)?;
    let y = rng.gen_range(0..=(nh - patch));
    let x = rng.gen_range(0..=(nw - patch));
    let tile = resized.crop(x, y, patch, patch)?;
    let (sobel_mu, sobel_sigma2) = sobel_stats(&tile)?;
    Ok((
        tile,
        PatchRecord {
            source: String::new(),
            x,
            y,
            size: patch,
            sobel_mu,
            sobel_sigma2,
            kept: true,
        },
    ))
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

const MANIFEST_HEADER: &str = "source\tx\ty\tsize\tsobel_mu\tsobel_sigma2\tkept";

pub fn write_manifest(path: &Path, records: &[PatchRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{MANIFEST_HEADER}").map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.source, r.x, r.y, r.size, r.sobel_mu, r.sobel_sigma2, r.kept as u8
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<PatchRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = std::io::BufReader::new(f).lines();
    match lines.next() {
        Some(Ok(h)) if h == MANIFEST_HEADER => {}
        _ => return Err(Error::Input(format!("{}: not a patch manifest", path.display()))),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(Error::Input(format!(
                "{}: line {} has {} fields, expected 7",
                path.display(),
                i + 2,
                fields.len()
            )));
        }
        let parse_err =
            |what: &str| Error::Input(format!("{}: line {}: bad {what}", path.display(), i + 2));
        out.push(PatchRecord {
            source: fields[0].to_string(),
            x: fields[1].parse().map_err(|_| parse_err("x"))?,
            y: fields[2].parse().map_err(|_| parse_err("y"))?,
            size: fields[3].parse().map_err(|_| parse_err("size"))?,
            sobel_mu: fields[4].parse().map_err(|_| parse_err("sobel_mu"))?,
            sobel_sigma2: fields[5].parse().map_err(|_| parse_err("sobel_sigma2"))?,
            kept: fields[6] == "1",
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Directory pipeline
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PrepOptions {
    pub patch_size: usize,
    pub variance_threshold: f64,
    /// Face mode: one random resize-crop per image instead of grid tiling.
    pub face_mode: bool,
    pub master_seed: u64,
}

impl Default for PrepOptions {
    fn default() -> Self {
        PrepOptions {
            patch_size: 512,
            variance_threshold: SOBEL_VARIANCE_THRESHOLD,
            face_mode: false,
            master_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PrepSummary {
    pub images: usize,
    pub cropped: usize,
    pub kept: usize,
    pub dropped: usize,
}

/// Tile (or face-crop) every PNG under `input_dir`, write kept patches and
/// the full manifest (kept and dropped) under `output_dir`.
pub fn prepare_dir(input_dir: &Path, output_dir: &Path, opts: &PrepOptions) -> Result<PrepSummary> {
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let mut names: Vec<_> = std::fs::read_dir(input_dir)
        .map_err(|e| Error::io(input_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    names.sort();

    let mut summary = PrepSummary::default();
    let mut all_records = Vec::new();
    for (img_idx, path) in names.iter().enumerate() {
        let img = Image::load_png(path)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("img{img_idx}"));
        summary.images += 1;

        let tiles: Vec<(PatchRecord, Image)> = if opts.face_mode {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(opts.master_seed, img_idx as u64));
            let (tile, mut rec) = face_resize_crop(&img, opts.patch_size, &mut rng)?;
            rec.source = stem.clone();
            vec![(rec, tile)]
        } else {
            crop_patches(&stem, &img, opts.patch_size)?
        };
        summary.cropped += tiles.len();

        for (mut rec, tile) in tiles {
            rec.kept = rec.sobel_sigma2 >= opts.variance_threshold;
            if rec.kept {
                summary.kept += 1;
                let name = format!("{stem}_{}_{}.png", rec.x, rec.y);
                tile.save_png(&output_dir.join(name))?;
            } else {
                summary.dropped += 1;
            }
            all_records.push(rec);
        }
    }
    write_manifest(&output_dir.join("manifest.tsv"), &all_records)?;
    Ok(summary)
}
