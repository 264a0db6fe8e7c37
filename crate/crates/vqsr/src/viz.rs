//! Codebook visualization: decode single codes as texture tiles, decode
//! assembled index grids, per-label code-usage histograms, and contact
//! sheets with index sidecars.

use crate::codebook::{quantize, usage_histogram, Codebook};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::models::{Decoder, HrEncoder};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// A decoded image plus how much of it fell outside [0,1] before clipping.
#[derive(Clone, Debug)]
pub struct Rendering {
    pub image: Image,
    pub clipped_fraction: f64,
}

impl Rendering {
    /// Renderings are flagged when more than 1% of pixels needed clipping.
    pub fn heavily_clipped(&self) -> bool {
        self.clipped_fraction > 0.01
    }
}

fn to_rendering(t: &Tensor<f32>) -> Result<Rendering> {
    let clipped = t.iter().filter(|v| **v < 0.0 || **v > 1.0).count();
    let mut image = Image::from_tensor(t, 0)?;
    image.clamp01();
    Ok(Rendering { image, clipped_fraction: clipped as f64 / t.numel() as f64 })
}

fn latent_from_indices(cb: &Codebook, grid: &[Vec<usize>]) -> Result<Tensor<f32>> {
    let rows = grid.len();
    if rows == 0 {
        return Err(Error::Input("index grid is empty".into()));
    }
    let cols = grid[0].len();
    if cols == 0 {
        return Err(Error::Input("index grid has empty rows".into()));
    }
    for (r, row) in grid.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::Input(format!(
                "ragged index grid: row 0 has {cols} entries, row {r} has {}",
                row.len()
            )));
        }
        for &idx in row {
            if idx >= cb.len() {
                return Err(Error::Input(format!(
                    "code index {idx} out of range for a {}-entry codebook",
                    cb.len()
                )));
            }
        }
    }
    let n_z = cb.dim();
    let mut z = Tensor::zeros(vec![1, n_z, rows, cols]);
    for (r, row) in grid.iter().enumerate() {
        for (c, &idx) in row.iter().enumerate() {
            let code = cb.code(idx);
            for (ch, &v) in code.iter().enumerate() {
                z.data_mut()[(ch * rows + r) * cols + c] = v;
            }
        }
    }
    Ok(z)
}

/// Tiles one code over a t x t latent map and decodes it; the output is
/// (t * decoder factor) square.
pub fn decode_single_code(
    cb: &Codebook,
    dec: &Decoder,
    index: usize,
    tile_t: usize,
) -> Result<Rendering> {
    if tile_t == 0 {
        return Err(Error::Input("tile size must be >= 1".into()));
    }
    let grid = vec![vec![index; tile_t]; tile_t];
    decode_code_combo(cb, dec, &grid)
}

/// Assembles a latent map from an index grid and decodes it.
pub fn decode_code_combo(cb: &Codebook, dec: &Decoder, grid: &[Vec<usize>]) -> Result<Rendering> {
    let z = latent_from_indices(cb, grid)?;
    to_rendering(&dec.decode(&z)?)
}

/// Normalized code-usage distribution for one labeled image group.
#[derive(Clone, Debug)]
pub struct LabelHistogram {
    pub label: String,
    /// Probability per code; sums to 1.
    pub histogram: Vec<f64>,
    /// Images that contributed.
    pub count: usize,
}

/// Per-label code-usage histograms. Empty groups are skipped and reported in
/// the returned warning list.
pub fn category_code_histogram(
    groups: &[(String, Vec<Image>)],
    enc: &HrEncoder,
    cb: &Codebook,
) -> Result<(Vec<LabelHistogram>, Vec<String>)> {
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for (label, images) in groups {
        if images.is_empty() {
            warnings.push(format!("label {label}: empty group, skipped"));
            continue;
        }
        let mut counts = vec![0u64; cb.len()];
        for img in images {
            let x = Image::batch_tensor(std::slice::from_ref(img))?;
            let zhat = enc.encode(&x)?;
            let q = quantize(&zhat, cb.table())?;
            for (i, c) in usage_histogram(&q.indices, cb.len())?.iter().enumerate() {
                counts[i] += c;
            }
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            warnings.push(format!("label {label}: no latent positions, skipped"));
            continue;
        }
        let histogram = counts.iter().map(|&c| c as f64 / total as f64).collect();
        out.push(LabelHistogram { label: label.clone(), histogram, count: images.len() });
    }
    Ok((out, warnings))
}

/// Draws a rows x cols index grid from a usage distribution and decodes it.
/// Deterministic under `seed`.
pub fn sample_combo_from_histogram(
    cb: &Codebook,
    dec: &Decoder,
    histogram: &[f64],
    rows: usize,
    cols: usize,
    seed: u64,
) -> Result<Rendering> {
    if histogram.len() != cb.len() {
        return Err(Error::shape("histogram", cb.len(), histogram.len()));
    }
    let total: f64 = histogram.iter().sum();
    if !(total.is_finite() && total > 0.0) || histogram.iter().any(|&p| p < 0.0) {
        return Err(Error::Input("histogram is not a usable distribution".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = vec![vec![0usize; cols]; rows];
    for row in &mut grid {
        for cell in row.iter_mut() {
            let draw = rng.gen_range(0.0..total);
            let mut acc = 0.0;
            let mut pick = histogram.len() - 1;
            for (i, &p) in histogram.iter().enumerate() {
                acc += p;
                if draw < acc {
                    pick = i;
                    break;
                }
            }
            *cell = pick;
        }
    }
    decode_code_combo(cb, dec, &grid)
}

/// Tiles same-sized images into a grid with a mid-gray gutter.
pub fn contact_sheet(tiles: &[Image], columns: usize, gap: usize) -> Result<Image> {
    if tiles.is_empty() || columns == 0 {
        return Err(Error::Input("contact sheet needs tiles and at least one column".into()));
    }
    let (c, th, tw) = (tiles[0].channels(), tiles[0].height(), tiles[0].width());
    for t in tiles {
        if (t.channels(), t.height(), t.width()) != (c, th, tw) {
            return Err(Error::shape(
                "contact sheet tiles",
                format!("{c}x{th}x{tw}"),
                format!("{}x{}x{}", t.channels(), t.height(), t.width()),
            ));
        }
    }
    let rows = tiles.len().div_ceil(columns);
    let out_h = rows * th + gap * (rows - 1);
    let out_w = columns * tw + gap * (columns.min(tiles.len()) - 1).max(0);
    let mut sheet = Image::new(c, out_h, out_w);
    for v in sheet.data_mut() {
        *v = 0.5;
    }
    for (i, tile) in tiles.iter().enumerate() {
        let (r, col) = (i / columns, i % columns);
        let (y0, x0) = (r * (th + gap), col * (tw + gap));
        for ch in 0..c {
            for y in 0..th {
                for x in 0..tw {
                    sheet.set(ch, y0 + y, x0 + x, tile.get(ch, y, x));
                }
            }
        }
    }
    Ok(sheet)
}

/// Renders every code as a tiled texture patch, writes one contact sheet PNG
/// plus a text sidecar mapping sheet position to code index (and flagging
/// heavy clipping).
pub fn write_code_atlas(
    cb: &Codebook,
    dec: &Decoder,
    out_dir: &Path,
    tile_t: usize,
    columns: usize,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut tiles = Vec::with_capacity(cb.len());
    let mut sidecar = String::from("row\tcol\tcode\tclipped_fraction\n");
    for idx in 0..cb.len() {
        let r = decode_single_code(cb, dec, idx, tile_t)?;
        sidecar.push_str(&format!(
            "{}\t{}\t{}\t{:.4}{}\n",
            idx / columns,
            idx % columns,
            idx,
            r.clipped_fraction,
            if r.heavily_clipped() { "\tCLIPPED" } else { "" }
        ));
        tiles.push(r.image);
    }
    let sheet = contact_sheet(&tiles, columns, 2)?;
    let png = out_dir.join(format!("codes_t{tile_t}.png"));
    let txt = out_dir.join(format!("codes_t{tile_t}.txt"));
    sheet.save_png(&png)?;
    std::fs::write(&txt, sidecar).map_err(|e| Error::io(&txt, e))?;
    Ok((png, txt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;
    use rand::SeedableRng;

    fn toy_parts() -> (Codebook, Decoder, HrEncoder) {
        let cfg = ModelConfig::toy(8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let cb = Codebook::init_uniform(cfg.codebook_size, cfg.n_z, &mut rng).unwrap();
        let dec = Decoder::new(&cfg, &mut rng).unwrap();
        let enc = HrEncoder::new(&cfg, &mut rng).unwrap();
        (cb, dec, enc)
    }

    #[test]
    fn single_code_tile_sizes_follow_the_decoder_factor() {
        let (cb, dec, _) = toy_parts();
        let r1 = decode_single_code(&cb, &dec, 3, 1).unwrap();
        assert_eq!((r1.image.height(), r1.image.width()), (8, 8));
        let r4 = decode_single_code(&cb, &dec, 3, 4).unwrap();
        assert_eq!((r4.image.height(), r4.image.width()), (32, 32));
        let again = decode_single_code(&cb, &dec, 3, 1).unwrap();
        assert_eq!(r1.image.data(), again.image.data(), "decoding is deterministic");
        assert!(decode_single_code(&cb, &dec, 16, 1).is_err(), "index out of range");
        assert!(decode_single_code(&cb, &dec, 0, 0).is_err(), "zero tile size");
    }

    #[test]
    fn combo_grid_sizes_match_the_quoted_figures() {
        let (cb, dec, _) = toy_parts();
        let grid8: Vec<Vec<usize>> = (0..8).map(|r| (0..8).map(|c| (r + c) % 16).collect()).collect();
        let r = decode_code_combo(&cb, &dec, &grid8).unwrap();
        assert_eq!((r.image.height(), r.image.width()), (64, 64));

        let grid16: Vec<Vec<usize>> =
            (0..16).map(|r| (0..16).map(|c| (r * c) % 16).collect()).collect();
        let r = decode_code_combo(&cb, &dec, &grid16).unwrap();
        assert_eq!((r.image.height(), r.image.width()), (128, 128));
    }

    #[test]
    fn uniform_combo_reproduces_single_code() {
        let (cb, dec, _) = toy_parts();
        let combo = decode_code_combo(&cb, &dec, &vec![vec![5; 3]; 3]).unwrap();
        let single = decode_single_code(&cb, &dec, 5, 3).unwrap();
        assert_eq!(combo.image.data(), single.image.data());
    }

    #[test]
    fn ragged_grids_rejected() {
        let (cb, dec, _) = toy_parts();
        let ragged = vec![vec![0, 1], vec![2]];
        assert!(decode_code_combo(&cb, &dec, &ragged).is_err());
    }

    #[test]
    fn clipping_fraction_counts_out_of_range_pixels() {
        let mut t = Tensor::zeros(vec![1, 3, 4, 4]);
        t.data_mut()[0] = -0.5;
        t.data_mut()[1] = 1.5;
        let r = to_rendering(&t).unwrap();
        assert!((r.clipped_fraction - 2.0 / 48.0).abs() < 1e-12);
        assert!(r.heavily_clipped());
        assert_eq!(r.image.data()[0], 0.0);
        assert_eq!(r.image.data()[1], 1.0);
    }

    #[test]
    fn histograms_are_probability_vectors_and_reduce_to_usage_counts() {
        let (cb, _, enc) = toy_parts();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut img = Image::new(3, 32, 32);
        for v in img.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let groups = vec![
            ("a".to_string(), vec![img.clone()]),
            ("empty".to_string(), vec![]),
            ("b".to_string(), vec![img.clone()]),
        ];
        let (hists, warnings) = category_code_histogram(&groups, &enc, &cb).unwrap();
        assert_eq!(hists.len(), 2, "empty group skipped");
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("empty"));
        for h in &hists {
            let sum: f64 = h.histogram.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "label {}: sum {sum}", h.label);
        }
        assert_eq!(hists[0].histogram, hists[1].histogram, "identical groups match");

        // Single image: histogram equals that image's usage counts normalized.
        let x = Image::batch_tensor(std::slice::from_ref(&img)).unwrap();
        let q = quantize(&enc.encode(&x).unwrap(), cb.table()).unwrap();
        let counts = usage_histogram(&q.indices, cb.len()).unwrap();
        let total: u64 = counts.iter().sum();
        for (p, c) in hists[0].histogram.iter().zip(&counts) {
            assert!((p - *c as f64 / total as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_combos_are_deterministic_under_a_seed() {
        let (cb, dec, _) = toy_parts();
        let mut hist = vec![0.0; 16];
        hist[2] = 0.5;
        hist[7] = 0.25;
        hist[11] = 0.25;
        let a = sample_combo_from_histogram(&cb, &dec, &hist, 4, 4, 9).unwrap();
        let b = sample_combo_from_histogram(&cb, &dec, &hist, 4, 4, 9).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        let c = sample_combo_from_histogram(&cb, &dec, &hist, 4, 4, 10).unwrap();
        assert_eq!((c.image.height(), c.image.width()), (32, 32));
    }

    #[test]
    fn contact_sheet_geometry_and_atlas_outputs() {
        let tiles: Vec<Image> = (0..5)
            .map(|i| {
                let mut t = Image::new(3, 8, 8);
                for v in t.data_mut() {
                    *v = i as f32 / 5.0;
                }
                t
            })
            .collect();
        let sheet = contact_sheet(&tiles, 3, 2).unwrap();
        // 2 rows of 8px + one 2px gap; 3 cols of 8px + two 2px gaps.
        assert_eq!((sheet.height(), sheet.width()), (18, 28));

        let (cb, dec, _) = toy_parts();
        let dir = tempfile::tempdir().unwrap();
        let (png, txt) = write_code_atlas(&cb, &dec, dir.path(), 1, 8).unwrap();
        assert!(png.exists());
        let text = std::fs::read_to_string(&txt).unwrap();
        assert_eq!(text.lines().count(), 17, "header + one line per code");
        let loaded = Image::load_png(&png).unwrap();
        // 16 codes in 8 columns: 2 rows of 8px tiles + 2px gap.
        assert_eq!((loaded.height(), loaded.width()), (18, 78));
    }
}
