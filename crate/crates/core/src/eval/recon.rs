//! Reconstruction grids: original | masked | reconstruction, one row per
//! (image, ratio).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{pgm, BACKGROUND_LEVEL};
use crate::error::{Error, Result};
use crate::image::TactileImage;
use crate::masking::{gather_visible, sample_mask, MaskPlan};
use crate::model::{decode_latent, encode_tokens, ModelParams};
use crate::patching::{patchify, unpatchify, PatchGrid};
use crate::seed;
use crate::tensor::Tensor;

/// Fill value for hidden patches in the middle column.
pub const MASK_FILL: f64 = BACKGROUND_LEVEL;
pub const GAP: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconStats {
    pub image: usize,
    pub ratio: f64,
    pub n_masked: usize,
    /// Mean squared error over masked pixels; `None` when nothing is masked.
    pub masked_mse: Option<f64>,
    /// Same pixels predicted by the image's mean intensity.
    pub baseline_mse: Option<f64>,
}

/// The three tiles of one grid row.
#[derive(Clone, Debug)]
pub struct ReconTiles {
    pub plan: MaskPlan,
    pub original: Vec<f64>,
    pub masked: Vec<f64>,
    pub reconstruction: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ReconGrid {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub tile_height: usize,
    pub tile_width: usize,
    pub stats: Vec<ReconStats>,
    pub tiles: Vec<ReconTiles>,
}

impl ReconGrid {
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        pgm::write(path, self.width, self.height, &self.pixels)
    }

    /// Top-left corner of tile `col` in grid row `row`.
    pub fn tile_origin(&self, row: usize, col: usize) -> (usize, usize) {
        (row * (self.tile_height + GAP), col * (self.tile_width + GAP))
    }
}

fn replace_masked(grid: &PatchGrid<f64>, plan: &MaskPlan, fill: impl Fn(usize) -> Vec<f64>) -> Result<PatchGrid<f64>> {
    let (n, d) = (grid.n_patches(), grid.patch_dim());
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        if plan.is_masked(i) {
            data.extend(fill(i));
        } else {
            data.extend_from_slice(grid.token(i));
        }
    }
    Ok(PatchGrid { tokens: Tensor::new(vec![n, d], data)?, ..grid.clone() })
}

/// Masks `img` with `plan`, reconstructs, and composites: visible patches
/// are copied from the input, masked ones come from the decoder (clamped to
/// the pixel range).
pub fn reconstruct(params: &ModelParams<f64>, img: &TactileImage, plan: &MaskPlan) -> Result<ReconTiles> {
    let grid = patchify(img, params.config.patch_size)?;
    let (h, w, c) = (img.height, img.width, img.channels);
    let d = grid.patch_dim();
    let masked = replace_masked(&grid, plan, |_| vec![MASK_FILL; d])?;
    let recon = if plan.masked_idx.is_empty() {
        grid.clone()
    } else {
        let latent = encode_tokens(params, &gather_visible(&grid, plan)?, &plan.visible_idx)?;
        let out = decode_latent(params, &latent, plan)?;
        replace_masked(&grid, plan, |i| out.row(i).iter().map(|v| v.clamp(0.0, 1.0)).collect())?
    };
    Ok(ReconTiles {
        plan: plan.clone(),
        original: img.pixels.clone(),
        masked: unpatchify(&masked, h, w, c)?,
        reconstruction: unpatchify(&recon, h, w, c)?,
    })
}

fn stats(img: &TactileImage, tiles: &ReconTiles, p: usize, index: usize, ratio: f64) -> ReconStats {
    let n = tiles.original.len() as f64;
    let mean = tiles.original.iter().sum::<f64>() / n;
    let gc = img.width / p;
    let (mut err, mut base, mut count) = (0.0, 0.0, 0usize);
    for y in 0..img.height {
        for x in 0..img.width {
            if !tiles.plan.is_masked((y / p) * gc + x / p) {
                continue;
            }
            let i = y * img.width + x;
            err += (tiles.reconstruction[i] - tiles.original[i]).powi(2);
            base += (mean - tiles.original[i]).powi(2);
            count += 1;
        }
    }
    let avg = |s: f64| (count > 0).then(|| s / count as f64);
    ReconStats { image: index, ratio, n_masked: tiles.plan.n_masked(), masked_mse: avg(err), baseline_mse: avg(base) }
}

/// Builds the grid for every image (rows) at every ratio, separated by
/// black gaps of [`GAP`] pixels. Masks are seeded from `(seed, image, ratio
/// index)`. Single-channel images only.
pub fn export_reconstructions(
    params: &ModelParams<f64>,
    images: &[TactileImage],
    ratios: &[f64],
    seed: u64,
) -> Result<ReconGrid> {
    if images.is_empty() || ratios.is_empty() {
        return Err(Error::config("need at least one image and one ratio"));
    }
    let (th, tw) = (images[0].height, images[0].width);
    if images.iter().any(|im| im.channels != 1 || im.height != th || im.width != tw) {
        return Err(Error::config("reconstruction grids need single-channel images of one size"));
    }
    let rows = images.len() * ratios.len();
    let width = 3 * tw + 2 * GAP;
    let height = rows * th + (rows - 1) * GAP;
    let mut pixels = vec![0.0; width * height];
    let mut all_stats = Vec::with_capacity(rows);
    let mut all_tiles = Vec::with_capacity(rows);
    let n = params.config.n_patches();
    for (i, img) in images.iter().enumerate() {
        for (j, &r) in ratios.iter().enumerate() {
            let plan = sample_mask(n, r, seed::derive(seed, &[seed::stream::RECON, i as u64, j as u64]))?;
            let tiles = reconstruct(params, img, &plan)?;
            let row = i * ratios.len() + j;
            let y0 = row * (th + GAP);
            for (col, tile) in [&tiles.original, &tiles.masked, &tiles.reconstruction].into_iter().enumerate() {
                let x0 = col * (tw + GAP);
                for y in 0..th {
                    let dst = (y0 + y) * width + x0;
                    pixels[dst..dst + tw].copy_from_slice(&tile[y * tw..(y + 1) * tw]);
                }
            }
            all_stats.push(stats(img, &tiles, params.config.patch_size, i, r));
            all_tiles.push(tiles);
        }
    }
    Ok(ReconGrid { width, height, pixels, tile_height: th, tile_width: tw, stats: all_stats, tiles: all_tiles })
}
