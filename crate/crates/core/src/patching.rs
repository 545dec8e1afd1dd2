//! Conversion between images and the `N × (P²·C)` token matrix.
//!
//! Token `i` is patch `(i / grid_cols, i % grid_cols)` of the patch grid.
//! Inside a token, pixels are flattened row-major with the channel index
//! innermost. Checkpoints depend on this order.

use crate::error::{Error, Result};
use crate::image::TactileImage;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<S> {
    pub patch_size: usize,
    pub channels: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// `[n_patches, patch_dim]`.
    pub tokens: Tensor<S>,
}

impl<S: Scalar> PatchGrid<S> {
    pub fn n_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn token(&self, i: usize) -> &[S] {
        self.tokens.row(i)
    }
}

fn check_geometry(h: usize, w: usize, c: usize, p: usize) -> Result<()> {
    if p == 0 || c == 0 || h == 0 || w == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::config(format!(
            "patch size {p} must divide image {h}x{w} (channels {c})"
        )));
    }
    Ok(())
}

pub fn patchify<S: Scalar>(img: &TactileImage<S>, patch_size: usize) -> Result<PatchGrid<S>> {
    patchify_pixels(&img.pixels, img.height, img.width, img.channels, patch_size)
}

pub fn patchify_pixels<S: Scalar>(
    pixels: &[S],
    height: usize,
    width: usize,
    channels: usize,
    patch_size: usize,
) -> Result<PatchGrid<S>> {
    check_geometry(height, width, channels, patch_size)?;
    if pixels.len() != height * width * channels {
        return Err(Error::config(format!(
            "pixel buffer of {} values does not match {height}x{width}x{channels}",
            pixels.len()
        )));
    }
    let p = patch_size;
    let (gr, gc) = (height / p, width / p);
    let row_len = p * channels;
    let mut data = Vec::with_capacity(pixels.len());
    for r in 0..gr {
        for c in 0..gc {
            for py in 0..p {
                let start = ((r * p + py) * width + c * p) * channels;
                data.extend_from_slice(&pixels[start..start + row_len]);
            }
        }
    }
    let tokens = Tensor::new(vec![gr * gc, p * p * channels], data)?;
    Ok(PatchGrid { patch_size: p, channels, grid_rows: gr, grid_cols: gc, tokens })
}

/// Inverse of [`patchify`]: rebuilds the row-major `H×W×C` pixel buffer.
pub fn unpatchify<S: Scalar>(grid: &PatchGrid<S>, height: usize, width: usize, channels: usize) -> Result<Vec<S>> {
    unpatchify_tokens(grid.tokens.data(), grid.patch_size, height, width, channels)
}

pub(crate) fn unpatchify_tokens<S: Scalar>(
    tokens: &[S],
    patch_size: usize,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<Vec<S>> {
    check_geometry(height, width, channels, patch_size)?;
    if tokens.len() != height * width * channels {
        return Err(Error::config(format!(
            "{} token values cannot fill a {height}x{width}x{channels} image",
            tokens.len()
        )));
    }
    let p = patch_size;
    let (gr, gc) = (height / p, width / p);
    let row_len = p * channels;
    let mut pixels = vec![S::zero(); tokens.len()];
    let mut src = 0;
    for r in 0..gr {
        for c in 0..gc {
            for py in 0..p {
                let start = ((r * p + py) * width + c * p) * channels;
                pixels[start..start + row_len].copy_from_slice(&tokens[src..src + row_len]);
                src += row_len;
            }
        }
    }
    Ok(pixels)
}

/// Checks a grid against an image geometry before [`unpatchify`].
pub fn check_grid<S: Scalar>(grid: &PatchGrid<S>, height: usize, width: usize, channels: usize) -> Result<()> {
    let p = grid.patch_size;
    if grid.channels != channels || grid.grid_rows * p != height || grid.grid_cols * p != width {
        return Err(Error::config(format!(
            "{}x{} grid of {p}px patches does not match {height}x{width}x{channels}",
            grid.grid_rows, grid.grid_cols
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn indexed(h: usize, w: usize, c: usize) -> TactileImage<f64> {
        let n = h * w * c;
        let px = (0..n).map(|i| i as f64 / n as f64).collect();
        TactileImage::new(h, w, c, px, 0).unwrap()
    }

    #[test]
    fn desk_geometry() {
        let grid = patchify(&indexed(32, 32, 1), 8).unwrap();
        assert_eq!(grid.n_patches(), 16);
        assert_eq!(grid.patch_dim(), 64);
        assert_eq!(grid.tokens.shape(), &[16, 64]);
    }

    #[test]
    fn single_patch_is_flattened_image() {
        let img = indexed(8, 8, 2);
        let grid = patchify(&img, 8).unwrap();
        assert_eq!(grid.n_patches(), 1);
        assert_eq!(grid.token(0), img.pixels.as_slice());
    }

    #[test]
    fn nested_loop_extractor_agrees() {
        let (h, w, c, p) = (16, 24, 3, 4);
        let img = indexed(h, w, c);
        let grid = patchify(&img, p).unwrap();
        for gy in 0..h / p {
            for gx in 0..w / p {
                let mut expected = Vec::new();
                for y in 0..p {
                    for x in 0..p {
                        for ch in 0..c {
                            expected.push(img.at(gy * p + y, gx * p + x, ch));
                        }
                    }
                }
                assert_eq!(grid.token(gy * (w / p) + gx), expected.as_slice());
            }
        }
    }

    #[test]
    fn non_divisible_is_config_error() {
        let img = indexed(30, 32, 1);
        assert!(matches!(patchify(&img, 8), Err(Error::Config(_))));
    }

    #[test]
    fn zero_grid_unpatchifies_to_zero_image() {
        let grid = PatchGrid {
            patch_size: 4,
            channels: 1,
            grid_rows: 2,
            grid_cols: 2,
            tokens: Tensor::<f64>::zeros(vec![4, 16]),
        };
        assert_eq!(unpatchify(&grid, 8, 8, 1).unwrap(), vec![0.0; 64]);
        assert!(unpatchify(&grid, 8, 12, 1).is_err());
        assert!(check_grid(&grid, 8, 12, 1).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            p in prop::sample::select(vec![4usize, 8]),
            gr in 1usize..5,
            gc in 1usize..5,
            c in 1usize..4,
            seed in any::<u64>(),
        ) {
            let (h, w) = (gr * p, gc * p);
            let mut state = seed;
            let px: Vec<f64> = (0..h * w * c).map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            }).collect();
            let img = TactileImage::new(h, w, c, px.clone(), 0).unwrap();
            let grid = patchify(&img, p).unwrap();
            prop_assert_eq!(grid.n_patches() * p * p, h * w);
            let back = unpatchify(&grid, h, w, c).unwrap();
            prop_assert!(back.iter().zip(&px).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
