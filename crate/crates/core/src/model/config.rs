use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and input geometry.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            channels: 1,
            patch_size: 8,
            enc_dim: 64,
            enc_depth: 3,
            enc_heads: 4,
            dec_dim: 32,
            dec_depth: 2,
            dec_heads: 4,
            mlp_ratio: 4,
            n_classes: 10,
        }
    }
}

impl ModelConfig {
    pub fn grid_rows(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn grid_cols(&self) -> usize {
        self.image_width / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("enc_dim", self.enc_dim),
            ("enc_depth", self.enc_depth),
            ("enc_heads", self.enc_heads),
            ("dec_dim", self.dec_dim),
            ("dec_heads", self.dec_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return Err(Error::config(format!(
                "patch size {} must divide {}x{}",
                self.patch_size, self.image_height, self.image_width
            )));
        }
        if self.enc_dim % self.enc_heads != 0 || self.dec_dim % self.dec_heads != 0 {
            return Err(Error::config("model widths must be divisible by their head counts"));
        }
        // Half of each width encodes the row, half the column, as sin/cos pairs.
        if self.enc_dim % 4 != 0 || self.dec_dim % 4 != 0 {
            return Err(Error::config("model widths must be multiples of 4"));
        }
        Ok(())
    }

    /// Number of learnable scalars.
    pub fn param_count(&self) -> usize {
        let linear = |i: usize, o: usize| i * o + o;
        let block = |d: usize| {
            let h = d * self.mlp_ratio;
            4 * d + linear(d, 3 * d) + linear(d, d) + linear(d, h) + linear(h, d)
        };
        let (e, dd, pd) = (self.enc_dim, self.dec_dim, self.patch_dim());
        linear(pd, e)
            + self.enc_depth * block(e)
            + 2 * e
            + linear(e, dd)
            + dd
            + self.dec_depth * block(dd)
            + linear(dd, pd)
            + linear(e, e)
            + linear(e, self.n_classes)
    }
}
