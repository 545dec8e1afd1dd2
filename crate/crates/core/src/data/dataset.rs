//! Dataset generation, manifest format and loading.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.jsonl   one JSON object per image
//! dataset.json     generation parameters
//! images/<class>_<kind>_<index>.pgm
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::contact::{apply_partial_contact, classify_contact, measure_contact};
use super::pgm;
use super::texture::{default_classes, generate_texture, TextureClass};
use crate::error::{Error, Result};
use crate::image::{ContactKind, TactileImage};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub class_id: usize,
    pub contact_fraction: f64,
    pub contact_kind: ContactKind,
    pub split: Split,
    pub sha256: String,
}

impl ManifestRow {
    /// One manifest line; the contact fraction is printed with 6 decimals.
    pub fn to_json_line(&self) -> String {
        let s = |v: &str| serde_json::to_string(v).expect("string serializes");
        format!(
            "{{\"id\":{},\"path\":{},\"class_id\":{},\"contact_fraction\":{:.6},\"contact_kind\":\"{}\",\"split\":\"{}\",\"sha256\":\"{}\"}}",
            s(&self.id),
            s(&self.path),
            self.class_id,
            self.contact_fraction,
            self.contact_kind.as_str(),
            self.split.as_str(),
            self.sha256,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    msg: format!("line {}: {e}", i + 1),
                })
            })
            .collect::<Result<Vec<ManifestRow>>>()?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { dir, rows })
    }

    pub fn to_jsonl(&self) -> String {
        self.rows.iter().fold(String::new(), |mut acc, r| {
            acc.push_str(&r.to_json_line());
            acc.push('\n');
            acc
        })
    }

    pub fn select(&self, split: Split, kind: ContactKind) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split && r.contact_kind == kind).collect()
    }

    /// Sorted distinct class ids.
    pub fn classes(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.class_id).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn image_path(&self, row: &ManifestRow) -> PathBuf {
        self.dir.join(&row.path)
    }

    /// Reads one image with the row's label and contact metadata.
    pub fn load_image(&self, row: &ManifestRow) -> Result<TactileImage> {
        let (w, h, pixels) = pgm::read(&self.image_path(row))?;
        let mut img = TactileImage::new(h, w, 1, pixels, row.class_id)?;
        img.contact_fraction = row.contact_fraction;
        img.contact_kind = row.contact_kind;
        Ok(img)
    }

    pub fn load_images(&self, rows: &[&ManifestRow]) -> Result<Vec<TactileImage>> {
        rows.iter().map(|r| self.load_image(r)).collect()
    }

    /// Checks every file against its recorded digest.
    pub fn verify_hashes(&self) -> Result<()> {
        for row in &self.rows {
            let bytes = std::fs::read(self.image_path(row))?;
            if sha256_hex(&bytes) != row.sha256 {
                return Err(Error::Parse { path: self.image_path(row), msg: "sha256 mismatch".into() });
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub classes: usize,
    /// Images per class for each contact kind.
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { classes: 10, per_class: 100, size: 32, seed: 7 }
    }
}

const MAX_ATTEMPTS: u64 = 32;

fn kind_tag(kind: ContactKind) -> u64 {
    match kind {
        ContactKind::Adequate => 0,
        ContactKind::Partial => 1,
    }
}

/// Generates one sample of the requested kind, re-drawing until the
/// measured contact area classifies as that kind.
pub fn generate_sample(class: &TextureClass, kind: ContactKind, index: usize, size: usize, base_seed: u64) -> Result<TactileImage> {
    for attempt in 0..MAX_ATTEMPTS {
        let s = seed::derive(base_seed, &[seed::stream::TEXTURE, class.class_id as u64, kind_tag(kind), index as u64, attempt]);
        let texture = generate_texture(class, size, s);
        let mut rng = seed::rng(seed::derive(s, &[seed::stream::CONTACT]));
        let target: f64 = match kind {
            ContactKind::Adequate => {
                let t = rng.random_range(0.6..=1.0);
                if t >= 0.97 {
                    1.0
                } else {
                    t
                }
            }
            ContactKind::Partial => rng.random_range(0.12..=0.38),
        };
        let Ok((mut img, _)) = apply_partial_contact(&texture, target, rng.random()) else { continue };
        // Record what the detector sees in the stored 8-bit image.
        img.pixels.iter_mut().for_each(|v| *v = pgm::dequantize(pgm::quantize(*v)));
        let measured = measure_contact(&img);
        if classify_contact(measured) == Some(kind) {
            img.contact_fraction = measured;
            img.contact_kind = kind;
            return Ok(img);
        }
    }
    Err(Error::Generation(format!(
        "class {} {kind} sample {index}: no acceptable footprint in {MAX_ATTEMPTS} attempts",
        class.class_id
    )))
}

/// `(train, val, test)` sizes for a stratum of `n`: 7:2:1 by floor, with the
/// remainder handed out train → val → test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let mut sizes = [n * 7 / 10, n * 2 / 10, n / 10];
    let mut rem = n - sizes.iter().sum::<usize>();
    let mut i = 0;
    while rem > 0 {
        sizes[i % 3] += 1;
        rem -= 1;
        i += 1;
    }
    (sizes[0], sizes[1], sizes[2])
}

/// Seeded split assignment for a stratum of `n` samples.
fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let (tr, va, _) = split_sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(seed);
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < tr {
            Split::Train
        } else if rank < tr + va {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

/// Generates, splits and writes a dataset under `out_dir`. On failure every
/// file written so far is removed.
pub fn build_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    if config.per_class < 10 {
        return Err(Error::config(format!("need at least 10 images per class and kind, got {}", config.per_class)));
    }
    if config.size == 0 {
        return Err(Error::config("image size must be positive"));
    }
    let classes = default_classes(config.classes)?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = write_dataset(config, &classes, out_dir, &mut written);
    if result.is_err() {
        for p in written.iter().rev() {
            let _ = std::fs::remove_file(p);
        }
    }
    result
}

fn write_dataset(
    config: &DatasetConfig,
    classes: &[TextureClass],
    out_dir: &Path,
    written: &mut Vec<PathBuf>,
) -> Result<Manifest> {
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir)?;
    let mut rows = Vec::new();
    for class in classes {
        for kind in [ContactKind::Adequate, ContactKind::Partial] {
            let splits = assign_splits(
                config.per_class,
                seed::derive(config.seed, &[seed::stream::SPLIT, class.class_id as u64, kind_tag(kind)]),
            );
            for (index, split) in splits.into_iter().enumerate() {
                let img = generate_sample(class, kind, index, config.size, config.seed)?;
                let id = format!("{}_{}_{:05}", class.class_id, kind, index);
                let rel = format!("images/{id}.pgm");
                let bytes = pgm::encode(img.width, img.height, &img.pixels)?;
                let path = out_dir.join(&rel);
                std::fs::write(&path, &bytes)?;
                written.push(path);
                rows.push(ManifestRow {
                    id,
                    path: rel,
                    class_id: class.class_id,
                    contact_fraction: img.contact_fraction,
                    contact_kind: kind,
                    split,
                    sha256: sha256_hex(&bytes),
                });
            }
        }
    }
    let manifest = Manifest { dir: out_dir.to_path_buf(), rows };
    let manifest_path = out_dir.join("manifest.jsonl");
    std::fs::write(&manifest_path, manifest.to_jsonl())?;
    written.push(manifest_path);
    let meta = serde_json::json!({ "config": config, "classes": classes });
    let meta_path = out_dir.join("dataset.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")?;
    written.push(meta_path);
    Ok(manifest)
}
