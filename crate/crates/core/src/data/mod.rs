//! Synthetic tactile dataset: procedural textures, simulated contact
//! footprints, contact-area measurement and the stratified split.

pub mod contact;
pub mod dataset;
pub mod pgm;
pub mod texture;

pub use contact::{
    apply_partial_contact, classify_contact, contact_fraction, fit_footprint, largest_component, measure_contact,
    ContactFootprint,
};
pub use dataset::{build_dataset, DatasetConfig, Manifest, ManifestRow, Split};
pub use texture::{default_classes, generate_texture, Generator, Range, TextureClass};

/// No-contact intensity of the sensor.
pub const BACKGROUND_LEVEL: f64 = 0.5;
pub const NOISE_SIGMA: f64 = 0.02;
/// Deviation from the background that counts as contact.
pub const DETECT_THRESHOLD: f64 = 0.08;

// Contact pixels sit at CONTACT_BASE + DOME_AMP·dome + TEXTURE_AMP·texture,
// so the darkest noisy contact pixel (CONTACT_BASE − 3σ) still clears the
// detection threshold.
pub(crate) const CONTACT_BASE: f64 = 0.65;
pub(crate) const DOME_AMP: f64 = 0.03;
pub(crate) const TEXTURE_AMP: f64 = 0.26;
