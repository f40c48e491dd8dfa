//! Procedural street scenes rendered under several appearances that share one
//! pixel-exact label map.
//!
//! Geometry lives in [`Layout`] and is a pure function of `(seed, layout_index)`.
//! Labels are rasterized from geometry alone; appearance only ever touches RGB.

mod appearance;
mod dataset;
mod layout;
pub mod pnm;
mod render;

pub use appearance::{
    sample_appearance_pair, Appearance, AppearanceCondition, AppearanceProtocol, LightSource, DUSK_ID, ORDERED_PAIRS,
};
pub use dataset::{read_dataset, write_dataset, write_dataset_with, DatasetEntry, Manifest, SceneDataset};
pub use layout::{generate_layout, rasterize_labels, CountRange, Layout, Primitive, SceneConfig, SceneObject};
pub use render::{fog_composite, render, render_sample, LabeledSample};

use std::path::PathBuf;

/// Label value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

pub const NUM_CLASSES: usize = 10;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "road",
    "sidewalk",
    "building",
    "sky",
    "vegetation",
    "car",
    "person",
    "pole",
    "traffic_sign",
    "fence",
];

pub mod class {
    pub const ROAD: u8 = 0;
    pub const SIDEWALK: u8 = 1;
    pub const BUILDING: u8 = 2;
    pub const SKY: u8 = 3;
    pub const VEGETATION: u8 = 4;
    pub const CAR: u8 = 5;
    pub const PERSON: u8 = 6;
    pub const POLE: u8 = 7;
    pub const TRAFFIC_SIGN: u8 = 8;
    pub const FENCE: u8 = 9;
}

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: corrupt magic bytes, expected {expected}", path.display())]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("{}: truncated file", .0.display())]
    Truncated(PathBuf),
    #[error("{}: malformed header: {detail}", path.display())]
    Header { path: PathBuf, detail: String },
    #[error("{}: invalid class id {value} at pixel {pixel}", path.display())]
    InvalidClassId { path: PathBuf, value: u8, pixel: usize },
    #[error("manifest mismatch: {0}")]
    Manifest(String),
    #[error("io error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}
