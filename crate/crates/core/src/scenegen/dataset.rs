use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::appearance::{Appearance, AppearanceCondition};
use super::layout::{generate_layout, rasterize_labels, SceneConfig};
use super::pnm::{self, PnmKind};
use super::render::render;
use super::{SceneError, CLASS_NAMES, IGNORE, NUM_CLASSES};

/// File references for one layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub label: String,
    /// Appearance id to RGB path.
    pub rgb: BTreeMap<usize, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: SceneConfig,
    pub classes: Vec<String>,
    pub entries: BTreeMap<u64, DatasetEntry>,
}

/// Layouts with one label map each and one 8-bit RGB image per appearance,
/// held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Appearance ids present for every layout, in storage order.
    pub appearance_ids: Vec<usize>,
    samples: Vec<StoredSample>,
}

#[derive(Clone, Debug, PartialEq)]
struct StoredSample {
    layout_index: u64,
    labels: Vec<u8>,
    rgb: Vec<Vec<u8>>,
}

pub(crate) fn quantize(rgb: &[f64]) -> Vec<u8> {
    rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

impl SceneDataset {
    /// Generates layouts `indices` and renders them under the four presets
    /// and, with `with_dusk`, the held-out dusk preset (appearance id 4).
    pub fn generate(
        seed: u64,
        config: &SceneConfig,
        indices: impl IntoIterator<Item = u64>,
        with_dusk: bool,
    ) -> Result<Self, SceneError> {
        let mut appearance_ids: Vec<usize> = Appearance::ALL.iter().map(|a| a.id()).collect();
        if with_dusk {
            appearance_ids.push(super::appearance::DUSK_ID);
        }
        Self::generate_with(seed, config, indices, &appearance_ids)
    }

    /// Like [`SceneDataset::generate`] with an explicit appearance list.
    pub fn generate_with(
        seed: u64,
        config: &SceneConfig,
        indices: impl IntoIterator<Item = u64>,
        appearance_ids: &[usize],
    ) -> Result<Self, SceneError> {
        config.validate()?;
        let (w, h) = (config.width, config.height);
        let mut samples = Vec::new();
        for layout_index in indices {
            let layout = generate_layout(seed, layout_index, config)?;
            let labels = rasterize_labels(&layout);
            let rgb = appearance_ids
                .iter()
                .map(|&id| {
                    let cond = match Appearance::from_id(id) {
                        Some(a) => AppearanceCondition::preset(a, seed, layout_index, w, h),
                        None => AppearanceCondition::dusk(seed, layout_index, w, h),
                    };
                    quantize(&render(&layout, &cond))
                })
                .collect();
            samples.push(StoredSample { layout_index, labels, rgb });
        }
        Ok(Self { seed, width: w, height: h, appearance_ids: appearance_ids.to_vec(), samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn layout_index(&self, i: usize) -> u64 {
        self.samples[i].layout_index
    }

    pub fn labels(&self, i: usize) -> &[u8] {
        &self.samples[i].labels
    }

    /// 8-bit interleaved RGB of sample `i` under appearance id `appearance`.
    pub fn rgb(&self, i: usize, appearance: usize) -> Option<&[u8]> {
        let slot = self.appearance_ids.iter().position(|&a| a == appearance)?;
        Some(&self.samples[i].rgb[slot])
    }

    pub fn has_appearance(&self, appearance: usize) -> bool {
        self.appearance_ids.contains(&appearance)
    }

    /// First `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        Self { samples: self.samples[..n.min(self.len())].to_vec(), ..self.clone() }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io { path: path.to_path_buf(), source }
}

/// Generates and writes `indices` under the four presets into `dir`.
///
/// Layout: `manifest.json`, `labels/%06d.pgm`, `rgb/%06d_a%d.ppm`.
pub fn write_dataset(
    dir: &Path,
    seed: u64,
    config: &SceneConfig,
    indices: impl IntoIterator<Item = u64>,
) -> Result<Manifest, SceneError> {
    let ids: Vec<usize> = Appearance::ALL.iter().map(|a| a.id()).collect();
    write_dataset_with(dir, seed, config, indices, &ids)
}

/// Like [`write_dataset`] with an explicit appearance list. Rejects an empty
/// layout set.
pub fn write_dataset_with(
    dir: &Path,
    seed: u64,
    config: &SceneConfig,
    indices: impl IntoIterator<Item = u64>,
    appearance_ids: &[usize],
) -> Result<Manifest, SceneError> {
    let data = SceneDataset::generate_with(seed, config, indices, appearance_ids)?;
    if data.is_empty() {
        return Err(SceneError::Config("at least one layout is required".into()));
    }
    fs::create_dir_all(dir.join("labels")).map_err(io_err(dir))?;
    fs::create_dir_all(dir.join("rgb")).map_err(io_err(dir))?;
    let mut entries = BTreeMap::new();
    for (i, sample) in data.samples.iter().enumerate() {
        let idx = data.layout_index(i);
        let label = format!("labels/{idx:06}.pgm");
        let path = dir.join(&label);
        fs::write(&path, pnm::encode(PnmKind::Pgm, data.width, data.height, &sample.labels)).map_err(io_err(&path))?;
        let mut rgb = BTreeMap::new();
        for (slot, &a) in data.appearance_ids.iter().enumerate() {
            let name = format!("rgb/{idx:06}_a{a}.ppm");
            let path = dir.join(&name);
            fs::write(&path, pnm::encode(PnmKind::Ppm, data.width, data.height, &sample.rgb[slot]))
                .map_err(io_err(&path))?;
            rgb.insert(a, name);
        }
        entries.insert(idx, DatasetEntry { label, rgb });
    }
    let manifest = Manifest {
        seed,
        config: config.clone(),
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        entries,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

fn read_file(path: &Path) -> Result<Vec<u8>, SceneError> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(SceneError::MissingFile(path.to_path_buf())),
        Err(e) => Err(SceneError::Io { path: path.to_path_buf(), source: e }),
    }
}

/// Loads a dataset directory written by [`write_dataset`], validating every file.
pub fn read_dataset(dir: &Path) -> Result<SceneDataset, SceneError> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&read_file(&manifest_path)?)
        .map_err(|e| SceneError::Manifest(format!("{}: {e}", manifest_path.display())))?;
    if manifest.classes.len() != NUM_CLASSES {
        return Err(SceneError::Manifest(format!("expected {NUM_CLASSES} classes, found {}", manifest.classes.len())));
    }
    let (w, h) = (manifest.config.width, manifest.config.height);
    let appearance_ids: Vec<usize> = manifest
        .entries
        .values()
        .next()
        .map(|e| e.rgb.keys().copied().collect())
        .unwrap_or_default();

    let mut samples = Vec::with_capacity(manifest.entries.len());
    for (&layout_index, entry) in &manifest.entries {
        let ids: Vec<usize> = entry.rgb.keys().copied().collect();
        if ids != appearance_ids {
            return Err(SceneError::Manifest(format!("layout {layout_index} lists appearances {ids:?}")));
        }
        let path: PathBuf = dir.join(&entry.label);
        let (lw, lh, labels) = pnm::decode(PnmKind::Pgm, &read_file(&path)?, &path)?;
        check_size(&path, (lw, lh), (w, h))?;
        if let Some((pixel, &value)) = labels.iter().enumerate().find(|(_, &v)| v != IGNORE && v as usize >= NUM_CLASSES) {
            return Err(SceneError::InvalidClassId { path, value, pixel });
        }
        let mut rgb = Vec::with_capacity(ids.len());
        for name in entry.rgb.values() {
            let path = dir.join(name);
            let (iw, ih, px) = pnm::decode(PnmKind::Ppm, &read_file(&path)?, &path)?;
            check_size(&path, (iw, ih), (w, h))?;
            rgb.push(px);
        }
        samples.push(StoredSample { layout_index, labels, rgb });
    }
    Ok(SceneDataset { seed: manifest.seed, width: w, height: h, appearance_ids, samples })
}

fn check_size(path: &Path, got: (usize, usize), want: (usize, usize)) -> Result<(), SceneError> {
    if got != want {
        return Err(SceneError::Manifest(format!(
            "{} is {}x{}, manifest says {}x{}",
            path.display(),
            got.0,
            got.1,
            want.0,
            want.1
        )));
    }
    Ok(())
}
