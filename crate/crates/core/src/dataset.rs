//! Benchmark datasets: a clean training split, a clean test split with
//! novel-class objects, and the same test scenes re-rendered with corruption.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{write_atomic, Archive, ArchiveWriter};
use crate::corrupt::CorruptionSpec;
use crate::error::{Error, Result};
use crate::scene::{generate_scene, split_seed, LabelMap, LabeledScene, SceneSpec};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FORMAT: &str = "atta-dataset";

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestClean,
    TestCorrupt,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestClean => "test_clean",
            Split::TestCorrupt => "test_corrupt",
        }
    }

    /// Short name used in result tables.
    pub fn short_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestClean => "clean",
            Split::TestCorrupt => "corrupt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "clean" | "test_clean" => Ok(Split::TestClean),
            "corrupt" | "test_corrupt" => Ok(Split::TestCorrupt),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub width: usize,
    pub height: usize,
    pub num_seen_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub ood_area_fraction_range: (f64, f64),
    pub corruption: CorruptionSpec,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            num_seen_classes: 4,
            n_train: 200,
            n_test: 50,
            ood_area_fraction_range: (0.02, 0.10),
            corruption: CorruptionSpec::default(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    fn scene_spec(&self, split: Split, index: usize) -> SceneSpec {
        let (stream, ood, corruption) = match split {
            Split::Train => (TRAIN_STREAM, false, CorruptionSpec::disabled()),
            Split::TestClean => (TEST_STREAM, true, CorruptionSpec::disabled()),
            Split::TestCorrupt => (
                TEST_STREAM,
                true,
                CorruptionSpec {
                    enabled: true,
                    ..self.corruption.clone()
                },
            ),
        };
        SceneSpec {
            width: self.width,
            height: self.height,
            num_seen_classes: self.num_seen_classes,
            ood_enabled: ood,
            ood_area_fraction_range: self.ood_area_fraction_range,
            corruption,
            seed: split_seed(self.seed, stream, index as u64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be positive".into()));
        }
        self.scene_spec(Split::TestCorrupt, 0).validate()
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            _ => self.n_test,
        }
    }
}

/// In-memory dataset; test splits are paired index by index.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<LabeledScene>,
    pub test_clean: Vec<LabeledScene>,
    pub test_corrupt: Vec<LabeledScene>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[LabeledScene] {
        match split {
            Split::Train => &self.train,
            Split::TestClean => &self.test_clean,
            Split::TestCorrupt => &self.test_corrupt,
        }
    }
}

pub fn generate_split(spec: &DatasetSpec, split: Split) -> Result<Vec<LabeledScene>> {
    (0..spec.count(split))
        .into_par_iter()
        .map(|i| generate_scene(&spec.scene_spec(split, i)))
        .collect()
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        spec: spec.clone(),
        train: generate_split(spec, Split::Train)?,
        test_clean: generate_split(spec, Split::TestClean)?,
        test_corrupt: generate_split(spec, Split::TestCorrupt)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub split: Split,
    pub index: usize,
    /// Path of the scene archive manifest, relative to the dataset root.
    pub file: String,
    pub seed: u64,
    pub applied: Vec<String>,
    pub ood_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub spec: DatasetSpec,
    pub entries: Vec<SceneEntry>,
}

impl DatasetManifest {
    pub fn entries_of(&self, split: Split) -> impl Iterator<Item = &SceneEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

fn scene_file(split: Split, index: usize) -> String {
    format!("{}/scene_{index:04}", split.dir_name())
}

pub fn save_scene(scene: &LabeledScene, seed: u64, path: &Path) -> Result<PathBuf> {
    let meta = serde_json::json!({
        "seed": seed,
        "num_seen_classes": scene.num_seen_classes,
        "applied": scene.applied,
    });
    let mut w = ArchiveWriter::new(meta);
    w.add("image", scene.image.shape(), scene.image.data())?;
    let labels: Vec<f32> = scene.labels.labels.iter().map(|&l| l as f32).collect();
    w.add(
        "labels",
        &[scene.labels.height, scene.labels.width],
        &labels,
    )?;
    w.write(path)
}

pub fn load_scene(path: &Path) -> Result<LabeledScene> {
    let archive = Archive::read(path)?;
    let meta = archive.metadata();
    let num_seen_classes = meta["num_seen_classes"]
        .as_u64()
        .ok_or_else(|| Error::Format {
            offset: 0,
            message: format!("{}: missing num_seen_classes", path.display()),
        })? as usize;
    let applied: Vec<String> = serde_json::from_value(meta["applied"].clone()).unwrap_or_default();
    let (shape, data) = archive.tensor("image")?;
    let image = Tensor::new(shape, data)?;
    let (lshape, ldata) = archive.tensor("labels")?;
    if lshape.len() != 2 || image.shape().len() != 3 || lshape[..] != image.shape()[1..] {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "{}: label shape {lshape:?} does not match image",
                path.display()
            ),
        });
    }
    let ood_label = num_seen_classes as u8 + 1;
    let labels: Vec<u8> = ldata.iter().map(|&v| v as u8).collect();
    let ood_mask = labels.iter().map(|&l| l == ood_label).collect();
    Ok(LabeledScene {
        image,
        labels: LabelMap {
            width: lshape[1],
            height: lshape[0],
            labels,
        },
        ood_mask,
        num_seen_classes,
        applied,
    })
}

/// Render every split to `out_dir` and write `manifest.json`.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::new();
    for split in [Split::Train, Split::TestClean, Split::TestCorrupt] {
        let split_entries: Vec<SceneEntry> = (0..spec.count(split))
            .into_par_iter()
            .map(|i| -> Result<SceneEntry> {
                let scene_spec = spec.scene_spec(split, i);
                let scene = generate_scene(&scene_spec)?;
                let file = scene_file(split, i);
                save_scene(&scene, scene_spec.seed, &out_dir.join(&file))?;
                Ok(SceneEntry {
                    split,
                    index: i,
                    file: format!("{file}.json"),
                    seed: scene_spec.seed,
                    applied: scene.applied.clone(),
                    ood_fraction: scene.ood_fraction(),
                })
            })
            .collect::<Result<_>>()?;
        entries.extend(split_entries);
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        spec: spec.clone(),
        entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    write_atomic(&path, &bytes)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::json(&path, e))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "{}: unexpected format {:?}",
                path.display(),
                manifest.format
            ),
        });
    }
    Ok(manifest)
}

pub fn load_split(
    dir: &Path,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<Vec<LabeledScene>> {
    let entries: Vec<&SceneEntry> = manifest.entries_of(split).collect();
    entries
        .par_iter()
        .map(|e| load_scene(&dir.join(&e.file)))
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    Ok(Dataset {
        train: load_split(dir, &manifest, Split::Train)?,
        test_clean: load_split(dir, &manifest, Split::TestClean)?,
        test_corrupt: load_split(dir, &manifest, Split::TestCorrupt)?,
        spec: manifest.spec,
    })
}
