//! On-disk formats. Everything is JSON except feature tensors, which are
//! flat little-endian `f32` arrays described by a JSON sidecar.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use zsd_align_core::embedding::{ClassifierMatrix, Embedding};
use zsd_align_core::geometry::CenterBox;
use zsd_align_core::train::TrainState;
use zsd_align_core::world::{
    DetectionSample, FeatureMap, GroundTruthObject, ImageLabelSample, SyntheticWorldConfig,
};

use crate::error::{CliError, CliResult};

/// File names inside a dataset directory.
pub mod layout {
    pub const WORLD: &str = "world.json";
    pub const SPLIT: &str = "split.json";
    pub const REGISTRY: &str = "registry.json";
    pub const PROMPT_EMBEDDINGS: &str = "prompt_embeddings.json";
    pub const TRAIN: &str = "train";
    pub const TEST_UNSEEN: &str = "test_unseen";
    pub const TEST_SEEN: &str = "test_seen";
    pub const CLASSIFICATION: &str = "classification";

    pub fn annotations(set: &str) -> String {
        format!("{set}.annotations.json")
    }

    pub fn labels(set: &str) -> String {
        format!("{set}.labels.json")
    }

    pub fn features(set: &str) -> String {
        format!("{set}.features.bin")
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::json(path, e))
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// One JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).map_err(|e| CliError::json(path, e))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::json(path, e)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedEmbedding {
    pub name: String,
    pub embedding: Vec<f64>,
}

/// Named vectors of a common dimension: text embeddings keyed by class
/// name or prompt, or the columns of a classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub classes: Vec<NamedEmbedding>,
}

impl EmbeddingFile {
    pub fn from_entries<'a>(
        dim: usize,
        entries: impl IntoIterator<Item = (&'a str, &'a Embedding)>,
    ) -> Self {
        Self {
            dim,
            classes: entries
                .into_iter()
                .map(|(name, e)| NamedEmbedding {
                    name: name.to_string(),
                    embedding: e.as_slice().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_classifier(c: &ClassifierMatrix) -> Self {
        Self::from_entries(
            c.dim(),
            c.names().iter().map(String::as_str).zip(c.columns()),
        )
    }

    pub fn to_map(&self) -> CliResult<BTreeMap<String, Embedding>> {
        let mut map = BTreeMap::new();
        for c in &self.classes {
            if c.embedding.len() != self.dim {
                return Err(CliError::data(format!(
                    "embedding `{}` has dimension {} but the file declares {}",
                    c.name,
                    c.embedding.len(),
                    self.dim
                )));
            }
            let e = Embedding::new(c.embedding.clone())
                .map_err(|e| CliError::data(format!("embedding `{}`: {e}", c.name)))?;
            if map.insert(c.name.clone(), e).is_some() {
                return Err(CliError::data(format!("duplicate embedding `{}`", c.name)));
            }
        }
        Ok(map)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSidecar {
    pub dtype: String,
    pub byte_order: String,
    /// `[images, grid, grid, channels]`
    pub shape: [usize; 4],
}

fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes same-shaped feature maps as one array plus its sidecar.
pub fn write_features(
    bin: &Path,
    maps: &[&FeatureMap],
    grid: usize,
    channels: usize,
) -> CliResult<()> {
    let mut bytes = Vec::with_capacity(maps.len() * grid * grid * channels * 4);
    for m in maps {
        if m.grid != grid || m.channels != channels {
            return Err(CliError::data("feature maps of one set must share a shape"));
        }
        for v in &m.data {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(bin).map_err(|e| CliError::io(bin, e))?;
    f.write_all(&bytes).map_err(|e| CliError::io(bin, e))?;
    write_json(
        &sidecar_path(bin),
        &FeatureSidecar {
            dtype: "float32".into(),
            byte_order: "little".into(),
            shape: [maps.len(), grid, grid, channels],
        },
    )
}

pub fn read_features(bin: &Path) -> CliResult<Vec<FeatureMap>> {
    let side: FeatureSidecar = read_json(&sidecar_path(bin))?;
    if side.dtype != "float32" || side.byte_order != "little" {
        return Err(CliError::data(format!(
            "{}: unsupported feature encoding {}/{}",
            bin.display(),
            side.dtype,
            side.byte_order
        )));
    }
    let [n, g, g2, c] = side.shape;
    if g != g2 {
        return Err(CliError::data(format!(
            "{}: feature grid must be square",
            bin.display()
        )));
    }
    let bytes = fs::read(bin).map_err(|e| CliError::io(bin, e))?;
    let per = g * g * c;
    if bytes.len() != n * per * 4 {
        return Err(CliError::data(format!(
            "{}: expected {} bytes for shape {:?}, found {}",
            bin.display(),
            n * per * 4,
            side.shape,
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    values
        .chunks(per.max(1))
        .take(n)
        .map(|chunk| FeatureMap::from_data(g, c, chunk.to_vec()).map_err(CliError::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: u64,
    /// Grid cells per side.
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    /// `[x, y, width, height]` in normalized image coordinates, top-left origin.
    pub bbox: [f64; 4],
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryRecord {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superclass: Option<String>,
}

/// Box annotations in a minimal COCO-like layout. `features` names the
/// feature array (relative to this file) holding one map per image, in
/// image order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<CategoryRecord>,
    pub features: String,
}

impl AnnotationFile {
    pub fn validate(&self) -> CliResult<()> {
        let mut ids = BTreeSet::new();
        for im in &self.images {
            if !ids.insert(im.id) {
                return Err(CliError::data(format!("duplicate image id {}", im.id)));
            }
        }
        let cats: BTreeSet<&str> = self.categories.iter().map(|c| c.name.as_str()).collect();
        for a in &self.annotations {
            if !ids.contains(&a.image_id) {
                return Err(CliError::data(format!(
                    "annotation {} references unknown image {}",
                    a.id, a.image_id
                )));
            }
            if !cats.contains(a.category.as_str()) {
                return Err(CliError::data(format!(
                    "annotation {} references unknown category `{}`",
                    a.id, a.category
                )));
            }
            let [_, _, w, h] = a.bbox;
            if !(w > 0.0 && h > 0.0) || a.bbox.iter().any(|v| !v.is_finite()) {
                return Err(CliError::data(format!(
                    "annotation {} has a degenerate box",
                    a.id
                )));
            }
        }
        Ok(())
    }

    pub fn from_samples(
        samples: &[DetectionSample],
        class_names: &[String],
        categories: Vec<CategoryRecord>,
        features: &str,
    ) -> Self {
        let mut annotations = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            for g in &s.ground_truth {
                let b = g.bbox;
                annotations.push(AnnotationRecord {
                    id: annotations.len() as u64,
                    image_id: i as u64,
                    bbox: [b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.w, b.h],
                    category: class_names[g.class].clone(),
                });
            }
        }
        Self {
            images: samples
                .iter()
                .enumerate()
                .map(|(i, s)| ImageRecord {
                    id: i as u64,
                    width: s.features.grid,
                    height: s.features.grid,
                })
                .collect(),
            annotations,
            categories,
            features: features.to_string(),
        }
    }
}

/// Image ids and samples of an annotation file, with classes indexed by
/// position in `class_names`.
pub fn load_detection_set(
    path: &Path,
    class_names: &[String],
) -> CliResult<(Vec<u64>, Vec<DetectionSample>)> {
    let file: AnnotationFile = read_json(path)?;
    file.validate()?;
    let maps = read_features(&path.with_file_name(&file.features))?;
    if maps.len() != file.images.len() {
        return Err(CliError::data(format!(
            "{}: {} images but {} feature maps",
            path.display(),
            file.images.len(),
            maps.len()
        )));
    }
    let index: BTreeMap<u64, usize> = file
        .images
        .iter()
        .enumerate()
        .map(|(i, im)| (im.id, i))
        .collect();
    let mut samples: Vec<DetectionSample> = maps
        .into_iter()
        .map(|features| DetectionSample {
            features,
            ground_truth: Vec::new(),
        })
        .collect();
    for a in &file.annotations {
        let class = class_index(class_names, &a.category)?;
        let [x, y, w, h] = a.bbox;
        samples[index[&a.image_id]]
            .ground_truth
            .push(GroundTruthObject {
                bbox: CenterBox::new(x + w / 2.0, y + h / 2.0, w, h),
                class,
            });
    }
    Ok((file.images.iter().map(|im| im.id).collect(), samples))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub id: u64,
    pub label: String,
}

/// Image-level labels, one per image, with a feature array as above.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelFile {
    pub images: Vec<LabelRecord>,
    pub features: String,
}

pub fn load_label_set(path: &Path, class_names: &[String]) -> CliResult<Vec<ImageLabelSample>> {
    let file: LabelFile = read_json(path)?;
    let maps = read_features(&path.with_file_name(&file.features))?;
    if maps.len() != file.images.len() {
        return Err(CliError::data(format!(
            "{}: {} labels but {} feature maps",
            path.display(),
            file.images.len(),
            maps.len()
        )));
    }
    file.images
        .iter()
        .zip(maps)
        .map(|(r, f)| {
            Ok(ImageLabelSample::new(
                f,
                &[class_index(class_names, &r.label)?],
            )?)
        })
        .collect()
}

pub fn class_index(class_names: &[String], name: &str) -> CliResult<usize> {
    class_names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| CliError::data(format!("unknown class `{name}`")))
}

/// Dataset description written next to the generated files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldMeta {
    pub config: SyntheticWorldConfig,
    pub class_names: Vec<String>,
    pub detection_classes: Vec<String>,
    pub label_only_classes: Vec<String>,
    pub unseen_classes: Vec<String>,
    pub classification_pool: Vec<String>,
}

impl WorldMeta {
    pub fn indices(&self, names: &[String]) -> CliResult<Vec<usize>> {
        names
            .iter()
            .map(|n| class_index(&self.class_names, n))
            .collect()
    }

    pub fn seen_classes(&self) -> Vec<String> {
        self.class_names
            .iter()
            .filter(|n| !self.unseen_classes.contains(n))
            .cloned()
            .collect()
    }
}

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn load(path: &Path) -> CliResult<Self> {
        let c: Self = read_json(path)?;
        if c.format_version != CHECKPOINT_FORMAT {
            return Err(CliError::data(format!(
                "{}: unsupported checkpoint format {}",
                path.display(),
                c.format_version
            )));
        }
        c.state.model.validate()?;
        if !c.state.optimizer.matches(&c.state.model) {
            return Err(CliError::data(format!(
                "{}: optimizer state does not match the model",
                path.display()
            )));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    /// `[x1, y1, x2, y2]` in normalized image coordinates.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub class: String,
    pub confidence: f64,
}
