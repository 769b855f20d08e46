//! Synthetic detection / image-label world.
//!
//! Each class owns a random unit prototype in feature space. An object
//! writes its prototype into every cell its box covers, together with a
//! geometry code describing where the object sits relative to that cell.
//! Class "text embeddings" are the prototypes pushed through a fixed random
//! linear map plus per-prompt noise, so alignment learned on some classes
//! transfers to the rest.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{
    normalize, ClassEntry, ClassRegistry, ClassRole, Embedding, PromptTemplateSet,
};
use crate::error::{Error, Result};
use crate::geometry::CenterBox;

/// Geometry channels appended to every cell after the prototype channels:
/// center offset x/y (in cells), log width/height (in cells), center flag.
pub const GEOMETRY_CHANNELS: usize = 5;

const MAX_PLACEMENT_ATTEMPTS: usize = 200;

/// A `grid × grid × channels` tensor stored row-major by cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub grid: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(grid: usize, channels: usize) -> Self {
        Self {
            grid,
            channels,
            data: vec![0.0; grid * grid * channels],
        }
    }

    pub fn from_data(grid: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid * grid * channels {
            return Err(Error::DimensionMismatch {
                expected: grid * grid * channels,
                found: data.len(),
            });
        }
        Ok(Self {
            grid,
            channels,
            data,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn cell(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn cell_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.data[index * self.channels..(index + 1) * self.channels]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub bbox: CenterBox,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSample {
    pub features: FeatureMap,
    pub ground_truth: Vec<GroundTruthObject>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageLabelSample {
    pub features: FeatureMap,
    pub label: usize,
}

impl ImageLabelSample {
    pub fn new(features: FeatureMap, labels: &[usize]) -> Result<Self> {
        match labels {
            [label] => Ok(Self {
                features,
                label: *label,
            }),
            _ => Err(Error::MultiLabel(labels.len())),
        }
    }
}

/// Which classes the image-label samples are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassificationPool {
    /// Every seen class, with or without boxes.
    AllSeen,
    /// Only the seen classes that have no box annotations.
    LabelOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticWorldConfig {
    pub grid_size: usize,
    /// Image-label samples use a smaller grid, `grid_size / 2` when `None`.
    pub cls_grid_size: Option<usize>,
    /// Prototype channels; each cell carries `feature_dim + GEOMETRY_CHANNELS` values.
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub n_unseen: usize,
    /// Seen classes that appear only in image-label samples.
    pub n_label_only: usize,
    pub noise_sigma: f64,
    /// Standard deviation of per-prompt noise on class text embeddings.
    pub text_noise_sigma: f64,
    pub objects_per_image: (usize, usize),
    /// Object side length range, in cells.
    pub object_cells: (f64, f64),
    pub det_images: usize,
    pub cls_images: usize,
    pub test_images: usize,
    pub cls_pool: ClassificationPool,
    /// Pulls unseen prototypes toward random mixtures of the label-only
    /// prototypes: 0 leaves them independent, 1 puts them in that span.
    pub unseen_affinity: f64,
    /// Explicit unseen class names; the last `n_unseen` classes when empty.
    pub unseen: Vec<String>,
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            grid_size: 8,
            cls_grid_size: None,
            feature_dim: 12,
            embed_dim: 16,
            n_classes: 12,
            n_unseen: 3,
            n_label_only: 3,
            noise_sigma: 0.1,
            text_noise_sigma: 0.05,
            objects_per_image: (1, 3),
            object_cells: (1.5, 3.0),
            det_images: 60,
            cls_images: 240,
            test_images: 40,
            cls_pool: ClassificationPool::AllSeen,
            unseen_affinity: 0.0,
            unseen: Vec::new(),
            seed: 0,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.grid_size < 2 {
            return bad(format!("grid_size must be >= 2, got {}", self.grid_size));
        }
        if self.cls_grid() < 1 || self.cls_grid() > self.grid_size {
            return bad(format!(
                "cls_grid_size must be in 1..=grid_size, got {}",
                self.cls_grid()
            ));
        }
        if self.feature_dim < 4 {
            return bad(format!(
                "feature_dim must be >= 4, got {}",
                self.feature_dim
            ));
        }
        if self.embed_dim < 2 {
            return bad(format!("embed_dim must be >= 2, got {}", self.embed_dim));
        }
        if self.n_classes < 4 {
            return bad(format!("n_classes must be >= 4, got {}", self.n_classes));
        }
        if self.n_unseen < 1 || self.n_unseen >= self.n_classes {
            return bad(format!(
                "n_unseen must be in 1..n_classes, got {}",
                self.n_unseen
            ));
        }
        if !self.unseen.is_empty() && self.unseen.len() != self.n_unseen {
            return bad(format!(
                "explicit unseen list has {} classes but n_unseen is {}",
                self.unseen.len(),
                self.n_unseen
            ));
        }
        if self.n_label_only + self.n_unseen >= self.n_classes {
            return bad("at least one seen class needs box annotations".into());
        }
        let (lo, hi) = self.objects_per_image;
        if lo < 1 || lo > hi {
            return bad(format!("invalid objects_per_image range {lo}..={hi}"));
        }
        let (smin, smax) = self.object_cells;
        if !(smin > 0.0) || smin > smax || smax > self.grid_size as f64 {
            return bad(format!("invalid object_cells range {smin}..{smax}"));
        }
        if !(self.noise_sigma >= 0.0) || !(self.text_noise_sigma >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.unseen_affinity) {
            return bad(format!(
                "unseen_affinity must lie in [0, 1], got {}",
                self.unseen_affinity
            ));
        }
        if self.det_images == 0 {
            return bad("det_images must be positive".into());
        }
        Ok(())
    }

    pub fn cls_grid(&self) -> usize {
        self.cls_grid_size.unwrap_or((self.grid_size / 2).max(1))
    }

    pub fn channels(&self) -> usize {
        self.feature_dim + GEOMETRY_CHANNELS
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes)
            .map(|i| format!("class_{i:02}"))
            .collect()
    }
}

/// Partition of world classes by the supervision they receive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSplit {
    /// Seen classes with box annotations.
    pub detection: Vec<usize>,
    /// Seen classes present only through image labels.
    pub label_only: Vec<usize>,
    pub unseen: Vec<usize>,
}

impl WorldSplit {
    pub fn seen(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self
            .detection
            .iter()
            .chain(&self.label_only)
            .copied()
            .collect();
        s.sort_unstable();
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: SyntheticWorldConfig,
    pub class_names: Vec<String>,
    pub prototypes: Vec<Vec<f64>>,
    pub split: WorldSplit,
    /// Class indices image-label samples are drawn from.
    pub cls_pool: Vec<usize>,
    pub detection: Vec<DetectionSample>,
    pub classification: Vec<ImageLabelSample>,
    /// Held-out images containing only unseen classes.
    pub test_unseen: Vec<DetectionSample>,
    /// Held-out images containing only box-annotated seen classes.
    pub test_seen: Vec<DetectionSample>,
    /// Text embedding per filled prompt, keyed by prompt string.
    pub prompt_embeddings: BTreeMap<String, Embedding>,
}

impl World {
    pub fn registry(&self) -> Result<ClassRegistry> {
        let unseen: BTreeSet<usize> = self.split.unseen.iter().copied().collect();
        let mut counts = vec![0u64; self.class_names.len()];
        for s in self
            .detection
            .iter()
            .chain(&self.test_unseen)
            .chain(&self.test_seen)
        {
            for g in &s.ground_truth {
                counts[g.class] += 1;
            }
        }
        for s in &self.classification {
            counts[s.label] += 1;
        }
        ClassRegistry::new(
            self.class_names
                .iter()
                .enumerate()
                .map(|(i, n)| ClassEntry {
                    name: n.clone(),
                    superclass: Some(format!("group_{}", i / 4)),
                    frequency: Some(counts[i]),
                    role: if unseen.contains(&i) {
                        ClassRole::Unseen
                    } else {
                        ClassRole::Seen
                    },
                })
                .collect(),
        )
    }

    pub fn names_of(&self, classes: &[usize]) -> Vec<String> {
        classes
            .iter()
            .map(|&i| self.class_names[i].clone())
            .collect()
    }
}

/// Geometry code written into a covered cell.
pub fn positional_encoding(
    bbox: &CenterBox,
    row: usize,
    col: usize,
    grid: usize,
) -> [f64; GEOMETRY_CHANNELS] {
    let g = grid as f64;
    let dx = bbox.cx * g - (col as f64 + 0.5);
    let dy = bbox.cy * g - (row as f64 + 0.5);
    let center = center_cell(bbox, grid) == row * grid + col;
    [
        dx,
        dy,
        (bbox.w * g).ln(),
        (bbox.h * g).ln(),
        if center { 1.0 } else { 0.0 },
    ]
}

/// Index of the cell containing the box center.
pub fn center_cell(bbox: &CenterBox, grid: usize) -> usize {
    let g = grid as f64;
    let col = ((bbox.cx * g).floor().max(0.0) as usize).min(grid - 1);
    let row = ((bbox.cy * g).floor().max(0.0) as usize).min(grid - 1);
    row * grid + col
}

/// Cells whose center lies inside the box; always includes the center cell.
pub fn covered_cells(bbox: &CenterBox, grid: usize) -> Vec<usize> {
    let g = grid as f64;
    let c = bbox.to_corners();
    let mut cells = Vec::new();
    for row in 0..grid {
        for col in 0..grid {
            let (x, y) = ((col as f64 + 0.5) / g, (row as f64 + 0.5) / g);
            if x >= c.x1 && x < c.x2 && y >= c.y1 && y < c.y2 {
                cells.push(row * grid + col);
            }
        }
    }
    let center = center_cell(bbox, grid);
    if !cells.contains(&center) {
        cells.push(center);
        cells.sort_unstable();
    }
    cells
}

struct Painter<'a> {
    cfg: &'a SyntheticWorldConfig,
    prototypes: &'a [Vec<f64>],
}

impl Painter<'_> {
    fn noise_map(&self, grid: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        let mut f = FeatureMap::zeros(grid, self.cfg.channels());
        if self.cfg.noise_sigma > 0.0 {
            let n = Normal::new(0.0, self.cfg.noise_sigma).expect("valid sigma");
            f.data.iter_mut().for_each(|v| *v = n.sample(rng));
        }
        f
    }

    fn paint(&self, f: &mut FeatureMap, obj: &GroundTruthObject) {
        let grid = f.grid;
        let fd = self.cfg.feature_dim;
        for cell in covered_cells(&obj.bbox, grid) {
            let (row, col) = (cell / grid, cell % grid);
            let enc = positional_encoding(&obj.bbox, row, col, grid);
            let v = f.cell_mut(cell);
            v[..fd]
                .iter_mut()
                .zip(&self.prototypes[obj.class])
                .for_each(|(a, p)| *a += p);
            v[fd..].iter_mut().zip(enc).for_each(|(a, e)| *a += e);
        }
    }

    /// Random boxes whose center cells and covered cells do not collide.
    fn place(
        &self,
        classes: &[usize],
        grid: usize,
        size_cells: (f64, f64),
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<GroundTruthObject>> {
        let g = grid as f64;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let mut used = BTreeSet::new();
            let mut objs = Vec::with_capacity(classes.len());
            let mut ok = true;
            for &class in classes {
                let w = rng.gen_range(size_cells.0..=size_cells.1).min(g) / g;
                let h = rng.gen_range(size_cells.0..=size_cells.1).min(g) / g;
                let cx = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
                let cy = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
                let bbox = CenterBox::new(cx, cy, w, h);
                let cells = covered_cells(&bbox, grid);
                if cells.iter().any(|c| used.contains(c)) {
                    ok = false;
                    break;
                }
                used.extend(cells);
                objs.push(GroundTruthObject { bbox, class });
            }
            if ok {
                return Ok(objs);
            }
        }
        Err(Error::InfeasiblePlacement(MAX_PLACEMENT_ATTEMPTS))
    }

    fn detection_sample(&self, pool: &[usize], rng: &mut ChaCha8Rng) -> Result<DetectionSample> {
        let (lo, hi) = self.cfg.objects_per_image;
        let k = rng.gen_range(lo..=hi);
        let classes: Vec<usize> = (0..k)
            .map(|_| *pool.choose(rng).expect("non-empty pool"))
            .collect();
        let grid = self.cfg.grid_size;
        let ground_truth = self.place(&classes, grid, self.cfg.object_cells, rng)?;
        let mut features = self.noise_map(grid, rng);
        for o in &ground_truth {
            self.paint(&mut features, o);
        }
        Ok(DetectionSample {
            features,
            ground_truth,
        })
    }

    /// Object-centric image: one large object near the middle.
    fn image_label_sample(&self, pool: &[usize], rng: &mut ChaCha8Rng) -> Result<ImageLabelSample> {
        let grid = self.cfg.cls_grid();
        let g = grid as f64;
        let label = *pool.choose(rng).expect("non-empty pool");
        let lo = (0.5 * g).max(1.0).min(g);
        let size = (lo, (0.8 * g).max(lo));
        let obj = self.place(&[label], grid, size, rng)?.remove(0);
        let mut features = self.noise_map(grid, rng);
        self.paint(&mut features, &obj);
        ImageLabelSample::new(features, &[label])
    }
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = crate::embedding::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn resolve_split(cfg: &SyntheticWorldConfig, names: &[String]) -> Result<WorldSplit> {
    let n = cfg.n_classes;
    let unseen: Vec<usize> = if cfg.unseen.is_empty() {
        (n - cfg.n_unseen..n).collect()
    } else {
        let mut idx = Vec::new();
        for u in &cfg.unseen {
            let i = names
                .iter()
                .position(|x| x == u)
                .ok_or_else(|| Error::MissingClasses(vec![u.clone()]))?;
            idx.push(i);
        }
        idx.sort_unstable();
        idx.dedup();
        if idx.len() != cfg.n_unseen {
            return Err(Error::InvalidConfig("duplicate unseen classes".into()));
        }
        idx
    };
    let seen: Vec<usize> = (0..n).filter(|i| !unseen.contains(i)).collect();
    let split_at = seen.len() - cfg.n_label_only;
    Ok(WorldSplit {
        detection: seen[..split_at].to_vec(),
        label_only: seen[split_at..].to_vec(),
        unseen,
    })
}

pub fn generate_world(cfg: &SyntheticWorldConfig, templates: &PromptTemplateSet) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let class_names = cfg.class_names();
    let split = resolve_split(cfg, &class_names)?;

    let mut prototypes: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| random_unit(cfg.feature_dim, &mut rng))
        .collect();
    let a = cfg.unseen_affinity;
    if a > 0.0 && !split.label_only.is_empty() {
        for &u in &split.unseen {
            let mix = random_unit(split.label_only.len(), &mut rng);
            let mut v: Vec<f64> = prototypes[u].iter().map(|x| (1.0 - a) * x).collect();
            for (&l, w) in split.label_only.iter().zip(&mix) {
                v.iter_mut()
                    .zip(&prototypes[l])
                    .for_each(|(x, p)| *x += a * w * p);
            }
            let n = crate::embedding::norm(&v);
            if n > 1e-9 {
                prototypes[u] = v.into_iter().map(|x| x / n).collect();
            }
        }
    }
    // fixed random map from prototype space into the text embedding space
    let scale = 1.0 / (cfg.feature_dim as f64).sqrt();
    let projection: Vec<Vec<f64>> = (0..cfg.embed_dim)
        .map(|_| {
            (0..cfg.feature_dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect()
        })
        .collect();
    let text_noise = Normal::new(0.0, cfg.text_noise_sigma.max(0.0)).expect("valid sigma");
    let mut prompt_embeddings = BTreeMap::new();
    for (class, name) in class_names.iter().enumerate() {
        let base: Vec<f64> = projection
            .iter()
            .map(|row| crate::embedding::dot(row, &prototypes[class]))
            .collect();
        for prompt in templates.fill(name) {
            let v: Vec<f64> = base
                .iter()
                .map(|b| {
                    b + if cfg.text_noise_sigma > 0.0 {
                        text_noise.sample(&mut rng)
                    } else {
                        0.0
                    }
                })
                .collect();
            prompt_embeddings.insert(prompt, normalize(&Embedding::new(v)?)?);
        }
    }

    let cls_pool = match cfg.cls_pool {
        ClassificationPool::AllSeen => split.seen(),
        ClassificationPool::LabelOnly => split.label_only.clone(),
    };
    let painter = Painter {
        cfg,
        prototypes: &prototypes,
    };
    let detection = (0..cfg.det_images)
        .map(|_| painter.detection_sample(&split.detection, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let classification = if cfg.cls_images > 0 {
        if cls_pool.is_empty() {
            return Err(Error::InvalidConfig("classification pool is empty".into()));
        }
        (0..cfg.cls_images)
            .map(|_| painter.image_label_sample(&cls_pool, &mut rng))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let test_unseen = (0..cfg.test_images)
        .map(|_| painter.detection_sample(&split.unseen, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let test_seen = (0..cfg.test_images)
        .map(|_| painter.detection_sample(&split.detection, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    Ok(World {
        config: cfg.clone(),
        class_names,
        prototypes,
        split,
        cls_pool,
        detection,
        classification,
        test_unseen,
        test_seen,
        prompt_embeddings,
    })
}
