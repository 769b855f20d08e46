//! Subcommand implementations. Each takes an already-validated
//! configuration and returns a one-line summary for stdout.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use zsd_align_core::embedding::{
    build_class_embedding, build_classifier, ClassRegistry, Embedding, PromptTemplateSet,
};
use zsd_align_core::eval::{
    evaluate, match_detections, precision_recall_curve, EvalReport, GroundTruthBox,
};
use zsd_align_core::inference::{predict, Detection};
use zsd_align_core::model::ToyModel;
use zsd_align_core::splits::{coco_registry, make_rare_split, shipped_templates, SplitSpec};
use zsd_align_core::train::{
    train, ClassSubsetClassifier, Classifiers, EvalSets, TrainMode, TrainState, TrainingData,
};
use zsd_align_core::world::{generate_world, DetectionSample, World};

use crate::config::{config_hash, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::formats::{
    layout, load_detection_set, load_label_set, read_json, write_features, write_json, write_jsonl,
    AnnotationFile, CategoryRecord, Checkpoint, DetectionRecord, EmbeddingFile, LabelFile,
    LabelRecord, WorldMeta, CHECKPOINT_FORMAT,
};

/// Builds a classifier from text embeddings. With `templates`, the
/// embeddings are keyed by filled prompt and averaged per class over the
/// template set; otherwise they are keyed by class name.
pub fn build_classifier_cmd(
    embeddings: &Path,
    registry: &Path,
    templates: Option<&PromptTemplateSet>,
    out: &Path,
) -> CliResult<String> {
    let file: EmbeddingFile = read_json(embeddings)?;
    let table = file.to_map()?;
    let registry: ClassRegistry = read_json(registry)?;
    let per_class = match templates {
        None => table,
        Some(t) => registry
            .names()
            .map(|name| {
                let e = build_class_embedding(name, t, |prompt| {
                    table.get(prompt).cloned().ok_or_else(|| {
                        zsd_align_core::Error::MissingClasses(vec![prompt.to_string()])
                    })
                })?;
                Ok((name.to_string(), e))
            })
            .collect::<CliResult<_>>()?,
    };
    let classifier = build_classifier(&registry, &per_class)?;
    write_json(out, &EmbeddingFile::from_classifier(&classifier))?;
    Ok(format!(
        "classifier: {} classes, dimension {}",
        classifier.n_classes(),
        classifier.dim()
    ))
}

/// Writes a rare-class split of `registry`, or of the bundled COCO
/// metadata when no registry is given.
pub fn split_cmd(registry: Option<&Path>, fraction: f64, out: &Path) -> CliResult<String> {
    let registry = match registry {
        Some(p) => read_json(p)?,
        None => coco_registry(),
    };
    let split = make_rare_split(&registry, fraction)?;
    write_json(out, &split)?;
    Ok(format!(
        "split: {} seen, {} unseen",
        split.seen.len(),
        split.unseen.len()
    ))
}

/// Generates a synthetic dataset into `out`. A split file fixes which
/// classes are unseen.
pub fn gen_world_cmd(
    cfg: &ExperimentConfig,
    out: &Path,
    split: Option<&Path>,
) -> CliResult<String> {
    let mut world_cfg = cfg.world.clone();
    if let Some(p) = split {
        let s: SplitSpec = read_json(p)?;
        let names: BTreeSet<String> = world_cfg.class_names().into_iter().collect();
        let listed: BTreeSet<String> = s.seen.iter().chain(&s.unseen).cloned().collect();
        if names != listed || s.seen.len() + s.unseen.len() != names.len() {
            return Err(CliError::data(format!(
                "{}: split must partition the world classes {:?}",
                p.display(),
                names
            )));
        }
        world_cfg.n_unseen = s.unseen.len();
        world_cfg.unseen = s.unseen;
    }
    let world = generate_world(&world_cfg, &shipped_templates())?;
    write_dataset(&world, out)?;
    Ok(format!(
        "dataset: {} detection, {} image-label, {}+{} test images in {}",
        world.detection.len(),
        world.classification.len(),
        world.test_unseen.len(),
        world.test_seen.len(),
        out.display()
    ))
}

pub fn write_dataset(world: &World, dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let registry = world.registry()?;
    let meta = WorldMeta {
        config: world.config.clone(),
        class_names: world.class_names.clone(),
        detection_classes: world.names_of(&world.split.detection),
        label_only_classes: world.names_of(&world.split.label_only),
        unseen_classes: world.names_of(&world.split.unseen),
        classification_pool: world.names_of(&world.cls_pool),
    };
    write_json(&dir.join(layout::WORLD), &meta)?;
    write_json(
        &dir.join(layout::SPLIT),
        &SplitSpec {
            seen: meta.seen_classes(),
            unseen: meta.unseen_classes.clone(),
        },
    )?;
    write_json(&dir.join(layout::REGISTRY), &registry)?;
    write_json(
        &dir.join(layout::PROMPT_EMBEDDINGS),
        &EmbeddingFile::from_entries(
            world.config.embed_dim,
            world.prompt_embeddings.iter().map(|(k, v)| (k.as_str(), v)),
        ),
    )?;
    let categories: Vec<CategoryRecord> = registry
        .entries()
        .iter()
        .map(|e| CategoryRecord {
            name: e.name.clone(),
            superclass: e.superclass.clone(),
        })
        .collect();
    let channels = world.config.channels();
    for (set, samples) in [
        (layout::TRAIN, &world.detection),
        (layout::TEST_UNSEEN, &world.test_unseen),
        (layout::TEST_SEEN, &world.test_seen),
    ] {
        let features = layout::features(set);
        write_features(
            &dir.join(&features),
            &samples.iter().map(|s| &s.features).collect::<Vec<_>>(),
            world.config.grid_size,
            channels,
        )?;
        let ann = AnnotationFile::from_samples(
            samples,
            &world.class_names,
            categories.clone(),
            &features,
        );
        write_json(&dir.join(layout::annotations(set)), &ann)?;
    }
    let features = layout::features(layout::CLASSIFICATION);
    write_features(
        &dir.join(&features),
        &world
            .classification
            .iter()
            .map(|s| &s.features)
            .collect::<Vec<_>>(),
        world.config.cls_grid(),
        channels,
    )?;
    write_json(
        &dir.join(layout::labels(layout::CLASSIFICATION)),
        &LabelFile {
            images: world
                .classification
                .iter()
                .enumerate()
                .map(|(i, s)| LabelRecord {
                    id: i as u64,
                    label: world.class_names[s.label].clone(),
                })
                .collect(),
            features,
        },
    )
}

/// A generated dataset directory with its text embeddings.
pub struct Dataset {
    pub dir: PathBuf,
    pub meta: WorldMeta,
    pub prompt_embeddings: std::collections::BTreeMap<String, Embedding>,
}

impl Dataset {
    pub fn open(dir: &Path) -> CliResult<Self> {
        let meta: WorldMeta = read_json(&dir.join(layout::WORLD))?;
        let prompts: EmbeddingFile = read_json(&dir.join(layout::PROMPT_EMBEDDINGS))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
            prompt_embeddings: prompts.to_map()?,
        })
    }

    pub fn classifier(&self, names: &[String]) -> CliResult<ClassSubsetClassifier> {
        let classes = self.meta.indices(names)?;
        Ok(ClassSubsetClassifier::build(
            &self.meta.class_names,
            &classes,
            &self.prompt_embeddings,
            &shipped_templates(),
        )?)
    }

    pub fn detection_set(&self, set: &str) -> CliResult<(Vec<u64>, Vec<DetectionSample>)> {
        load_detection_set(
            &self.dir.join(layout::annotations(set)),
            &self.meta.class_names,
        )
    }

    fn check_model(&self, model: &ToyModel) -> CliResult<()> {
        let c = &self.meta.config;
        if model.input_dim != c.channels() || model.embed_dim != c.embed_dim {
            return Err(CliError::data(format!(
                "checkpoint expects {} feature channels and {}-dim embeddings; dataset has {} and {}",
                model.input_dim,
                model.embed_dim,
                c.channels(),
                c.embed_dim
            )));
        }
        Ok(())
    }
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub mode: TrainMode,
    pub out: &'a Path,
    pub resume: Option<&'a Path>,
    pub log: Option<&'a Path>,
}

/// Metric log path used when none is given: `<checkpoint>.metrics.jsonl`.
pub fn default_log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_os_string();
    s.push(".metrics.jsonl");
    PathBuf::from(s)
}

pub fn train_cmd(cfg: &ExperimentConfig, args: &TrainArgs<'_>) -> CliResult<String> {
    let ds = Dataset::open(args.data)?;
    let meta = &ds.meta;
    let hash = config_hash(&meta.config, &cfg.model, cfg.seed);
    let mut state = match args.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.config_hash != hash {
                return Err(CliError::usage(format!(
                    "{}: checkpoint was trained under a different configuration (hash {} vs {})",
                    p.display(),
                    ckpt.config_hash,
                    hash
                )));
            }
            ckpt.state
        }
        None => {
            let model = ToyModel::init(
                meta.config.channels(),
                cfg.model.hidden_dim,
                meta.config.embed_dim,
                cfg.seed,
            );
            TrainState {
                temperature: cfg.temperature.param(),
                ..TrainState::new(model)
            }
        }
    };
    ds.check_model(&state.model)?;

    let (_, detection) = ds.detection_set(layout::TRAIN)?;
    let classification = if args.mode == TrainMode::Joint {
        load_label_set(
            &args.data.join(layout::labels(layout::CLASSIFICATION)),
            &meta.class_names,
        )?
    } else {
        Vec::new()
    };
    let classifiers = Classifiers {
        detection: ds.classifier(&meta.detection_classes)?,
        classification: ds.classifier(&meta.classification_pool)?,
    };
    let (_, test_unseen) = ds.detection_set(layout::TEST_UNSEEN)?;
    let (_, test_seen) = ds.detection_set(layout::TEST_SEEN)?;
    let eval = if test_unseen.is_empty() || test_seen.is_empty() {
        None
    } else {
        Some(EvalSets {
            unseen: &test_unseen,
            unseen_classifier: ds.classifier(&meta.unseen_classes)?,
            seen: &test_seen,
            seen_classifier: ds.classifier(&meta.detection_classes)?,
            inference: cfg.inference,
            every: cfg.eval.every,
        })
    };
    let data = TrainingData {
        detection: &detection,
        classification: &classification,
    };
    let records = train(
        &mut state,
        data,
        &classifiers,
        &cfg.train,
        &cfg.weak,
        args.mode,
        eval.as_ref(),
    )?;

    write_json(
        args.out,
        &Checkpoint {
            format_version: CHECKPOINT_FORMAT,
            config_hash: hash,
            state,
        },
    )?;
    let log = args
        .log
        .map_or_else(|| default_log_path(args.out), Path::to_path_buf);
    write_jsonl(&log, &records)?;
    let last = records.last();
    Ok(format!(
        "trained {} epochs; unseen mAP {}",
        records.len(),
        last.and_then(|r| r.map_unseen)
            .map_or_else(|| "n/a".to_string(), |m| format!("{m:.4}"))
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Unseen,
    Seen,
    All,
}

fn subset_label(s: Subset) -> &'static str {
    match s {
        Subset::Unseen => "unseen",
        Subset::Seen => "seen",
        Subset::All => "all",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Classifier over the evaluated classes only.
    Zsd,
    /// Classifier over every class.
    Gzsd,
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub subset: Subset,
    pub mode: EvalMode,
    /// Annotation file to evaluate instead of the dataset's test split.
    pub annotations: Option<&'a Path>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutput {
    pub mode: EvalMode,
    /// Classes scored by the classifier, in column order.
    pub classifier: Vec<String>,
    pub iou_threshold: f64,
    pub recall_k: usize,
    pub n_images: usize,
    #[serde(flatten)]
    pub report: EvalReport,
}

struct Prepared {
    state: TrainState,
    classifier: ClassSubsetClassifier,
    subset_classes: Vec<usize>,
    subset_columns: Vec<usize>,
    image_ids: Vec<u64>,
    samples: Vec<DetectionSample>,
}

fn prepare(args: &EvalArgs<'_>) -> CliResult<Prepared> {
    let ds = Dataset::open(args.data)?;
    let meta = &ds.meta;
    let ckpt = Checkpoint::load(args.checkpoint)?;
    ds.check_model(&ckpt.state.model)?;
    let subset_names = match args.subset {
        Subset::Unseen => meta.unseen_classes.clone(),
        Subset::Seen => meta.seen_classes(),
        Subset::All => meta.class_names.clone(),
    };
    let classifier_names = match args.mode {
        EvalMode::Zsd => subset_names.clone(),
        EvalMode::Gzsd => meta.class_names.clone(),
    };
    let (image_ids, samples) = match args.annotations {
        Some(p) => load_detection_set(p, &meta.class_names)?,
        None => match args.subset {
            Subset::Unseen => ds.detection_set(layout::TEST_UNSEEN)?,
            Subset::Seen => ds.detection_set(layout::TEST_SEEN)?,
            Subset::All => {
                let (mut ids, mut s) = ds.detection_set(layout::TEST_UNSEEN)?;
                let (ids2, s2) = ds.detection_set(layout::TEST_SEEN)?;
                let offset = ids.iter().max().map_or(0, |m| m + 1);
                ids.extend(ids2.into_iter().map(|i| i + offset));
                s.extend(s2);
                (ids, s)
            }
        },
    };
    let subset_classes = meta.indices(&subset_names)?;
    let classifier = ds.classifier(&classifier_names)?;
    let subset_columns = subset_classes
        .iter()
        .map(|&c| {
            classifier
                .column_of(c)
                .expect("subset classes are classifier columns")
        })
        .collect();
    Ok(Prepared {
        state: ckpt.state,
        classifier,
        subset_classes,
        subset_columns,
        image_ids,
        samples,
    })
}

fn run_predict(p: &Prepared, cfg: &ExperimentConfig) -> CliResult<Vec<Vec<Detection>>> {
    p.samples
        .iter()
        .map(|s| {
            Ok(predict(
                &p.state.model,
                &s.features,
                &p.classifier.matrix,
                &p.state.temperature,
                &cfg.inference,
            )?)
        })
        .collect()
}

/// Evaluates a checkpoint and writes the JSON report, plus per-class
/// precision/recall points as CSV when `pr_csv` is given.
pub fn evaluate_cmd(
    cfg: &ExperimentConfig,
    args: &EvalArgs<'_>,
    out: &Path,
    pr_csv: Option<&Path>,
) -> CliResult<String> {
    let p = prepare(args)?;
    let has_gt = p
        .samples
        .iter()
        .flat_map(|s| &s.ground_truth)
        .any(|g| p.subset_classes.contains(&g.class));
    if !has_gt {
        return Err(CliError::data(format!(
            "the evaluated images hold no ground truth for the {} classes",
            subset_label(args.subset)
        )));
    }
    let dets = run_predict(&p, cfg)?;
    let gts: Vec<Vec<GroundTruthBox>> = p
        .samples
        .iter()
        .map(|s| {
            s.ground_truth
                .iter()
                .filter_map(|g| {
                    p.classifier.column_of(g.class).map(|col| GroundTruthBox {
                        bbox: g.bbox.to_corners(),
                        class_index: col,
                    })
                })
                .collect()
        })
        .collect();
    let report = evaluate(
        &dets,
        &gts,
        p.classifier.matrix.names(),
        &p.subset_columns,
        subset_label(args.subset),
        cfg.eval.iou_threshold,
        cfg.eval.recall_k,
    )?;
    if let Some(csv) = pr_csv {
        let m = match_detections(&dets, &gts, cfg.eval.iou_threshold)?;
        let mut text = String::from("class,rank,recall,precision\n");
        for &c in &p.subset_columns {
            for (rank, (r, pr)) in precision_recall_curve(&m, c).into_iter().enumerate() {
                text.push_str(&format!(
                    "{},{},{r},{pr}\n",
                    p.classifier.matrix.names()[c],
                    rank + 1
                ));
            }
        }
        fs::write(csv, text).map_err(|e| CliError::io(csv, e))?;
    }
    let summary = format!(
        "{} mAP {:.4}, AR@{} {:.4}",
        report.subset, report.map, cfg.eval.recall_k, report.ar100
    );
    write_json(
        out,
        &EvalOutput {
            mode: args.mode,
            classifier: p.classifier.matrix.names().to_vec(),
            iou_threshold: cfg.eval.iou_threshold,
            recall_k: cfg.eval.recall_k,
            n_images: p.samples.len(),
            report,
        },
    )?;
    Ok(summary)
}

/// Writes the final detections for the selected images as JSON lines.
pub fn infer_cmd(cfg: &ExperimentConfig, args: &EvalArgs<'_>, out: &Path) -> CliResult<String> {
    let p = prepare(args)?;
    let dets = run_predict(&p, cfg)?;
    let names = p.classifier.matrix.names();
    let rows: Vec<DetectionRecord> = p
        .image_ids
        .iter()
        .zip(&dets)
        .flat_map(|(&image_id, ds)| {
            ds.iter().map(move |d| DetectionRecord {
                image_id,
                bbox: [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2],
                class: names[d.class_index].clone(),
                confidence: d.confidence,
            })
        })
        .collect();
    write_jsonl(out, &rows)?;
    Ok(format!(
        "{} detections on {} images",
        rows.len(),
        p.samples.len()
    ))
}
