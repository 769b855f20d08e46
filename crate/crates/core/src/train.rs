//! Detection-only and joint (detection + image-label) training.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{
    build_class_embedding, build_classifier, ClassRegistry, ClassifierMatrix, Embedding,
    PromptTemplateSet, TemperatureParam,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, GroundTruthBox};
use crate::inference::{predict, InferenceConfig};
use crate::loss::{alignment_eval, LossValue};
use crate::model::{
    assign_center_cells, backward, detection_loss_grads, forward_pass, CellGrad, ModelGrads,
    ToyModel,
};
use crate::optim::{sgd_step, OptimizerState, Schedule, TrainConfig};
use crate::weak::{
    classification_image_loss, compose_batch_loss, oversample_interleave, BatchComposition,
    BatchLoss, DetectionSampleLosses, SampleRef, DEFAULT_OVERSAMPLE_RATIO,
    DEFAULT_TRAIN_OBJECTNESS_FILTER,
};
use crate::world::{DetectionSample, ImageLabelSample, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    DetectionOnly,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeakConfig {
    /// Objectness filter before pseudo-box selection.
    pub th_obj: f64,
    /// Classification samples per detection sample in the joint stream.
    pub oversample_ratio: f64,
}

impl Default for WeakConfig {
    fn default() -> Self {
        Self {
            th_obj: DEFAULT_TRAIN_OBJECTNESS_FILTER,
            oversample_ratio: DEFAULT_OVERSAMPLE_RATIO,
        }
    }
}

impl WeakConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.th_obj) {
            return Err(Error::InvalidConfig(format!(
                "weak.th_obj must lie in [0, 1], got {}",
                self.th_obj
            )));
        }
        if !(self.oversample_ratio > 0.0) || !self.oversample_ratio.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "weak.oversample_ratio must be positive, got {}",
                self.oversample_ratio
            )));
        }
        Ok(())
    }
}

/// A classifier over a subset of world classes, with the mapping from
/// world class index to classifier column.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSubsetClassifier {
    pub matrix: ClassifierMatrix,
    /// `classes[i]` is the world class index of column `i`.
    pub classes: Vec<usize>,
}

impl ClassSubsetClassifier {
    /// Averages each class's prompt embeddings over `templates`.
    pub fn build(
        class_names: &[String],
        classes: &[usize],
        prompt_embeddings: &BTreeMap<String, Embedding>,
        templates: &PromptTemplateSet,
    ) -> Result<Self> {
        let names: Vec<String> = classes.iter().map(|&c| class_names[c].clone()).collect();
        let registry = ClassRegistry::from_names(names.clone())?;
        let mut per_class = BTreeMap::new();
        for name in &names {
            let e = build_class_embedding(name, templates, |prompt| {
                prompt_embeddings
                    .get(prompt)
                    .cloned()
                    .ok_or_else(|| Error::MissingClasses(vec![prompt.to_string()]))
            })?;
            per_class.insert(name.clone(), e);
        }
        Ok(Self {
            matrix: build_classifier(&registry, &per_class)?,
            classes: classes.to_vec(),
        })
    }

    pub fn column_of(&self, world_class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == world_class)
    }
}

/// The detection classifier `C_D` and the image-label classifier `C_C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifiers {
    pub detection: ClassSubsetClassifier,
    pub classification: ClassSubsetClassifier,
}

impl Classifiers {
    pub fn from_world(world: &World, templates: &PromptTemplateSet) -> Result<Self> {
        Ok(Self {
            detection: ClassSubsetClassifier::build(
                &world.class_names,
                &world.split.detection,
                &world.prompt_embeddings,
                templates,
            )?,
            classification: ClassSubsetClassifier::build(
                &world.class_names,
                &world.cls_pool,
                &world.prompt_embeddings,
                templates,
            )?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub detection: &'a [DetectionSample],
    pub classification: &'a [ImageLabelSample],
}

impl<'a> From<&'a World> for TrainingData<'a> {
    fn from(w: &'a World) -> Self {
        Self {
            detection: &w.detection,
            classification: &w.classification,
        }
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: ToyModel,
    pub temperature: TemperatureParam,
    pub optimizer: OptimizerState,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn new(model: ToyModel) -> Self {
        let optimizer = OptimizerState::new(&model);
        Self {
            model,
            temperature: TemperatureParam::initial(),
            optimizer,
            epochs_done: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mode: TrainMode,
    pub loss_box: f64,
    pub loss_obj: f64,
    pub loss_cls: f64,
    pub map_unseen: Option<f64>,
    pub map_seen: Option<f64>,
    pub ar100_unseen: Option<f64>,
    pub n_det_samples: usize,
    pub n_cls_samples: usize,
    /// Image-label samples with no box passing the objectness filter.
    pub n_cls_skipped: usize,
    pub lr: f64,
    pub temperature_scale: f64,
}

/// Held-out sets with the classifiers used to score them.
#[derive(Debug, Clone)]
pub struct EvalSets<'a> {
    pub unseen: &'a [DetectionSample],
    pub unseen_classifier: ClassSubsetClassifier,
    pub seen: &'a [DetectionSample],
    pub seen_classifier: ClassSubsetClassifier,
    pub inference: InferenceConfig,
    pub every: usize,
}

impl<'a> EvalSets<'a> {
    pub fn from_world(
        world: &'a World,
        templates: &PromptTemplateSet,
        inference: InferenceConfig,
    ) -> Result<Self> {
        Ok(Self {
            unseen: &world.test_unseen,
            unseen_classifier: ClassSubsetClassifier::build(
                &world.class_names,
                &world.split.unseen,
                &world.prompt_embeddings,
                templates,
            )?,
            seen: &world.test_seen,
            seen_classifier: ClassSubsetClassifier::build(
                &world.class_names,
                &world.split.detection,
                &world.prompt_embeddings,
                templates,
            )?,
            inference,
            every: 1,
        })
    }
}

/// Runs inference on `samples` and evaluates at IoU 0.5 / AR@100 over the
/// world classes `subset` (which must all be classifier columns).
pub fn evaluate_samples(
    model: &ToyModel,
    temperature: &TemperatureParam,
    samples: &[DetectionSample],
    classifier: &ClassSubsetClassifier,
    subset: &[usize],
    subset_label: &str,
    cfg: &InferenceConfig,
) -> Result<EvalReport> {
    let columns: Vec<usize> = subset
        .iter()
        .map(|&c| {
            classifier.column_of(c).ok_or_else(|| {
                Error::InvalidData(format!("class {c} is not scored by the classifier"))
            })
        })
        .collect::<Result<_>>()?;
    let mut dets = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for s in samples {
        dets.push(predict(
            model,
            &s.features,
            &classifier.matrix,
            temperature,
            cfg,
        )?);
        gts.push(
            s.ground_truth
                .iter()
                .filter_map(|g| {
                    classifier.column_of(g.class).map(|col| GroundTruthBox {
                        bbox: g.bbox.to_corners(),
                        class_index: col,
                    })
                })
                .collect::<Vec<_>>(),
        );
    }
    evaluate(
        &dets,
        &gts,
        classifier.matrix.names(),
        &columns,
        subset_label,
        0.5,
        cfg.max_detections,
    )
}

/// Loss and parameter gradient of one mini-batch.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub loss: BatchLoss,
    pub grads: ModelGrads,
    pub n_cls_skipped: usize,
}

struct DetTerms {
    losses: DetectionSampleLosses,
    cell_grads: Vec<CellGrad>,
    /// Per assigned cell: unweighted embedding gradient and log-scale gradient.
    cls_grads: Vec<(usize, Vec<f64>, f64)>,
}

fn detection_terms(
    model: &ToyModel,
    temperature: &TemperatureParam,
    sample: &DetectionSample,
    classifier: &ClassSubsetClassifier,
) -> Result<(DetTerms, crate::model::ForwardPass)> {
    let pass = forward_pass(model, &sample.features)?;
    let assignment = assign_center_cells(&sample.ground_truth, sample.features.grid);
    let (vals, cell_grads) = detection_loss_grads(&pass, &assignment);
    let mut cls_sum = 0.0;
    let mut cls_grads = Vec::with_capacity(assignment.pairs.len());
    for (cell, g) in &assignment.pairs {
        let col = classifier.column_of(g.class).ok_or_else(|| {
            Error::InvalidData(format!(
                "detection sample has class {} outside the detection classifier",
                g.class
            ))
        })?;
        let e = Embedding::new(pass.cells[*cell].embedding.clone())?;
        let ev = alignment_eval(&e, &classifier.matrix, temperature, col)?;
        cls_sum += ev.loss.value();
        cls_grads.push((*cell, ev.grad.d_embedding, ev.grad.d_log_scale));
    }
    let cls = if cls_grads.is_empty() {
        None
    } else {
        Some(LossValue::new(cls_sum / cls_grads.len() as f64)?)
    };
    Ok((
        DetTerms {
            losses: DetectionSampleLosses {
                bbox: LossValue::new(vals.bbox)?,
                obj: LossValue::new(vals.obj)?,
                cls,
            },
            cell_grads,
            cls_grads,
        },
        pass,
    ))
}

/// Composed loss and analytic gradient for a batch of sample references.
pub fn batch_loss_and_grads(
    model: &ToyModel,
    temperature: &TemperatureParam,
    data: TrainingData<'_>,
    classifiers: &Classifiers,
    batch: &[SampleRef],
    th_obj: f64,
) -> Result<BatchOutcome> {
    let mut det_terms = Vec::new();
    let mut cls_terms = Vec::new();
    for r in batch {
        match *r {
            SampleRef::Detection(i) => {
                let s = &data.detection[i];
                let (terms, pass) = detection_terms(model, temperature, s, &classifiers.detection)?;
                det_terms.push((i, terms, pass));
            }
            SampleRef::Classification(i) => {
                let s = &data.classification[i];
                let target = classifiers
                    .classification
                    .column_of(s.label)
                    .ok_or_else(|| {
                        Error::InvalidData(format!(
                            "image label {} outside the classification classifier",
                            s.label
                        ))
                    })?;
                let pass = forward_pass(model, &s.features)?;
                let out = classification_image_loss(
                    &pass.predictions(),
                    &classifiers.classification.matrix,
                    temperature,
                    target,
                    th_obj,
                )?;
                cls_terms.push((i, out, pass));
            }
        }
    }
    let comp = BatchComposition::new(det_terms.len(), cls_terms.len())?;
    let det_losses: Vec<DetectionSampleLosses> =
        det_terms.iter().map(|(_, t, _)| t.losses).collect();
    let cls_losses: Vec<Option<LossValue>> = cls_terms
        .iter()
        .map(|(_, o, _)| o.grad.as_ref().map(|_| o.loss))
        .collect();
    let loss = compose_batch_loss(&det_losses, &cls_losses, comp)?;

    let mut grads = ModelGrads::zeros_like(model);
    for (i, terms, pass) in &det_terms {
        let mut cell_grads = terms.cell_grads.clone();
        for cg in &mut cell_grads {
            cg.d_box = cg.d_box.map(|v| v * loss.det_weight);
            cg.d_obj *= loss.det_weight;
        }
        let w = loss.cls_weight / terms.cls_grads.len().max(1) as f64;
        for (cell, de, dt) in &terms.cls_grads {
            cell_grads[*cell].d_embedding = Some(de.iter().map(|v| v * w).collect());
            grads.d_log_scale += w * dt;
        }
        backward(
            model,
            &data.detection[*i].features,
            pass,
            &cell_grads,
            1.0,
            &mut grads,
        );
    }
    let mut n_cls_skipped = 0;
    for (i, out, pass) in &cls_terms {
        let (Some(cell), Some(g)) = (out.assignment.selected_index, out.grad.as_ref()) else {
            n_cls_skipped += 1;
            continue;
        };
        let cg = CellGrad {
            d_embedding: Some(g.d_embedding.iter().map(|v| v * loss.cls_weight).collect()),
            ..CellGrad::new(cell)
        };
        grads.d_log_scale += loss.cls_weight * g.d_log_scale;
        backward(
            model,
            &data.classification[*i].features,
            pass,
            &[cg],
            1.0,
            &mut grads,
        );
    }
    Ok(BatchOutcome {
        loss,
        grads,
        n_cls_skipped,
    })
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(0x5851_F42D_4C95_7F2D)
}

/// Sample order of one epoch.
pub fn epoch_stream(
    data: TrainingData<'_>,
    mode: TrainMode,
    weak: &WeakConfig,
    seed: u64,
    epoch: usize,
) -> Result<Vec<SampleRef>> {
    let s = epoch_seed(seed, epoch);
    match mode {
        TrainMode::DetectionOnly => {
            if data.detection.is_empty() {
                return Err(Error::InvalidData("no detection samples".into()));
            }
            let mut order: Vec<SampleRef> = (0..data.detection.len())
                .map(SampleRef::Detection)
                .collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
            Ok(order)
        }
        TrainMode::Joint => oversample_interleave(
            data.detection.len(),
            data.classification.len(),
            weak.oversample_ratio,
            s,
        ),
    }
}

/// Optimizer steps in one epoch of `mode`.
pub fn steps_per_epoch(
    data: TrainingData<'_>,
    mode: TrainMode,
    weak: &WeakConfig,
    cfg: &TrainConfig,
) -> usize {
    let n = match mode {
        TrainMode::DetectionOnly => data.detection.len(),
        TrainMode::Joint => {
            crate::weak::detection_slots(data.classification.len(), weak.oversample_ratio)
                + data.classification.len()
        }
    };
    n.div_ceil(cfg.batch_size).div_ceil(cfg.grad_accumulation)
}

/// Trains for `cfg.total_epochs` epochs of `mode`, continuing from `state`.
/// The learning-rate schedule spans this call.
pub fn train(
    state: &mut TrainState,
    data: TrainingData<'_>,
    classifiers: &Classifiers,
    cfg: &TrainConfig,
    weak: &WeakConfig,
    mode: TrainMode,
    eval: Option<&EvalSets<'_>>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    weak.validate()?;
    if mode == TrainMode::Joint && data.classification.is_empty() {
        return Err(Error::InvalidData(
            "joint training needs image-label samples".into(),
        ));
    }
    let spe = steps_per_epoch(data, mode, weak, cfg) as u64;
    let schedule = Schedule::new(cfg, spe);
    let mut phase_step = 0u64;
    let mut records = Vec::with_capacity(cfg.total_epochs);
    for _ in 0..cfg.total_epochs {
        let epoch = state.epochs_done + 1;
        let stream = epoch_stream(data, mode, weak, cfg.seed, epoch)?;
        let batches: Vec<&[SampleRef]> = stream.chunks(cfg.batch_size).collect();
        let (mut sum_box, mut sum_obj, mut sum_cls) = (0.0, 0.0, 0.0);
        let mut n_cls_skipped = 0;
        let mut last_lr = 0.0;
        for group in batches.chunks(cfg.grad_accumulation) {
            let mut acc = ModelGrads::zeros_like(&state.model);
            for batch in group {
                let out = batch_loss_and_grads(
                    &state.model,
                    &state.temperature,
                    data,
                    classifiers,
                    batch,
                    weak.th_obj,
                )?;
                if !out.loss.total.is_finite() {
                    return Err(Error::NonFinite("training loss".into()));
                }
                sum_box += out.loss.bbox;
                sum_obj += out.loss.obj;
                sum_cls += out.loss.cls;
                n_cls_skipped += out.n_cls_skipped;
                acc.add_scaled(&out.grads, 1.0);
            }
            acc.scale(1.0 / group.len() as f64);
            phase_step += 1;
            last_lr = schedule.lr(phase_step);
            sgd_step(
                &mut state.model,
                &mut state.temperature,
                &acc,
                &mut state.optimizer,
                last_lr,
                cfg,
            )?;
        }
        state.epochs_done = epoch;
        let nb = batches.len().max(1) as f64;
        let mut record = EpochRecord {
            epoch,
            mode,
            loss_box: sum_box / nb,
            loss_obj: sum_obj / nb,
            loss_cls: sum_cls / nb,
            map_unseen: None,
            map_seen: None,
            ar100_unseen: None,
            n_det_samples: stream
                .iter()
                .filter(|r| matches!(r, SampleRef::Detection(_)))
                .count(),
            n_cls_samples: stream
                .iter()
                .filter(|r| matches!(r, SampleRef::Classification(_)))
                .count(),
            n_cls_skipped,
            lr: last_lr,
            temperature_scale: state.temperature.scale(),
        };
        if n_cls_skipped > 0 {
            log::info!("epoch {epoch}: {n_cls_skipped} image-label samples had no box above the objectness filter");
        }
        if let Some(ev) = eval {
            let last = records.len() + 1 == cfg.total_epochs;
            if last || (ev.every > 0 && records.len() % ev.every == ev.every - 1) {
                let unseen = evaluate_samples(
                    &state.model,
                    &state.temperature,
                    ev.unseen,
                    &ev.unseen_classifier,
                    &ev.unseen_classifier.classes,
                    "unseen",
                    &ev.inference,
                )?;
                let seen = evaluate_samples(
                    &state.model,
                    &state.temperature,
                    ev.seen,
                    &ev.seen_classifier,
                    &ev.seen_classifier.classes,
                    "seen",
                    &ev.inference,
                )?;
                record.map_unseen = Some(unseen.map);
                record.ar100_unseen = Some(unseen.ar100);
                record.map_seen = Some(seen.map);
            }
        }
        records.push(record);
    }
    Ok(records)
}
