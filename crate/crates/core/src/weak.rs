//! Weak supervision from image-label-only samples: pseudo ground-truth box
//! selection, mixed-batch loss composition and the oversampled stream.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{ClassifierMatrix, Embedding, TemperatureParam};
use crate::error::{Error, Result};
use crate::geometry::CenterBox;
use crate::loss::{alignment_eval, similarity_scores, GradientBundle, LossValue};

/// Objectness filter applied before pseudo-box selection during training.
pub const DEFAULT_TRAIN_OBJECTNESS_FILTER: f64 = 0.001;
/// Classification-to-detection sample ratio of the joint stream.
pub const DEFAULT_OVERSAMPLE_RATIO: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct BoxPrediction {
    pub bbox: CenterBox,
    pub objectness: f64,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoAssignment {
    pub selected_index: Option<usize>,
    /// Class score `s_t` of the selected box, 0 when nothing was selected.
    pub score: f64,
}

pub fn filter_by_objectness(preds: &[BoxPrediction], th_obj: f64) -> Vec<usize> {
    preds
        .iter()
        .enumerate()
        .filter(|(_, p)| p.objectness >= th_obj)
        .map(|(i, _)| i)
        .collect()
}

/// Picks, among predictions passing the objectness filter, the one whose
/// embedding scores highest for class `target`. Ties go to the lowest index.
pub fn select_pseudo_box(
    preds: &[BoxPrediction],
    classifier: &ClassifierMatrix,
    temperature: &TemperatureParam,
    target: usize,
    th_obj: f64,
) -> PseudoAssignment {
    let mut best = PseudoAssignment {
        selected_index: None,
        score: 0.0,
    };
    for i in filter_by_objectness(preds, th_obj) {
        // zero-norm embeddings have no direction and cannot be scored
        let Ok(s) = similarity_scores(&preds[i].embedding, classifier, temperature) else {
            continue;
        };
        let Some(&score) = s.as_slice().get(target) else {
            continue;
        };
        if best.selected_index.is_none() || score > best.score {
            best = PseudoAssignment {
                selected_index: Some(i),
                score,
            };
        }
    }
    best
}

/// Loss of an image-label-only sample. Only the selected box's embedding
/// receives gradient; box and objectness outputs receive none.
#[derive(Debug, Clone)]
pub struct ClassificationImageLoss {
    pub assignment: PseudoAssignment,
    pub loss: LossValue,
    /// Gradient for the selected prediction's embedding (and the temperature).
    pub grad: Option<GradientBundle>,
}

pub fn classification_image_loss(
    preds: &[BoxPrediction],
    classifier: &ClassifierMatrix,
    temperature: &TemperatureParam,
    target: usize,
    th_obj: f64,
) -> Result<ClassificationImageLoss> {
    if target >= classifier.n_classes() {
        return Err(Error::ClassIndexOutOfRange {
            index: target,
            n: classifier.n_classes(),
        });
    }
    let assignment = select_pseudo_box(preds, classifier, temperature, target, th_obj);
    match assignment.selected_index {
        None => Ok(ClassificationImageLoss {
            assignment,
            loss: LossValue::ZERO,
            grad: None,
        }),
        Some(i) => {
            let ev = alignment_eval(&preds[i].embedding, classifier, temperature, target)?;
            Ok(ClassificationImageLoss {
                assignment,
                loss: ev.loss,
                grad: Some(ev.grad),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchComposition {
    pub n_detection: usize,
    pub n_classification: usize,
}

impl BatchComposition {
    pub fn new(n_detection: usize, n_classification: usize) -> Result<Self> {
        if n_detection + n_classification == 0 {
            return Err(Error::InvalidData("empty batch".into()));
        }
        Ok(Self {
            n_detection,
            n_classification,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.n_detection + self.n_classification
    }
}

/// Per-sample losses of a detection-annotated image. `cls` is `None` when
/// the image has no assigned object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionSampleLosses {
    pub bbox: LossValue,
    pub obj: LossValue,
    pub cls: Option<LossValue>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub bbox: f64,
    pub obj: f64,
    pub cls: f64,
    pub total: f64,
    /// Weight applied to each detection sample's box and objectness loss.
    pub det_weight: f64,
    /// Weight applied to each contributing classification loss.
    pub cls_weight: f64,
    pub n_cls_contributing: usize,
}

/// Box and objectness terms are averaged over detection samples only;
/// classification terms over every sample that produced one.
pub fn compose_batch_loss(
    det_losses: &[DetectionSampleLosses],
    cls_losses: &[Option<LossValue>],
    comp: BatchComposition,
) -> Result<BatchLoss> {
    if det_losses.len() != comp.n_detection || cls_losses.len() != comp.n_classification {
        return Err(Error::InvalidData(format!(
            "batch composition {comp:?} does not match {} detection / {} classification losses",
            det_losses.len(),
            cls_losses.len()
        )));
    }
    let det_weight = if comp.n_detection == 0 {
        0.0
    } else {
        1.0 / comp.n_detection as f64
    };
    let contributing: Vec<f64> = det_losses
        .iter()
        .filter_map(|d| d.cls)
        .chain(cls_losses.iter().flatten().copied())
        .map(LossValue::value)
        .collect();
    let cls_weight = if contributing.is_empty() {
        0.0
    } else {
        1.0 / contributing.len() as f64
    };
    let bbox = det_losses.iter().map(|d| d.bbox.value()).sum::<f64>() * det_weight;
    let obj = det_losses.iter().map(|d| d.obj.value()).sum::<f64>() * det_weight;
    let cls = contributing.iter().sum::<f64>() * cls_weight;
    Ok(BatchLoss {
        bbox,
        obj,
        cls,
        total: bbox + obj + cls,
        det_weight,
        cls_weight,
        n_cls_contributing: contributing.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleRef {
    Detection(usize),
    Classification(usize),
}

/// Number of detection slots in one joint epoch.
pub fn detection_slots(cls_size: usize, ratio: f64) -> usize {
    ((cls_size as f64 / ratio).round() as usize).max(1)
}

/// One epoch of the joint stream: every classification sample once, and
/// detection samples repeated as needed so that classification samples
/// appear about `ratio` times as often. Deterministic in `seed`.
pub fn oversample_interleave(
    det_size: usize,
    cls_size: usize,
    ratio: f64,
    seed: u64,
) -> Result<Vec<SampleRef>> {
    if det_size == 0 || cls_size == 0 || !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "oversampling needs non-empty sets and a positive ratio (got {det_size}, {cls_size}, {ratio})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = detection_slots(cls_size, ratio);
    let mut stream: Vec<SampleRef> = Vec::with_capacity(slots + cls_size);
    let mut order: Vec<usize> = Vec::new();
    while stream.len() < slots {
        if order.is_empty() {
            order = (0..det_size).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        stream.push(SampleRef::Detection(order.pop().unwrap()));
    }
    stream.extend((0..cls_size).map(SampleRef::Classification));
    stream.shuffle(&mut rng);
    Ok(stream)
}
