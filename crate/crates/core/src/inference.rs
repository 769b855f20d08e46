//! From per-cell predictions to scored detections.

use serde::{Deserialize, Serialize};

use crate::embedding::{ClassifierMatrix, TemperatureParam};
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, CornerBox};
use crate::loss::similarity_scores;
use crate::model::{forward, ToyModel};
use crate::world::FeatureMap;

pub use crate::geometry::iou;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: CornerBox,
    pub class_index: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub objectness_threshold: f64,
    pub score_cutoff: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            objectness_threshold: 0.1,
            score_cutoff: 0.01,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("objectness_threshold", self.objectness_threshold),
            ("score_cutoff", self.score_cutoff),
            ("nms_iou", self.nms_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Indices sorted by descending confidence, lower index first on ties.
pub fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then(a.cmp(&b))
    });
    order
}

/// Per-class greedy non-maximum suppression. Returns kept indices in
/// descending confidence order.
pub fn nms(dets: &[Detection], iou_th: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in confidence_order(dets) {
        let suppressed = kept.iter().any(|&k| {
            dets[k].class_index == dets[i].class_index
                && iou_unchecked(&dets[k].bbox, &dets[i].bbox) > iou_th
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// Objectness gate, classification-score confidence (objectness is not
/// multiplied in), score cutoff, per-class NMS and top-k truncation.
pub fn predict(
    model: &ToyModel,
    features: &FeatureMap,
    classifier: &ClassifierMatrix,
    temperature: &TemperatureParam,
    cfg: &InferenceConfig,
) -> Result<Vec<Detection>> {
    let preds = forward(model, features)?;
    let mut candidates = Vec::new();
    for p in preds
        .iter()
        .filter(|p| p.objectness >= cfg.objectness_threshold)
    {
        let Ok(s) = similarity_scores(&p.embedding, classifier, temperature) else {
            continue;
        };
        let (class_index, confidence) = s.argmax();
        let bbox = p.bbox.to_corners();
        if confidence < cfg.score_cutoff || !bbox.is_well_formed() {
            continue;
        }
        candidates.push(Detection {
            bbox,
            class_index,
            confidence,
        });
    }
    let mut kept: Vec<Detection> = nms(&candidates, cfg.nms_iou)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    kept.truncate(cfg.max_detections);
    Ok(kept)
}
