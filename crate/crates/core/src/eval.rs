//! mAP@IoU and AR@k over a class subset.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, CornerBox};
use crate::inference::{confidence_order, Detection};

pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub bbox: CornerBox,
    pub class_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchFlag {
    TruePositive,
    FalsePositive,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassMatches {
    pub n_gt: usize,
    /// Detections of this class across all images, by descending confidence.
    pub ranked: Vec<(f64, MatchFlag)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub per_class: BTreeMap<usize, ClassMatches>,
}

/// Greedy matching for one image: detections in descending confidence take
/// the highest-IoU unmatched ground truth of their class (lower index on
/// ties) if that IoU reaches `iou_th`. Returns a flag per input detection
/// and the number of matched ground truths per class.
fn match_image(dets: &[Detection], gts: &[GroundTruthBox], iou_th: f64) -> Vec<MatchFlag> {
    let mut flags = vec![MatchFlag::FalsePositive; dets.len()];
    let mut taken = vec![false; gts.len()];
    for i in confidence_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.class_index != d.class_index {
                continue;
            }
            let v = iou_unchecked(&d.bbox, &g.bbox);
            if v >= iou_th && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            flags[i] = MatchFlag::TruePositive;
        }
    }
    flags
}

pub fn match_detections(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<GroundTruthBox>],
    iou_th: f64,
) -> Result<MatchResult> {
    if dets_per_image.len() != gts_per_image.len() {
        return Err(Error::DimensionMismatch {
            expected: gts_per_image.len(),
            found: dets_per_image.len(),
        });
    }
    let mut result = MatchResult::default();
    // (confidence, image, rank within image, class, flag)
    let mut all: Vec<(f64, usize, usize, usize, MatchFlag)> = Vec::new();
    for (img, (dets, gts)) in dets_per_image.iter().zip(gts_per_image).enumerate() {
        for g in gts {
            result.per_class.entry(g.class_index).or_default().n_gt += 1;
        }
        let flags = match_image(dets, gts, iou_th);
        for (rank, i) in confidence_order(dets).into_iter().enumerate() {
            all.push((dets[i].confidence, img, rank, dets[i].class_index, flags[i]));
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (conf, _, _, class, flag) in all {
        result
            .per_class
            .entry(class)
            .or_default()
            .ranked
            .push((conf, flag));
    }
    Ok(result)
}

/// `(recall, precision)` after each ranked detection of `class`.
pub fn precision_recall_curve(m: &MatchResult, class: usize) -> Vec<(f64, f64)> {
    let Some(cm) = m.per_class.get(&class) else {
        return Vec::new();
    };
    if cm.n_gt == 0 {
        return Vec::new();
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    cm.ranked
        .iter()
        .map(|(_, f)| {
            match f {
                MatchFlag::TruePositive => tp += 1,
                MatchFlag::FalsePositive => fp += 1,
            }
            (tp as f64 / cm.n_gt as f64, tp as f64 / (tp + fp) as f64)
        })
        .collect()
}

/// 101-point interpolated AP. `None` when the class has no ground truth.
pub fn average_precision(m: &MatchResult, class: usize) -> Option<f64> {
    let n_gt = m.per_class.get(&class).map_or(0, |c| c.n_gt);
    if n_gt == 0 {
        return None;
    }
    let curve = precision_recall_curve(m, class);
    let mut envelope: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        while idx < curve.len() && curve[idx].0 < r {
            idx += 1;
        }
        if idx < curve.len() {
            sum += envelope[idx];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

/// Unweighted mean over `subset` classes that have a value.
pub fn mean_ap(per_class: &BTreeMap<usize, Option<f64>>, subset: &[usize]) -> Result<f64> {
    let vals: Vec<f64> = subset
        .iter()
        .filter_map(|c| per_class.get(c).copied().flatten())
        .collect();
    if vals.is_empty() {
        return Err(Error::EmptySubset);
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Recall with each image truncated to its `k` most confident detections
/// (across classes), averaged over `subset` classes with ground truth.
pub fn recall_at_k(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<GroundTruthBox>],
    k: usize,
    iou_th: f64,
    subset: &[usize],
) -> Result<f64> {
    if dets_per_image.len() != gts_per_image.len() {
        return Err(Error::DimensionMismatch {
            expected: gts_per_image.len(),
            found: dets_per_image.len(),
        });
    }
    let mut n_gt: BTreeMap<usize, usize> = BTreeMap::new();
    let mut hits: BTreeMap<usize, usize> = BTreeMap::new();
    for (dets, gts) in dets_per_image.iter().zip(gts_per_image) {
        let top: Vec<Detection> = confidence_order(dets)
            .into_iter()
            .take(k)
            .map(|i| dets[i])
            .collect();
        for g in gts {
            *n_gt.entry(g.class_index).or_default() += 1;
        }
        for (d, f) in top.iter().zip(match_image(&top, gts, iou_th)) {
            if f == MatchFlag::TruePositive {
                *hits.entry(d.class_index).or_default() += 1;
            }
        }
    }
    let recalls: Vec<f64> = subset
        .iter()
        .filter_map(|c| {
            n_gt.get(c)
                .filter(|&&n| n > 0)
                .map(|&n| hits.get(c).copied().unwrap_or(0) as f64 / n as f64)
        })
        .collect();
    if recalls.is_empty() {
        return Err(Error::EmptySubset);
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subset: String,
    pub map: f64,
    pub ar100: f64,
    /// AP per class with ground truth, keyed by class name.
    pub per_class: BTreeMap<String, f64>,
}

/// Full report at `iou_th` with AR truncated to `k` detections per image.
/// `class_names[i]` names class index `i`.
pub fn evaluate(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<GroundTruthBox>],
    class_names: &[String],
    subset: &[usize],
    subset_label: &str,
    iou_th: f64,
    k: usize,
) -> Result<EvalReport> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let m = match_detections(dets_per_image, gts_per_image, iou_th)?;
    let aps: BTreeMap<usize, Option<f64>> = subset
        .iter()
        .map(|&c| (c, average_precision(&m, c)))
        .collect();
    let map = mean_ap(&aps, subset)?;
    let ar100 = recall_at_k(dets_per_image, gts_per_image, k, iou_th, subset)?;
    let per_class = aps
        .iter()
        .filter_map(|(&c, ap)| {
            ap.map(|v| {
                let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
                (name, v)
            })
        })
        .collect();
    Ok(EvalReport {
        subset: subset_label.to_string(),
        map,
        ar100,
        per_class,
    })
}
