//! Temperature-scaled cosine softmax and its cross-entropy alignment loss.

use crate::embedding::{dot, ClassifierMatrix, Embedding, TemperatureParam};
use crate::error::{Error, Result};

/// Softmax probabilities over the classifier columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityVector(Vec<f64>);

impl SimilarityVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index and value of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> (usize, f64) {
        let mut best = (0, self.0[0]);
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > best.1 {
                best = (i, p);
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LossValue(f64);

impl LossValue {
    pub const ZERO: LossValue = LossValue(0.0);

    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        if value < 0.0 {
            return Err(Error::InvalidData(format!("negative loss {value}")));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_embedding: Vec<f64>,
    pub d_log_scale: f64,
}

impl GradientBundle {
    pub fn zeros(dim: usize) -> Self {
        Self {
            d_embedding: vec![0.0; dim],
            d_log_scale: 0.0,
        }
    }
}

/// Loss, probabilities and gradient from a single evaluation.
#[derive(Debug, Clone)]
pub struct AlignmentEval {
    pub loss: LossValue,
    pub scores: SimilarityVector,
    pub grad: GradientBundle,
}

fn cosines(e: &Embedding, c: &ClassifierMatrix) -> Result<(Vec<f64>, f64)> {
    if e.dim() != c.dim() {
        return Err(Error::DimensionMismatch {
            expected: c.dim(),
            found: e.dim(),
        });
    }
    let n = e.norm();
    if n == 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    let cos = c
        .columns()
        .iter()
        .map(|col| dot(e.as_slice(), col.as_slice()) / n)
        .collect();
    Ok((cos, n))
}

/// Max-shifted logits and their log-sum-exp.
fn log_softmax_parts(logits: &[f64]) -> (Vec<f64>, f64) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|z| z - m).collect();
    let lse = shifted.iter().map(|z| z.exp()).sum::<f64>().ln();
    (shifted, lse)
}

pub fn similarity_scores(
    e: &Embedding,
    c: &ClassifierMatrix,
    t: &TemperatureParam,
) -> Result<SimilarityVector> {
    let (cos, _) = cosines(e, c)?;
    let scale = t.scale();
    let logits: Vec<f64> = cos.iter().map(|x| x * scale).collect();
    let (shifted, lse) = log_softmax_parts(&logits);
    Ok(SimilarityVector(
        shifted.iter().map(|z| (z - lse).exp()).collect(),
    ))
}

fn check_target(target: usize, c: &ClassifierMatrix) -> Result<()> {
    if target >= c.n_classes() {
        return Err(Error::ClassIndexOutOfRange {
            index: target,
            n: c.n_classes(),
        });
    }
    Ok(())
}

pub fn alignment_loss(
    e: &Embedding,
    c: &ClassifierMatrix,
    t: &TemperatureParam,
    target: usize,
) -> Result<LossValue> {
    Ok(alignment_eval(e, c, t, target)?.loss)
}

pub fn alignment_loss_grad(
    e: &Embedding,
    c: &ClassifierMatrix,
    t: &TemperatureParam,
    target: usize,
) -> Result<GradientBundle> {
    Ok(alignment_eval(e, c, t, target)?.grad)
}

/// Cross-entropy of the scaled cosine softmax against `target`, together
/// with its gradient with respect to the embedding and the log-scale.
///
/// The classifier is fixed, so no gradient is produced for its columns.
/// When the scale sits at its clip bound and descent would push it
/// further out, the log-scale gradient is zeroed.
pub fn alignment_eval(
    e: &Embedding,
    c: &ClassifierMatrix,
    t: &TemperatureParam,
    target: usize,
) -> Result<AlignmentEval> {
    check_target(target, c)?;
    let (cos, enorm) = cosines(e, c)?;
    let scale = t.scale();
    let logits: Vec<f64> = cos.iter().map(|x| x * scale).collect();
    let (shifted, lse) = log_softmax_parts(&logits);
    let loss = (lse - shifted[target]).max(0.0);
    let probs: Vec<f64> = shifted.iter().map(|z| (z - lse).exp()).collect();

    let ev = e.as_slice();
    let inv_n = 1.0 / enorm;
    let mut d_embedding = vec![0.0; ev.len()];
    let mut d_log_scale = 0.0;
    // p_t - 1 written as minus the other probabilities, which keeps its
    // precision when p_t rounds to 1
    let off_target: f64 = probs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target)
        .map(|(_, p)| p)
        .sum();
    for (i, col) in c.columns().iter().enumerate() {
        let r = if i == target { -off_target } else { probs[i] };
        if r == 0.0 {
            continue;
        }
        d_log_scale += r * cos[i] * scale;
        // d cos / d e = (c_i - cos * e / |e|) / |e|
        let w = r * scale / enorm;
        for ((d, &ci), &ej) in d_embedding.iter_mut().zip(col.as_slice()).zip(ev) {
            *d += w * (ci - cos[i] * ej * inv_n);
        }
    }
    // above the bound the scale is constant; at it, only inward moves count
    if t.log_scale > t.max_log_scale() || (t.at_upper_bound() && d_log_scale < 0.0) {
        d_log_scale = 0.0;
    }
    if !d_log_scale.is_finite() || d_embedding.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("alignment gradient".into()));
    }
    Ok(AlignmentEval {
        loss: LossValue::new(loss)?,
        scores: SimilarityVector(probs),
        grad: GradientBundle {
            d_embedding,
            d_log_scale,
        },
    })
}
