//! A small per-cell detection head with a decoupled embedding branch.
//!
//! Every grid cell is processed independently by a shared affine layer and
//! `tanh`, followed by three affine heads: box (4 raw values), objectness
//! (1 logit) and embedding (D values). Gradients are computed analytically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, CenterBox, CornerBox};
use crate::weak::BoxPrediction;
use crate::world::{center_cell, FeatureMap, GroundTruthObject};

/// Probability clamp used when scoring objectness from probabilities.
pub const OBJECTNESS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }
}

/// Tensor slots inside [`ToyModel::tensors`].
pub mod slot {
    pub const HIDDEN_W: usize = 0;
    pub const HIDDEN_B: usize = 1;
    pub const BOX_W: usize = 2;
    pub const BOX_B: usize = 3;
    pub const OBJ_W: usize = 4;
    pub const OBJ_B: usize = 5;
    pub const EMB_W: usize = 6;
    pub const EMB_B: usize = 7;
    pub const COUNT: usize = 8;

    /// Slots belonging to the box and objectness heads.
    pub const DETECTION_HEADS: [usize; 4] = [BOX_W, BOX_B, OBJ_W, OBJ_B];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub tensors: Vec<Tensor>,
}

impl ToyModel {
    pub fn zeros(input_dim: usize, hidden_dim: usize, embed_dim: usize) -> Self {
        let tensors = vec![
            Tensor::zeros("hidden.weight", &[hidden_dim, input_dim]),
            Tensor::zeros("hidden.bias", &[hidden_dim]),
            Tensor::zeros("box.weight", &[4, hidden_dim]),
            Tensor::zeros("box.bias", &[4]),
            Tensor::zeros("obj.weight", &[1, hidden_dim]),
            Tensor::zeros("obj.bias", &[1]),
            Tensor::zeros("emb.weight", &[embed_dim, hidden_dim]),
            Tensor::zeros("emb.bias", &[embed_dim]),
        ];
        Self {
            input_dim,
            hidden_dim,
            embed_dim,
            tensors,
        }
    }

    /// Gaussian fan-in initialization for the hidden and embedding layers;
    /// box and objectness heads start at zero.
    pub fn init(input_dim: usize, hidden_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut m = Self::zeros(input_dim, hidden_dim, embed_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_in = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).expect("valid std");
        let n_hid = Normal::new(0.0, 1.0 / (hidden_dim as f64).sqrt()).expect("valid std");
        m.tensors[slot::HIDDEN_W]
            .data
            .iter_mut()
            .for_each(|v| *v = n_in.sample(&mut rng));
        m.tensors[slot::EMB_W]
            .data
            .iter_mut()
            .for_each(|v| *v = n_hid.sample(&mut rng));
        m
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let reference = Self::zeros(self.input_dim, self.hidden_dim, self.embed_dim);
        if self.tensors.len() != slot::COUNT {
            return Err(Error::InvalidData(format!(
                "expected {} tensors",
                slot::COUNT
            )));
        }
        for (t, r) in self.tensors.iter().zip(&reference.tensors) {
            if t.shape != r.shape || t.data.len() != r.data.len() || t.name != r.name {
                return Err(Error::InvalidData(format!(
                    "tensor `{}` has wrong shape",
                    t.name
                )));
            }
        }
        Ok(())
    }

    fn t(&self, s: usize) -> &[f64] {
        &self.tensors[s].data
    }
}

/// Gradients laid out like [`ToyModel::tensors`], plus the temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub tensors: Vec<Vec<f64>>,
    pub d_log_scale: f64,
}

impl ModelGrads {
    pub fn zeros_like(model: &ToyModel) -> Self {
        Self {
            tensors: model
                .tensors
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect(),
            d_log_scale: 0.0,
        }
    }

    pub fn add_scaled(&mut self, other: &ModelGrads, w: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += w * y);
        }
        self.d_log_scale += w * other.d_log_scale;
    }

    pub fn scale(&mut self, w: f64) {
        self.tensors.iter_mut().flatten().for_each(|x| *x *= w);
        self.d_log_scale *= w;
    }

    pub fn is_finite(&self) -> bool {
        self.d_log_scale.is_finite() && self.tensors.iter().flatten().all(|x| x.is_finite())
    }
}

/// Raw per-cell outputs kept for the backward pass.
#[derive(Debug, Clone)]
pub struct CellOutput {
    pub hidden: Vec<f64>,
    pub raw_box: [f64; 4],
    pub obj_logit: f64,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub grid: usize,
    pub cells: Vec<CellOutput>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl ForwardPass {
    pub fn decode_box(&self, cell: usize) -> CenterBox {
        decode_box(&self.cells[cell].raw_box, cell, self.grid)
    }

    pub fn objectness(&self, cell: usize) -> f64 {
        sigmoid(self.cells[cell].obj_logit)
    }

    /// Decoded predictions, one per cell.
    pub fn predictions(&self) -> Vec<BoxPrediction> {
        (0..self.cells.len())
            .map(|i| BoxPrediction {
                bbox: self.decode_box(i),
                objectness: self.objectness(i),
                embedding: Embedding::new(self.cells[i].embedding.clone())
                    .expect("forward outputs are finite"),
            })
            .collect()
    }
}

/// Cell center plus a `tanh`-squashed offset of at most one cell; sizes
/// are `exp(raw)` cells.
pub fn decode_box(raw: &[f64; 4], cell: usize, grid: usize) -> CenterBox {
    let g = grid as f64;
    let (row, col) = ((cell / grid) as f64, (cell % grid) as f64);
    CenterBox {
        cx: (col + 0.5 + raw[0].tanh()) / g,
        cy: (row + 0.5 + raw[1].tanh()) / g,
        w: raw[2].exp() / g,
        h: raw[3].exp() / g,
    }
}

pub fn forward_pass(model: &ToyModel, features: &FeatureMap) -> Result<ForwardPass> {
    if features.channels != model.input_dim {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim,
            found: features.channels,
        });
    }
    let (h_dim, d_dim, in_dim) = (model.hidden_dim, model.embed_dim, model.input_dim);
    let (w1, b1) = (model.t(slot::HIDDEN_W), model.t(slot::HIDDEN_B));
    let (wb, bb) = (model.t(slot::BOX_W), model.t(slot::BOX_B));
    let (wo, bo) = (model.t(slot::OBJ_W), model.t(slot::OBJ_B));
    let (we, be) = (model.t(slot::EMB_W), model.t(slot::EMB_B));
    let mut cells = Vec::with_capacity(features.n_cells());
    for c in 0..features.n_cells() {
        let x = features.cell(c);
        let hidden: Vec<f64> = (0..h_dim)
            .map(|j| {
                let row = &w1[j * in_dim..(j + 1) * in_dim];
                (b1[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).tanh()
            })
            .collect();
        let affine = |w: &[f64], b: f64, k: usize| {
            b + w[k * h_dim..(k + 1) * h_dim]
                .iter()
                .zip(&hidden)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let raw_box = [0, 1, 2, 3].map(|k| affine(wb, bb[k], k));
        let obj_logit = affine(wo, bo[0], 0);
        let embedding: Vec<f64> = (0..d_dim).map(|k| affine(we, be[k], k)).collect();
        cells.push(CellOutput {
            hidden,
            raw_box,
            obj_logit,
            embedding,
        });
    }
    Ok(ForwardPass {
        grid: features.grid,
        cells,
    })
}

/// One prediction per cell, in row-major cell order.
pub fn forward(model: &ToyModel, features: &FeatureMap) -> Result<Vec<BoxPrediction>> {
    Ok(forward_pass(model, features)?.predictions())
}

/// Loss gradient with respect to one cell's raw outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGrad {
    pub cell: usize,
    pub d_box: [f64; 4],
    pub d_obj: f64,
    pub d_embedding: Option<Vec<f64>>,
}

impl CellGrad {
    pub fn new(cell: usize) -> Self {
        Self {
            cell,
            d_box: [0.0; 4],
            d_obj: 0.0,
            d_embedding: None,
        }
    }
}

/// Accumulates parameter gradients for the given per-cell output gradients.
pub fn backward(
    model: &ToyModel,
    features: &FeatureMap,
    pass: &ForwardPass,
    cell_grads: &[CellGrad],
    weight: f64,
    grads: &mut ModelGrads,
) {
    let (h_dim, d_dim, in_dim) = (model.hidden_dim, model.embed_dim, model.input_dim);
    let wb = model.t(slot::BOX_W).to_vec();
    let wo = model.t(slot::OBJ_W).to_vec();
    let we = model.t(slot::EMB_W).to_vec();
    for cg in cell_grads {
        let out = &pass.cells[cg.cell];
        let h = &out.hidden;
        let mut dh = vec![0.0; h_dim];

        let d_box = cg.d_box.map(|v| v * weight);
        if d_box.iter().any(|&v| v != 0.0) {
            for k in 0..4 {
                let g = d_box[k];
                grads.tensors[slot::BOX_B][k] += g;
                let row = &mut grads.tensors[slot::BOX_W][k * h_dim..(k + 1) * h_dim];
                row.iter_mut().zip(h).for_each(|(a, b)| *a += g * b);
                dh.iter_mut()
                    .zip(&wb[k * h_dim..(k + 1) * h_dim])
                    .for_each(|(a, w)| *a += g * w);
            }
        }
        let d_obj = cg.d_obj * weight;
        if d_obj != 0.0 {
            grads.tensors[slot::OBJ_B][0] += d_obj;
            grads.tensors[slot::OBJ_W]
                .iter_mut()
                .zip(h)
                .for_each(|(a, b)| *a += d_obj * b);
            dh.iter_mut().zip(&wo).for_each(|(a, w)| *a += d_obj * w);
        }
        if let Some(de) = &cg.d_embedding {
            for k in 0..d_dim {
                let g = de[k] * weight;
                if g == 0.0 {
                    continue;
                }
                grads.tensors[slot::EMB_B][k] += g;
                let row = &mut grads.tensors[slot::EMB_W][k * h_dim..(k + 1) * h_dim];
                row.iter_mut().zip(h).for_each(|(a, b)| *a += g * b);
                dh.iter_mut()
                    .zip(&we[k * h_dim..(k + 1) * h_dim])
                    .for_each(|(a, w)| *a += g * w);
            }
        }
        let x = features.cell(cg.cell);
        for j in 0..h_dim {
            let dz = dh[j] * (1.0 - h[j] * h[j]);
            if dz == 0.0 {
                continue;
            }
            grads.tensors[slot::HIDDEN_B][j] += dz;
            let row = &mut grads.tensors[slot::HIDDEN_W][j * in_dim..(j + 1) * in_dim];
            row.iter_mut().zip(x).for_each(|(a, b)| *a += dz * b);
        }
    }
}

/// Ground truth assigned to center cells. Objects whose center cell is
/// already taken are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct CellAssignment {
    pub pairs: Vec<(usize, GroundTruthObject)>,
    pub dropped: usize,
}

pub fn assign_center_cells(ground_truth: &[GroundTruthObject], grid: usize) -> CellAssignment {
    let mut pairs: Vec<(usize, GroundTruthObject)> = Vec::with_capacity(ground_truth.len());
    let mut dropped = 0;
    for g in ground_truth {
        let cell = center_cell(&g.bbox, grid);
        if pairs.iter().any(|(c, _)| *c == cell) {
            log::warn!("two objects share center cell {cell}; dropping the later one");
            dropped += 1;
        } else {
            pairs.push((cell, *g));
        }
    }
    CellAssignment { pairs, dropped }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionLossValues {
    pub bbox: f64,
    pub obj: f64,
}

/// Box loss (mean `1 - IoU` over assigned cells) and objectness loss (mean
/// binary cross-entropy over all cells, probabilities clamped to
/// `[OBJECTNESS_EPS, 1 - OBJECTNESS_EPS]`).
pub fn detection_losses(
    preds: &[BoxPrediction],
    ground_truth: &[GroundTruthObject],
    grid: usize,
) -> Result<DetectionLossValues> {
    if preds.len() != grid * grid {
        return Err(Error::DimensionMismatch {
            expected: grid * grid,
            found: preds.len(),
        });
    }
    let assignment = assign_center_cells(ground_truth, grid);
    let mut bbox = 0.0;
    for (cell, g) in &assignment.pairs {
        let p = preds[*cell].bbox.to_corners();
        bbox += 1.0 - iou_unchecked(&p, &g.bbox.to_corners());
    }
    if !assignment.pairs.is_empty() {
        bbox /= assignment.pairs.len() as f64;
    }
    let mut obj = 0.0;
    for (i, p) in preds.iter().enumerate() {
        let q = p.objectness.clamp(OBJECTNESS_EPS, 1.0 - OBJECTNESS_EPS);
        obj -= if assignment.pairs.iter().any(|(c, _)| *c == i) {
            q.ln()
        } else {
            (1.0 - q).ln()
        };
    }
    obj /= preds.len() as f64;
    Ok(DetectionLossValues { bbox, obj })
}

/// Gradient of `1 - IoU(pred, gt)` with respect to `(cx, cy, w, h)` of
/// the prediction.
pub fn iou_loss_grad(pred: &CenterBox, gt: &CornerBox) -> (f64, [f64; 4]) {
    let p = pred.to_corners();
    let iw = p.x2.min(gt.x2) - p.x1.max(gt.x1);
    let ih = p.y2.min(gt.y2) - p.y1.max(gt.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return (1.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let area_p = p.width() * p.height();
    let union = area_p + gt.area() - inter;
    let iou = inter / union;
    // d iou = (dI * U - I * dU) / U^2 with dU = dAp - dI
    let d_inter = (union + inter) / (union * union);
    let d_area = -inter / (union * union);

    let dix1 = if p.x1 > gt.x1 { -ih } else { 0.0 };
    let dix2 = if p.x2 < gt.x2 { ih } else { 0.0 };
    let diy1 = if p.y1 > gt.y1 { -iw } else { 0.0 };
    let diy2 = if p.y2 < gt.y2 { iw } else { 0.0 };
    let (pw, ph) = (p.width(), p.height());
    let g_x1 = d_inter * dix1 + d_area * (-ph);
    let g_x2 = d_inter * dix2 + d_area * ph;
    let g_y1 = d_inter * diy1 + d_area * (-pw);
    let g_y2 = d_inter * diy2 + d_area * pw;
    // x1 = cx - w/2, x2 = cx + w/2
    let d_iou = [
        g_x1 + g_x2,
        g_y1 + g_y2,
        (g_x2 - g_x1) / 2.0,
        (g_y2 - g_y1) / 2.0,
    ];
    (1.0 - iou, d_iou.map(|v| -v))
}

/// Per-image detection terms computed from raw outputs: loss values and
/// per-cell gradients (unweighted) of the box and objectness losses.
pub fn detection_loss_grads(
    pass: &ForwardPass,
    assignment: &CellAssignment,
) -> (DetectionLossValues, Vec<CellGrad>) {
    let n_cells = pass.cells.len();
    let mut grads: Vec<CellGrad> = (0..n_cells).map(CellGrad::new).collect();
    let mut bbox = 0.0;
    let n_assigned = assignment.pairs.len();
    for (cell, g) in &assignment.pairs {
        let pred = pass.decode_box(*cell);
        let (l, d) = iou_loss_grad(&pred, &g.bbox.to_corners());
        bbox += l;
        let raw = &pass.cells[*cell].raw_box;
        let inv_g = 1.0 / pass.grid as f64;
        let w = 1.0 / n_assigned as f64;
        let gb = &mut grads[*cell].d_box;
        gb[0] += w * d[0] * (1.0 - raw[0].tanh().powi(2)) * inv_g;
        gb[1] += w * d[1] * (1.0 - raw[1].tanh().powi(2)) * inv_g;
        gb[2] += w * d[2] * pred.w;
        gb[3] += w * d[3] * pred.h;
    }
    if n_assigned > 0 {
        bbox /= n_assigned as f64;
    }
    let mut obj = 0.0;
    let inv_n = 1.0 / n_cells as f64;
    for (i, out) in pass.cells.iter().enumerate() {
        let y = if assignment.pairs.iter().any(|(c, _)| *c == i) {
            1.0
        } else {
            0.0
        };
        let z = out.obj_logit;
        obj += softplus(z) - y * z;
        grads[i].d_obj = (sigmoid(z) - y) * inv_n;
    }
    obj *= inv_n;
    (DetectionLossValues { bbox, obj }, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(grid: usize, ch: usize, seed: u64) -> FeatureMap {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..grid * grid * ch)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        FeatureMap::from_data(grid, ch, data).unwrap()
    }

    #[test]
    fn zero_model_predicts_cell_centers() {
        let m = ToyModel::zeros(6, 5, 3);
        let f = features(4, 6, 0);
        let preds = forward(&m, &f).unwrap();
        assert_eq!(preds.len(), 16);
        for (c, p) in preds.iter().enumerate() {
            let b = p.bbox;
            assert!((b.cx - ((c % 4) as f64 + 0.5) / 4.0).abs() < 1e-15);
            assert!((b.cy - ((c / 4) as f64 + 0.5) / 4.0).abs() < 1e-15);
            assert_eq!((b.w, b.h), (0.25, 0.25));
            assert_eq!(p.objectness, 0.5);
        }
    }

    #[test]
    fn output_count_and_dimension_check() {
        let m = ToyModel::init(6, 5, 3, 1);
        assert_eq!(forward(&m, &features(3, 6, 0)).unwrap().len(), 9);
        assert!(matches!(
            forward(&m, &features(3, 7, 0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cells_are_independent() {
        let m = ToyModel::init(6, 5, 3, 2);
        let f = features(3, 6, 1);
        let base = forward(&m, &f).unwrap();
        let mut g = f.clone();
        g.cell_mut(4)[2] += 0.5;
        let moved = forward(&m, &g).unwrap();
        for i in 0..9 {
            if i == 4 {
                assert_ne!(base[i], moved[i]);
            } else {
                assert_eq!(base[i], moved[i]);
            }
        }
    }

    #[test]
    fn perfect_box_has_zero_loss() {
        let gt = GroundTruthObject {
            bbox: CenterBox::new(0.3, 0.6, 0.2, 0.1),
            class: 0,
        };
        let (l, d) = iou_loss_grad(&gt.bbox, &gt.bbox.to_corners());
        assert!(l.abs() < 1e-15);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn iou_grad_matches_finite_differences() {
        let gt = CornerBox::new(0.2, 0.3, 0.6, 0.5);
        let pred = CenterBox::new(0.44, 0.38, 0.3, 0.25);
        let (_, d) = iou_loss_grad(&pred, &gt);
        let f = |b: CenterBox| 1.0 - iou_unchecked(&b.to_corners(), &gt);
        let h = 1e-7;
        let bump = |k: usize, s: f64| {
            let mut v = [pred.cx, pred.cy, pred.w, pred.h];
            v[k] += s;
            CenterBox::new(v[0], v[1], v[2], v[3])
        };
        for (k, dk) in d.iter().enumerate() {
            let fd = (f(bump(k, h)) - f(bump(k, -h))) / (2.0 * h);
            assert!((fd - dk).abs() < 1e-6, "k={k} fd={fd} an={dk}");
        }
    }

    #[test]
    fn shared_center_cell_drops_later_object() {
        let a = GroundTruthObject {
            bbox: CenterBox::new(0.3, 0.3, 0.2, 0.2),
            class: 0,
        };
        let b = GroundTruthObject {
            bbox: CenterBox::new(0.35, 0.32, 0.1, 0.1),
            class: 1,
        };
        let asg = assign_center_cells(&[a, b], 2);
        assert_eq!(asg.dropped, 1);
        assert_eq!(asg.pairs, vec![(0, a)]);
    }

    #[test]
    fn logit_and_probability_losses_agree() {
        let m = ToyModel::init(6, 5, 3, 4);
        let f = features(3, 6, 3);
        let gt = [GroundTruthObject {
            bbox: CenterBox::new(0.5, 0.5, 0.4, 0.3),
            class: 0,
        }];
        let pass = forward_pass(&m, &f).unwrap();
        let (from_logits, _) = detection_loss_grads(&pass, &assign_center_cells(&gt, 3));
        let from_probs = detection_losses(&pass.predictions(), &gt, 3).unwrap();
        assert!((from_logits.bbox - from_probs.bbox).abs() < 1e-12);
        assert!((from_logits.obj - from_probs.obj).abs() < 1e-12);
    }

    #[test]
    fn perfect_objectness_is_near_zero() {
        let gt = [GroundTruthObject {
            bbox: CenterBox::new(0.25, 0.25, 0.5, 0.5),
            class: 0,
        }];
        let preds: Vec<BoxPrediction> = (0..4)
            .map(|i| BoxPrediction {
                bbox: if i == 0 {
                    gt[0].bbox
                } else {
                    CenterBox::new(0.75, 0.75, 0.1, 0.1)
                },
                objectness: if i == 0 { 1.0 } else { 0.0 },
                embedding: Embedding::new(vec![1.0, 0.0]).unwrap(),
            })
            .collect();
        let l = detection_losses(&preds, &gt, 2).unwrap();
        assert!(l.bbox.abs() < 1e-15);
        assert!(l.obj <= 1e-11, "{}", l.obj);
    }
}
