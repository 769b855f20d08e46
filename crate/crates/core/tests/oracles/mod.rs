//! Independent reference implementations and randomized checks shared by
//! the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use zsd_align_core::embedding::{
    build_classifier, ClassRegistry, ClassifierMatrix, Embedding, TemperatureParam,
};
use zsd_align_core::eval::{evaluate, GroundTruthBox};
use zsd_align_core::geometry::{iou, CenterBox, CornerBox};
use zsd_align_core::inference::{nms, Detection};
use zsd_align_core::loss::{alignment_loss, alignment_loss_grad, similarity_scores};
use zsd_align_core::weak::{select_pseudo_box, BoxPrediction};

pub type Check = Result<String, String>;

pub fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn classifier_from_cols(cols: Vec<Vec<f64>>) -> ClassifierMatrix {
    let names: Vec<String> = (0..cols.len()).map(|i| format!("c{i}")).collect();
    let reg = ClassRegistry::from_names(names.clone()).unwrap();
    let map: BTreeMap<String, Embedding> = names
        .into_iter()
        .zip(cols)
        .map(|(n, v)| (n, Embedding::new(v).unwrap()))
        .collect();
    build_classifier(&reg, &map).unwrap()
}

/// `n` columns with uniform entries in `[-1, 1)`.
pub fn random_classifier(n: usize, d: usize, rng: &mut ChaCha8Rng) -> ClassifierMatrix {
    classifier_from_cols(
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect(),
    )
}

// ---- alignment loss ---------------------------------------------------------

/// Straightforward softmax cross-entropy, written without log-sum-exp.
pub fn naive_loss(e: &[f64], cols: &[Vec<f64>], log_scale: f64, t: usize) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = log_scale.exp().min(100.0);
    let z: Vec<f64> = cols
        .iter()
        .map(|c| scale * e.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / (norm(e) * norm(c)))
        .collect();
    let denom: f64 = z.iter().map(|v| v.exp()).sum();
    -(z[t].exp() / denom).ln()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    // floor keeps near-saturated instances, whose gradients are below the
    // finite-difference noise, from dominating
    diff / na.max(nb).max(1e-3)
}

/// Analytic embedding and temperature gradients against central
/// differences with step `1e-6`, `per_shape` instances for every
/// `D ∈ {8, 512}`, `n ∈ {2, 15, 65}`.
pub fn check_gradients(seed: u64, per_shape: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for &d in &[8usize, 512] {
        for &n in &[2usize, 15, 65] {
            for _ in 0..per_shape {
                let c = classifier_from_cols((0..n).map(|_| gaussian(&mut rng, d)).collect());
                let e = gaussian(&mut rng, d);
                let tau = rng.gen_range(0.0..100f64.ln() - 0.05);
                let target = rng.gen_range(0..n);
                let g = alignment_loss_grad(
                    &Embedding::new(e.clone()).unwrap(),
                    &c,
                    &TemperatureParam::new(tau),
                    target,
                )
                .unwrap();
                let loss_at = |v: &[f64], t: f64| {
                    alignment_loss(
                        &Embedding::new(v.to_vec()).unwrap(),
                        &c,
                        &TemperatureParam::new(t),
                        target,
                    )
                    .unwrap()
                    .value()
                };
                let mut fd = Vec::with_capacity(d + 1);
                for k in 0..d {
                    let mut p = e.clone();
                    let mut m = e.clone();
                    p[k] += h;
                    m[k] -= h;
                    fd.push((loss_at(&p, tau) - loss_at(&m, tau)) / (2.0 * h));
                }
                fd.push((loss_at(&e, tau + h) - loss_at(&e, tau - h)) / (2.0 * h));
                let mut an = g.d_embedding.clone();
                an.push(g.d_log_scale);
                worst = worst.max(rel_err(&an, &fd));
                count += 1;
            }
        }
    }
    let msg = format!("{count} instances, worst relative error {worst:.2e}");
    if worst < 1e-5 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Softmax normalization, invariance to embedding scale and the
/// uniform-cosine `ln n` value.
pub fn check_loss_invariants(seed: u64, n_instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_norm, mut worst_scale): (f64, f64) = (0.0, 0.0);
    for _ in 0..n_instances {
        let n = rng.gen_range(2..20);
        let d = rng.gen_range(2..40);
        let c = classifier_from_cols((0..n).map(|_| gaussian(&mut rng, d)).collect());
        let e = gaussian(&mut rng, d);
        let temp = TemperatureParam::new(rng.gen_range(-2.0..100f64.ln()));
        let t = rng.gen_range(0..n);
        let s = similarity_scores(&Embedding::new(e.clone()).unwrap(), &c, &temp).unwrap();
        worst_norm = worst_norm.max((s.as_slice().iter().sum::<f64>() - 1.0).abs());
        let base = alignment_loss(&Embedding::new(e.clone()).unwrap(), &c, &temp, t)
            .unwrap()
            .value();
        for alpha in [0.1, 10.0] {
            let scaled = Embedding::new(e.iter().map(|x| x * alpha).collect()).unwrap();
            let l = alignment_loss(&scaled, &c, &temp, t).unwrap().value();
            worst_scale = worst_scale.max((l - base).abs());
        }
    }
    let mut worst_uniform: f64 = 0.0;
    for n in [2usize, 7, 15, 65] {
        // orthonormal columns and an embedding orthogonal to all of them
        let d = n + 1;
        let cols = (0..n)
            .map(|i| (0..d).map(|k| if k == i { 1.0 } else { 0.0 }).collect())
            .collect();
        let mut e = vec![0.0; d];
        e[n] = 3.0;
        let l = alignment_loss(
            &Embedding::new(e).unwrap(),
            &classifier_from_cols(cols),
            &TemperatureParam::initial(),
            0,
        )
        .unwrap()
        .value();
        worst_uniform = worst_uniform.max((l - (n as f64).ln()).abs());
    }
    let msg = format!(
        "normalization {worst_norm:.1e}, scale invariance {worst_scale:.1e}, uniform case {worst_uniform:.1e}"
    );
    if worst_norm <= 1e-9 && worst_scale <= 1e-9 && worst_uniform <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---- metrics ----------------------------------------------------------------

pub fn ref_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    inter / union
}

pub fn arr(b: &CornerBox) -> [f64; 4] {
    [b.x1, b.y1, b.x2, b.y2]
}

/// TP flags for one image and one class; `dets` holds confidences and boxes.
pub fn ref_match(dets: &[(f64, [f64; 4])], gts: &[[f64; 4]]) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].0.partial_cmp(&dets[a].0).unwrap().then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for i in idx {
        let mut best = -1.0;
        let mut best_j = None;
        for j in 0..gts.len() {
            if used[j] {
                continue;
            }
            let v = ref_iou(dets[i].1, gts[j]);
            if v >= 0.5 && v > best {
                best = v;
                best_j = Some(j);
            }
        }
        if let Some(j) = best_j {
            used[j] = true;
            tp[i] = true;
        }
    }
    tp
}

pub fn ref_ap(mut scored: Vec<(f64, bool)>, n_gt: usize) -> f64 {
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut pts = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    for (_, hit) in scored {
        if hit {
            tp += 1.0
        } else {
            fp += 1.0
        }
        pts.push((tp / n_gt as f64, tp / (tp + fp)));
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let p = pts
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        total += p;
    }
    total / 101.0
}

/// `(mAP, AR@k)` over `subset` classes that have ground truth.
pub fn ref_metrics(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthBox>],
    subset: &[usize],
    k: usize,
) -> (f64, f64) {
    let mut aps = Vec::new();
    let mut recalls = Vec::new();
    for &c in subset {
        let n_gt: usize = gts
            .iter()
            .map(|g| g.iter().filter(|x| x.class_index == c).count())
            .sum();
        if n_gt == 0 {
            continue;
        }
        let mut scored = Vec::new();
        let mut hits = 0;
        for (d, g) in dets.iter().zip(gts) {
            let gc: Vec<[f64; 4]> = g
                .iter()
                .filter(|x| x.class_index == c)
                .map(|x| arr(&x.bbox))
                .collect();
            let dc: Vec<(f64, [f64; 4])> = d
                .iter()
                .filter(|x| x.class_index == c)
                .map(|x| (x.confidence, arr(&x.bbox)))
                .collect();
            for (x, hit) in dc.iter().zip(ref_match(&dc, &gc)) {
                scored.push((x.0, hit));
            }
            // recall: keep the image's k most confident detections overall
            let mut all: Vec<&Detection> = d.iter().collect();
            all.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
            let top: Vec<(f64, [f64; 4])> = all
                .into_iter()
                .take(k)
                .filter(|x| x.class_index == c)
                .map(|x| (x.confidence, arr(&x.bbox)))
                .collect();
            hits += ref_match(&top, &gc).into_iter().filter(|&h| h).count();
        }
        aps.push(ref_ap(scored, n_gt));
        recalls.push(hits as f64 / n_gt as f64);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (mean(&aps), mean(&recalls))
}

pub fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let w = rng.gen_range(0.1..0.5);
    let h = rng.gen_range(0.1..0.5);
    let x = rng.gen_range(0.0..1.0 - w);
    let y = rng.gen_range(0.0..1.0 - h);
    [x, y, x + w, y + h]
}

fn jitter(rng: &mut ChaCha8Rng, b: [f64; 4]) -> [f64; 4] {
    let s = 0.06;
    let mut o = b.map(|v| v + rng.gen_range(-s..s));
    if o[2] <= o[0] + 0.01 {
        o[2] = o[0] + 0.05;
    }
    if o[3] <= o[1] + 0.01 {
        o[3] = o[1] + 0.05;
    }
    o
}

pub type Instance = (Vec<Vec<Detection>>, Vec<Vec<GroundTruthBox>>, usize);

/// At most 10 images, 5 classes and 20 detections.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n_img = rng.gen_range(1..=10);
    let n_cls = rng.gen_range(1..=5);
    let mut budget = rng.gen_range(0..=20);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..n_img {
        let g: Vec<GroundTruthBox> = (0..rng.gen_range(0..4))
            .map(|_| GroundTruthBox {
                bbox: random_box(rng).into(),
                class_index: rng.gen_range(0..n_cls),
            })
            .collect();
        let mut d = Vec::new();
        for _ in 0..rng.gen_range(0..5) {
            if budget == 0 {
                break;
            }
            budget -= 1;
            let (bbox, class_index) = if !g.is_empty() && rng.gen_bool(0.7) {
                let t = &g[rng.gen_range(0..g.len())];
                let class = if rng.gen_bool(0.85) {
                    t.class_index
                } else {
                    rng.gen_range(0..n_cls)
                };
                (jitter(rng, arr(&t.bbox)), class)
            } else {
                (random_box(rng), rng.gen_range(0..n_cls))
            };
            d.push(Detection {
                bbox: bbox.into(),
                class_index,
                confidence: rng.gen_range(0.0..1.0),
            });
        }
        dets.push(d);
        gts.push(g);
    }
    (dets, gts, n_cls)
}

pub fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

/// The evaluation pipeline against the brute-force reference on `n`
/// random instances that have ground truth.
pub fn check_metrics(seed: u64, n: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut compared = 0;
    let mut worst: f64 = 0.0;
    while compared < n {
        let (dets, gts, n_cls) = random_instance(&mut rng);
        let subset: Vec<usize> = (0..n_cls).collect();
        let has_gt: BTreeSet<usize> = gts.iter().flatten().map(|g| g.class_index).collect();
        let k = if rng.gen_bool(0.3) {
            rng.gen_range(1..4)
        } else {
            100
        };
        let got = evaluate(&dets, &gts, &names(n_cls), &subset, "all", 0.5, k);
        if has_gt.is_empty() {
            if got.is_ok() {
                return Err("an instance without ground truth produced a report".into());
            }
            continue;
        }
        let r = got.map_err(|e| e.to_string())?;
        let (map, ar) = ref_metrics(&dets, &gts, &subset, k);
        worst = worst.max((r.map - map).abs()).max((r.ar100 - ar).abs());
        compared += 1;
    }
    let msg = format!("{compared} instances, worst deviation {worst:.1e}");
    if worst < 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// AP of a false positive ranked above a true positive.
pub fn fp_tp_fixture_ap() -> f64 {
    let g = GroundTruthBox {
        bbox: [0.1, 0.1, 0.4, 0.4].into(),
        class_index: 0,
    };
    let dets = vec![
        Detection {
            bbox: [0.6, 0.6, 0.9, 0.9].into(),
            class_index: 0,
            confidence: 0.9,
        },
        Detection {
            bbox: [0.1, 0.1, 0.4, 0.4].into(),
            class_index: 0,
            confidence: 0.8,
        },
    ];
    evaluate(&[dets], &[vec![g]], &names(1), &[0], "s", 0.5, 100)
        .unwrap()
        .map
}

// ---- non-maximum suppression ------------------------------------------------

pub fn random_dets(rng: &mut ChaCha8Rng, n: usize, n_cls: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let w = rng.gen_range(0.05..0.4);
            let h = rng.gen_range(0.05..0.4);
            let x = rng.gen_range(0.0..0.6);
            let y = rng.gen_range(0.0..0.6);
            Detection {
                bbox: [x, y, x + w, y + h].into(),
                class_index: rng.gen_range(0..n_cls),
                // coarse confidences so ties occur
                confidence: (rng.gen_range(0..20) as f64) / 20.0,
            }
        })
        .collect()
}

/// Quadratic reference: precompute the suppression relation, then walk the
/// priority order once.
pub fn reference_nms(dets: &[Detection], th: f64) -> Vec<usize> {
    let n = dets.len();
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut clash = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            clash[i][j] = i != j
                && dets[i].class_index == dets[j].class_index
                && iou(&dets[i].bbox, &dets[j].bbox).unwrap() > th;
        }
    }
    let mut alive = vec![true; n];
    for (pos, &i) in rank.iter().enumerate() {
        if !alive[i] {
            continue;
        }
        for &j in &rank[pos + 1..] {
            if clash[i][j] {
                alive[j] = false;
            }
        }
    }
    rank.into_iter().filter(|&i| alive[i]).collect()
}

/// NMS equals the reference, keeps no overlapping same-class pair and is
/// idempotent, on `n_sets` random sets of at most 30 boxes.
pub fn check_nms(seed: u64, n_sets: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for set in 0..n_sets {
        let n = rng.gen_range(0..=30);
        let n_cls = rng.gen_range(1..4);
        let dets = random_dets(&mut rng, n, n_cls);
        let kept = nms(&dets, 0.5);
        if kept != reference_nms(&dets, 0.5) {
            return Err(format!("set {set}: differs from the reference"));
        }
        for (a, &i) in kept.iter().enumerate() {
            for &j in &kept[a + 1..] {
                if dets[i].class_index == dets[j].class_index
                    && iou(&dets[i].bbox, &dets[j].bbox).unwrap() > 0.5
                {
                    return Err(format!("set {set}: kept pair {i}, {j} overlaps"));
                }
            }
        }
        let survivors: Vec<Detection> = kept.iter().map(|&i| dets[i]).collect();
        if nms(&survivors, 0.5) != (0..survivors.len()).collect::<Vec<_>>() {
            return Err(format!("set {set}: not idempotent"));
        }
    }
    Ok(format!("{n_sets} sets agree"))
}

// ---- pseudo-box selection ---------------------------------------------------

pub fn random_preds(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<BoxPrediction> {
    let mut preds: Vec<BoxPrediction> = Vec::with_capacity(n);
    for i in 0..n {
        let embedding = if i > 0 && rng.gen_bool(0.2) {
            // duplicate an earlier embedding to create exact ties
            preds[rng.gen_range(0..i)].embedding.clone()
        } else {
            Embedding::new((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        preds.push(BoxPrediction {
            bbox: CenterBox::new(0.5, 0.5, 0.2, 0.2),
            objectness: if rng.gen_bool(0.3) {
                rng.gen_range(0.0..0.002)
            } else {
                rng.gen_range(0.0..1.0)
            },
            embedding,
        });
    }
    preds
}

/// Pseudo-box selection against an exhaustive scan (first index wins ties)
/// on `n` random fixtures.
pub fn check_pseudo_box(seed: u64, n: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for fixture in 0..n {
        let n_cls = rng.gen_range(2..6);
        let d = rng.gen_range(2..8);
        let c = random_classifier(n_cls, d, &mut rng);
        let n_preds = rng.gen_range(0..12);
        let preds = random_preds(&mut rng, n_preds, d);
        let t = TemperatureParam::new(rng.gen_range(0.0..4.6));
        let target = rng.gen_range(0..n_cls);
        let th = 0.001;

        let mut want: Option<(usize, f64)> = None;
        for (i, p) in preds.iter().enumerate() {
            if p.objectness < th {
                continue;
            }
            let s = similarity_scores(&p.embedding, &c, &t).unwrap().as_slice()[target];
            match want {
                Some((_, b)) if s <= b => {}
                _ => want = Some((i, s)),
            }
        }
        let got = select_pseudo_box(&preds, &c, &t, target, th);
        if got.selected_index != want.map(|w| w.0) || want.is_some_and(|(_, s)| got.score != s) {
            return Err(format!(
                "fixture {fixture}: selected {:?}, expected {want:?}",
                got.selected_index
            ));
        }
    }
    Ok(format!("{n} fixtures agree"))
}

// ---- classification-only batches ---------------------------------------------

/// A classification-only batch leaves the box and objectness heads alone:
/// their analytic gradients are exactly zero, nudging them does not move
/// the loss, and an SGD step without weight decay keeps them unchanged.
pub fn check_classification_isolation(seed: u64) -> Check {
    use zsd_align_core::model::{slot, ToyModel};
    use zsd_align_core::optim::{sgd_step, OptimizerState, TrainConfig};
    use zsd_align_core::splits::shipped_templates;
    use zsd_align_core::train::{batch_loss_and_grads, Classifiers, TrainingData};
    use zsd_align_core::weak::SampleRef;
    use zsd_align_core::world::{generate_world, SyntheticWorldConfig};

    let cfg = SyntheticWorldConfig {
        grid_size: 4,
        feature_dim: 6,
        embed_dim: 5,
        n_classes: 6,
        n_unseen: 1,
        n_label_only: 2,
        objects_per_image: (1, 2),
        object_cells: (1.0, 2.0),
        det_images: 6,
        cls_images: 8,
        test_images: 4,
        seed,
        ..Default::default()
    };
    let world = generate_world(&cfg, &shipped_templates()).map_err(|e| e.to_string())?;
    let classifiers =
        Classifiers::from_world(&world, &shipped_templates()).map_err(|e| e.to_string())?;
    let data: TrainingData = (&world).into();
    let mut model = ToyModel::init(cfg.channels(), 7, cfg.embed_dim, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 99);
    for s in slot::DETECTION_HEADS {
        model.tensors[s]
            .data
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-0.3..0.3));
    }
    let mut temp = TemperatureParam::initial();
    let batch: Vec<SampleRef> = (0..world.classification.len())
        .map(SampleRef::Classification)
        .collect();
    let loss =
        |m: &ToyModel| batch_loss_and_grads(m, &temp, data, &classifiers, &batch, 0.001).unwrap();
    let out = loss(&model);
    if out.loss.cls.is_nan() || out.loss.cls <= 0.0 {
        return Err("classification loss is not positive".into());
    }
    let mut probed = 0;
    for s in slot::DETECTION_HEADS {
        if out.grads.tensors[s].iter().any(|&g| g != 0.0) {
            return Err(format!("non-zero gradient on {}", model.tensors[s].name));
        }
        for k in 0..model.tensors[s].data.len() {
            let mut p = model.clone();
            p.tensors[s].data[k] += 1e-6;
            if loss(&p).loss.total != out.loss.total {
                return Err(format!("loss moves with {}[{k}]", model.tensors[s].name));
            }
            probed += 1;
        }
    }
    let before: Vec<Vec<f64>> = slot::DETECTION_HEADS
        .iter()
        .map(|&s| model.tensors[s].data.clone())
        .collect();
    let tc = TrainConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut st = OptimizerState::new(&model);
    sgd_step(&mut model, &mut temp, &out.grads, &mut st, 0.1, &tc).map_err(|e| e.to_string())?;
    let after: Vec<Vec<f64>> = slot::DETECTION_HEADS
        .iter()
        .map(|&s| model.tensors[s].data.clone())
        .collect();
    if before != after {
        return Err("SGD step changed a detection head".into());
    }
    Ok(format!("{probed} head parameters probed"))
}
