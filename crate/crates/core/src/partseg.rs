//! Open-vocabulary part segmentation: multi-layer feature taps propagated to
//! points, a small trainable head aligning point features with part text
//! vectors, and the category-mean IoU metric. The backbone stays frozen.

use std::collections::BTreeMap;

use crate::autodiff::{NodeId, Tape};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::geometry::{knn, normalize_unit_sphere, PointCloud};
use crate::mat::{self, Mat};
use crate::rng;
use crate::tokenizer::group_patches;
use crate::training::AdamState;

pub const TAU_SEG: f64 = 0.07;
pub const DEFAULT_FUSION_WIDTH: usize = 256;

/// Tap points ⌈d/3⌉, ⌈2d/3⌉, d — the 4th/8th/12th blocks at depth 12,
/// scaled proportionally for other depths.
pub fn tap_layers(depth: usize) -> [usize; 3] {
    [depth.div_ceil(3), (2 * depth).div_ceil(3), depth]
}

/// Per-part unit text vectors for one category.
#[derive(Debug, Clone)]
pub struct PartLabelSet {
    pub category: String,
    names: Vec<String>,
    vectors: Mat,
}

impl PartLabelSet {
    pub fn new(category: impl Into<String>, parts: &[(String, Vec<f64>)]) -> Result<PartLabelSet> {
        if parts.len() < 2 {
            return Err(Error::invalid(format!("category needs at least 2 parts, got {}", parts.len())));
        }
        let dim = parts[0].1.len();
        let mut vectors = Mat::zeros(parts.len(), dim);
        let mut names = Vec::with_capacity(parts.len());
        for (p, (name, vec)) in parts.iter().enumerate() {
            if vec.len() != dim {
                return Err(Error::shape(format!(
                    "part '{name}' vector has dim {}, expected {dim}",
                    vec.len()
                )));
            }
            if vec.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("part '{name}' vector")));
            }
            vectors.row_mut(p).copy_from_slice(vec);
            mat::unit_normalize(vectors.row_mut(p));
            if mat::dot(vectors.row(p), vectors.row(p)) == 0.0 {
                return Err(Error::invalid(format!("part '{name}' vector is zero")));
            }
            names.push(name.clone());
        }
        Ok(PartLabelSet { category: category.into(), names, vectors })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn vectors(&self) -> &Mat {
        &self.vectors
    }
}

/// Trainable head: one linear+GELU per tap (width→S), then a two-layer
/// fusion MLP (3S→S→teacher_dim). τ_seg is fixed.
#[derive(Debug, Clone)]
pub struct SegHead {
    pub tap_w: Vec<Mat>,
    pub tap_b: Vec<Mat>,
    pub fuse_w1: Mat,
    pub fuse_b1: Mat,
    pub fuse_w2: Mat,
    pub fuse_b2: Mat,
    pub tau_seg: f64,
}

impl SegHead {
    pub fn init(width: usize, fusion: usize, teacher_dim: usize, seed: u64) -> SegHead {
        let mut rng = rng::derive(seed, &[rng::tag::INIT, 0x5e6]);
        let mut w = |r, c| {
            let mut m = Mat::zeros(r, c);
            for v in m.data.iter_mut() {
                *v = rng::trunc_normal(&mut rng, 0.02);
            }
            m
        };
        SegHead {
            tap_w: (0..3).map(|_| w(width, fusion)).collect(),
            tap_b: (0..3).map(|_| Mat::zeros(1, fusion)).collect(),
            fuse_w1: w(3 * fusion, fusion),
            fuse_b1: Mat::zeros(1, fusion),
            fuse_w2: w(fusion, teacher_dim),
            fuse_b2: Mat::zeros(1, teacher_dim),
            tau_seg: TAU_SEG,
        }
    }

    pub fn zeros(width: usize, fusion: usize, teacher_dim: usize) -> SegHead {
        SegHead {
            tap_w: (0..3).map(|_| Mat::zeros(width, fusion)).collect(),
            tap_b: (0..3).map(|_| Mat::zeros(1, fusion)).collect(),
            fuse_w1: Mat::zeros(3 * fusion, fusion),
            fuse_b1: Mat::zeros(1, fusion),
            fuse_w2: Mat::zeros(fusion, teacher_dim),
            fuse_b2: Mat::zeros(1, teacher_dim),
            tau_seg: TAU_SEG,
        }
    }

    fn visit(&self, f: &mut impl FnMut(&str, &Mat)) {
        for i in 0..3 {
            f(&format!("head.tap{i}.weight"), &self.tap_w[i]);
            f(&format!("head.tap{i}.bias"), &self.tap_b[i]);
        }
        f("head.fuse.fc1.weight", &self.fuse_w1);
        f("head.fuse.fc1.bias", &self.fuse_b1);
        f("head.fuse.fc2.weight", &self.fuse_w2);
        f("head.fuse.fc2.bias", &self.fuse_b2);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Mat)) {
        for i in 0..3 {
            f(&format!("head.tap{i}.weight"), &mut self.tap_w[i]);
            f(&format!("head.tap{i}.bias"), &mut self.tap_b[i]);
        }
        f("head.fuse.fc1.weight", &mut self.fuse_w1);
        f("head.fuse.fc1.bias", &mut self.fuse_b1);
        f("head.fuse.fc2.weight", &mut self.fuse_w2);
        f("head.fuse.fc2.bias", &mut self.fuse_b2);
    }

    pub fn ensure_finite(&self) -> Result<()> {
        let mut bad = None;
        self.visit(&mut |name, m| {
            if bad.is_none() && !m.is_finite() {
                bad = Some(name.to_string());
            }
        });
        match bad {
            Some(name) => Err(Error::non_finite(format!("head tensor '{name}'"))),
            None => Ok(()),
        }
    }
}

/// Inverse-distance interpolation of source features onto target points
/// using the k nearest sources; coincident targets copy exactly.
pub fn feature_propagate(
    source_pts: &Mat,
    source_feats: &Mat,
    target_pts: &Mat,
    k: usize,
) -> Result<Mat> {
    Ok(mat::mm_nn(&propagation_weights(source_pts, target_pts, k)?, source_feats))
}

/// The [N, G] convex-weight matrix used by `feature_propagate`.
pub fn propagation_weights(source_pts: &Mat, target_pts: &Mat, k: usize) -> Result<Mat> {
    if source_pts.cols != 3 || target_pts.cols != 3 {
        return Err(Error::shape("propagation expects [*, 3] coordinates".to_string()));
    }
    let g = source_pts.rows;
    if k == 0 || k > g {
        return Err(Error::invalid(format!("k = {k} outside 1..={g} sources")));
    }
    let neighbors = knn(&source_pts.data, &target_pts.data, k)?;
    let mut weights = Mat::zeros(target_pts.rows, g);
    for (t, row) in neighbors.iter().enumerate() {
        let dist = |s: usize| {
            let mut d2 = 0.0;
            for a in 0..3 {
                let diff = target_pts.at(t, a) - source_pts.at(s, a);
                d2 += diff * diff;
            }
            d2.sqrt()
        };
        // nearest first: a coincident source short-circuits to an exact copy
        if dist(row[0]) < 1e-10 {
            weights.set(t, row[0], 1.0);
            continue;
        }
        let inv: Vec<f64> = row.iter().map(|&s| 1.0 / dist(s)).collect();
        let total: f64 = inv.iter().sum();
        for (&s, w) in row.iter().zip(&inv) {
            weights.set(t, s, w / total);
        }
    }
    Ok(weights)
}

struct HeadNodes {
    tap_w: Vec<NodeId>,
    tap_b: Vec<NodeId>,
    fuse_w1: NodeId,
    fuse_b1: NodeId,
    fuse_w2: NodeId,
    fuse_b2: NodeId,
}

fn stage_head(tape: &mut Tape, head: &SegHead, training: bool) -> HeadNodes {
    let mut put = |m: &Mat| {
        if training {
            tape.leaf(m.clone())
        } else {
            tape.constant(m.clone())
        }
    };
    HeadNodes {
        tap_w: head.tap_w.iter().map(&mut put).collect(),
        tap_b: head.tap_b.iter().map(&mut put).collect(),
        fuse_w1: put(&head.fuse_w1),
        fuse_b1: put(&head.fuse_b1),
        fuse_w2: put(&head.fuse_w2),
        fuse_b2: put(&head.fuse_b2),
    }
}

/// Frozen-backbone inputs for one labeled cloud: tapped patch features and
/// the center→point propagation weights, both constants under the head tape.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub id: String,
    pub taps: Vec<Mat>,
    pub prop: Mat,
    pub part_ids: Vec<usize>,
}

/// Run the frozen encoder once and precompute everything head training or
/// inference needs for `cloud`.
pub fn prepare_seg_sample(
    encoder: &Encoder,
    cloud: &PointCloud,
    g: usize,
    k: usize,
    part_ids: Vec<usize>,
) -> Result<SegSample> {
    if !part_ids.is_empty() && part_ids.len() != cloud.len() {
        return Err(Error::shape(format!(
            "{} part ids for {} points",
            part_ids.len(),
            cloud.len()
        )));
    }
    let normalized = normalize_unit_sphere(cloud)?;
    let patches = group_patches(&normalized, g, k, 0)?;
    let layers = tap_layers(encoder.config.depth);
    let (_, features) = encoder.forward(&patches, None, &layers)?;
    let taps: Vec<Mat> = layers
        .iter()
        .map(|&l| {
            features
                .taps
                .iter()
                .find(|(layer, _)| *layer == l)
                .map(|(_, m)| m.clone())
                .expect("requested tap missing")
        })
        .collect();
    let mut target = Mat::zeros(normalized.len(), 3);
    for i in 0..normalized.len() {
        target.row_mut(i).copy_from_slice(&normalized.position(i));
    }
    let prop = propagation_weights(&patches.centers, &target, 3.min(g))?;
    Ok(SegSample { id: normalized.id.clone(), taps, prop, part_ids })
}

fn head_logits(
    tape: &mut Tape,
    nodes: &HeadNodes,
    sample: &SegSample,
    labels: &PartLabelSet,
    tau_seg: f64,
) -> NodeId {
    let mut fused = Vec::with_capacity(3);
    for (i, tap) in sample.taps.iter().enumerate() {
        let t = tape.constant(tap.clone());
        let h = tape.linear(t, nodes.tap_w[i], Some(nodes.tap_b[i]));
        let h = tape.gelu(h);
        let p = tape.constant(sample.prop.clone());
        fused.push(tape.matmul(p, h));
    }
    let cat = tape.concat_cols(&fused);
    let f1 = tape.linear(cat, nodes.fuse_w1, Some(nodes.fuse_b1));
    let f1 = tape.gelu(f1);
    let feats = tape.linear(f1, nodes.fuse_w2, Some(nodes.fuse_b2));
    let unit = tape.unit_rows(feats);
    let parts = tape.constant(labels.vectors().clone());
    let sim = tape.matmul_nt(unit, parts);
    tape.scale(sim, 1.0 / tau_seg)
}

/// Per-point part logits [N, num_parts] for one prepared sample.
pub fn partseg_forward(head: &SegHead, sample: &SegSample, labels: &PartLabelSet) -> Result<Mat> {
    head.ensure_finite()?;
    let mut tape = Tape::new();
    let nodes = stage_head(&mut tape, head, false);
    let logits = head_logits(&mut tape, &nodes, sample, labels, head.tau_seg);
    Ok(tape.value(logits).clone())
}

/// Argmax labels from logits, ties to the lower part index.
pub fn logits_to_parts(logits: &Mat) -> Vec<usize> {
    (0..logits.rows)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SegTrainState {
    pub head: SegHead,
    pub adam: AdamState,
    pub step: usize,
    pub lr: f64,
}

impl SegTrainState {
    pub fn new(head: SegHead, lr: f64) -> SegTrainState {
        SegTrainState { head, adam: AdamState::default(), step: 0, lr }
    }
}

/// One head-only optimizer step over labeled samples; mean per-point
/// cross-entropy. The encoder is not even reachable from here — backbone
/// freezing is structural.
pub fn partseg_train_step(
    state: &mut SegTrainState,
    samples: &[SegSample],
    labels: &PartLabelSet,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no segmentation samples"));
    }
    state.head.ensure_finite()?;
    let mut tape = Tape::new();
    let nodes = stage_head(&mut tape, &state.head, true);
    let mut losses = Vec::with_capacity(samples.len());
    for sample in samples {
        if sample.part_ids.is_empty() {
            return Err(Error::invalid(format!("sample '{}' has no part labels", sample.id)));
        }
        if let Some(&bad) = sample.part_ids.iter().find(|&&p| p >= labels.len()) {
            return Err(Error::invalid(format!(
                "sample '{}' references part {bad}, category has {}",
                sample.id,
                labels.len()
            )));
        }
        let logits = head_logits(&mut tape, &nodes, sample, labels, state.head.tau_seg);
        losses.push(tape.ce_label_rows(logits, &sample.part_ids));
    }
    let mut loss_node = losses[0];
    for &l in &losses[1..] {
        loss_node = tape.add(loss_node, l);
    }
    if losses.len() > 1 {
        loss_node = tape.scale(loss_node, 1.0 / losses.len() as f64);
    }
    let loss = tape.value(loss_node).data[0];
    if !loss.is_finite() {
        return Err(Error::non_finite(format!("segmentation loss at step {}", state.step)));
    }
    let grads = tape.backward(loss_node);

    let ordered = [
        ("head.tap0.weight", nodes.tap_w[0]),
        ("head.tap0.bias", nodes.tap_b[0]),
        ("head.tap1.weight", nodes.tap_w[1]),
        ("head.tap1.bias", nodes.tap_b[1]),
        ("head.tap2.weight", nodes.tap_w[2]),
        ("head.tap2.bias", nodes.tap_b[2]),
        ("head.fuse.fc1.weight", nodes.fuse_w1),
        ("head.fuse.fc1.bias", nodes.fuse_b1),
        ("head.fuse.fc2.weight", nodes.fuse_w2),
        ("head.fuse.fc2.bias", nodes.fuse_b2),
    ];
    let mut by_name: BTreeMap<&str, Mat> = BTreeMap::new();
    for (name, node) in ordered {
        let g = match grads.get(node) {
            Some(g) => g.clone(),
            None => {
                let v = tape.value(node);
                Mat::zeros(v.rows, v.cols)
            }
        };
        if !g.is_finite() {
            return Err(Error::non_finite(format!("gradient for '{name}' at step {}", state.step)));
        }
        by_name.insert(name, g);
    }
    let t = state.step + 1;
    let lr = state.lr;
    let adam = &mut state.adam;
    state.head.visit_mut(&mut |name, w| {
        if let Some(g) = by_name.get(name) {
            adam.update(name, w, g, lr, t);
        }
    });
    state.step += 1;
    Ok(loss)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MiouReport {
    pub per_category: BTreeMap<String, f64>,
    pub mean: f64,
}

/// Category-mean IoU: per shape, IoU per part averaged over parts present
/// (in truth or prediction); per category, mean over shapes; overall, mean
/// over categories.
pub fn miou_c(
    pred_parts: &[Vec<usize>],
    true_parts: &[Vec<usize>],
    category_of_shape: &[String],
) -> Result<MiouReport> {
    if pred_parts.len() != true_parts.len() || pred_parts.len() != category_of_shape.len() {
        return Err(Error::shape(format!(
            "{} predictions, {} truths, {} categories",
            pred_parts.len(),
            true_parts.len(),
            category_of_shape.len()
        )));
    }
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for ((pred, truth), cat) in pred_parts.iter().zip(true_parts).zip(category_of_shape) {
        if pred.len() != truth.len() {
            return Err(Error::shape(format!(
                "shape in '{cat}' has {} predictions for {} points",
                pred.len(),
                truth.len()
            )));
        }
        if pred.is_empty() {
            return Err(Error::invalid("empty shape in mIoU input"));
        }
        let max_part = pred.iter().chain(truth).max().unwrap() + 1;
        let mut inter = vec![0usize; max_part];
        let mut union = vec![0usize; max_part];
        for (&p, &t) in pred.iter().zip(truth) {
            if p == t {
                inter[p] += 1;
                union[p] += 1;
            } else {
                union[p] += 1;
                union[t] += 1;
            }
        }
        let mut total = 0.0;
        let mut present = 0;
        for part in 0..max_part {
            if union[part] > 0 {
                total += inter[part] as f64 / union[part] as f64;
                present += 1;
            }
        }
        let entry = sums.entry(cat).or_insert((0.0, 0));
        entry.0 += total / present as f64;
        entry.1 += 1;
    }
    let per_category: BTreeMap<String, f64> =
        sums.iter().map(|(c, (s, n))| (c.to_string(), s / *n as f64)).collect();
    let mean = per_category.values().sum::<f64>() / per_category.len() as f64;
    Ok(MiouReport { per_category, mean })
}
