//! Evaluation harness: shape embedding, zero-shot classification against
//! text prompts, few-shot linear probing, and top-k accuracy.

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::geometry::{normalize_unit_sphere, PointCloud};
use crate::mat::{self, Mat};
use crate::rng::{self, tag};
use crate::tokenizer::group_patches;

/// Aggregated text prompts, one unit vector per class (mean over templates,
/// then renormalized).
#[derive(Debug, Clone)]
pub struct ClassPromptSet {
    names: Vec<String>,
    vectors: Mat,
}

impl ClassPromptSet {
    /// `classes` pairs a name with ≥1 template embeddings of equal length.
    pub fn new(classes: &[(String, Vec<Vec<f64>>)]) -> Result<ClassPromptSet> {
        if classes.is_empty() {
            return Err(Error::invalid("prompt set has no classes"));
        }
        let dim = classes[0]
            .1
            .first()
            .map(|v| v.len())
            .ok_or_else(|| Error::invalid(format!("class '{}' has no prompts", classes[0].0)))?;
        let mut vectors = Mat::zeros(classes.len(), dim);
        let mut names = Vec::with_capacity(classes.len());
        for (c, (name, templates)) in classes.iter().enumerate() {
            if templates.is_empty() {
                return Err(Error::invalid(format!("class '{name}' has no prompts")));
            }
            for t in templates {
                if t.len() != dim {
                    return Err(Error::shape(format!(
                        "class '{name}' prompt has dim {}, expected {dim}",
                        t.len()
                    )));
                }
                for (j, v) in t.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::non_finite(format!("prompt for class '{name}'")));
                    }
                    vectors.set(c, j, vectors.at(c, j) + v);
                }
            }
            let row = vectors.row_mut(c);
            let inv = 1.0 / templates.len() as f64;
            row.iter_mut().for_each(|v| *v *= inv);
            let norm = mat::dot(row, row).sqrt();
            if norm <= 1e-12 {
                return Err(Error::invalid(format!(
                    "class '{name}' prompts average to the zero vector"
                )));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            names.push(name.clone());
        }
        Ok(ClassPromptSet { names, vectors })
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

    pub fn vector(&self, class: usize) -> &[f64] {
        self.vectors.row(class)
    }
}

/// Linear classifier over frozen embeddings.
#[derive(Debug, Clone)]
pub struct ProbeModel {
    /// [num_classes, dim]
    pub weights: Mat,
    /// [1, num_classes]
    pub bias: Mat,
    pub selected: Vec<usize>,
}

impl ProbeModel {
    pub fn num_classes(&self) -> usize {
        self.weights.rows
    }

    /// Class indices sorted by descending logit, ties by class index.
    pub fn ranking(&self, embedding: &[f64]) -> Vec<usize> {
        let mut scored: Vec<(usize, f64)> = (0..self.weights.rows)
            .map(|c| (c, mat::dot(self.weights.row(c), embedding) + self.bias.at(0, c)))
            .collect();
        rank_desc(&mut scored);
        scored.into_iter().map(|(c, _)| c).collect()
    }
}

fn rank_desc(scored: &mut [(usize, f64)]) {
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
}

/// Embed one cloud: recenter/rescale to the unit sphere, group with FPS
/// start 0, full (unmasked) forward, unit-normalize.
pub fn embed_shape(encoder: &Encoder, cloud: &PointCloud, g: usize, k: usize) -> Result<Vec<f64>> {
    let normalized = normalize_unit_sphere(cloud)?;
    let patches = group_patches(&normalized, g, k, 0)?;
    let (mut emb, _) = encoder.forward(&patches, None, &[])?;
    mat::unit_normalize(&mut emb);
    Ok(emb)
}

/// Embed many clouds into one [n, teacher_dim] matrix, rows in input order.
/// Shapes are independent, so the work fans out across the rayon pool; each
/// row's arithmetic stays sequential, making the result thread-count
/// invariant.
pub fn embed_shapes(
    encoder: &Encoder,
    clouds: &[PointCloud],
    g: usize,
    k: usize,
) -> Result<Mat> {
    use rayon::prelude::*;
    if clouds.is_empty() {
        return Err(Error::invalid("no clouds to embed"));
    }
    let rows: Vec<Vec<f64>> = clouds
        .par_iter()
        .map(|c| embed_shape(encoder, c, g, k))
        .collect::<Result<_>>()?;
    let mut out = Mat::zeros(clouds.len(), encoder.config.teacher_dim);
    for (r, row) in rows.iter().enumerate() {
        out.row_mut(r).copy_from_slice(row);
    }
    Ok(out)
}

/// Cosine ranking of `shape_emb` against each aggregated class vector;
/// returns the top-k `(class index, score)` pairs.
pub fn zero_shot_classify(
    shape_emb: &[f64],
    prompts: &ClassPromptSet,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    if prompts.is_empty() {
        return Err(Error::invalid("empty prompt set"));
    }
    if k == 0 || k > prompts.len() {
        return Err(Error::invalid(format!(
            "k = {k} outside 1..={} classes",
            prompts.len()
        )));
    }
    if shape_emb.len() != prompts.vectors.cols {
        return Err(Error::shape(format!(
            "embedding dim {} vs prompt dim {}",
            shape_emb.len(),
            prompts.vectors.cols
        )));
    }
    let norm = mat::dot(shape_emb, shape_emb).sqrt();
    if norm <= 1e-12 {
        return Err(Error::invalid("zero shape embedding"));
    }
    let mut scored: Vec<(usize, f64)> = (0..prompts.len())
        .map(|c| (c, mat::dot(prompts.vector(c), shape_emb) / norm))
        .collect();
    rank_desc(&mut scored);
    scored.truncate(k);
    Ok(scored)
}

/// Few-shot probe: pick `shots` samples per class with the seeded RNG, then
/// fit multinomial logistic regression by full-batch gradient descent until
/// the gradient norm drops below 1e-5 (or 10k iterations).
pub fn linear_probe_fit(
    embeddings: &Mat,
    labels: &[usize],
    shots_per_class: usize,
    seed: u64,
) -> Result<ProbeModel> {
    if embeddings.rows != labels.len() {
        return Err(Error::shape(format!(
            "{} embeddings vs {} labels",
            embeddings.rows,
            labels.len()
        )));
    }
    if shots_per_class == 0 {
        return Err(Error::invalid("shots_per_class must be at least 1"));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    if num_classes < 2 {
        return Err(Error::invalid("probe needs at least 2 classes"));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l].push(i);
    }
    let mut selected = Vec::with_capacity(num_classes * shots_per_class);
    for (c, members) in per_class.iter().enumerate() {
        if members.len() < shots_per_class {
            return Err(Error::invalid(format!(
                "class {c} has {} samples, need {shots_per_class}",
                members.len()
            )));
        }
        let mut rng = rng::derive(seed, &[tag::PROBE_SHOTS, c as u64]);
        let perm = rng::permutation(&mut rng, members.len());
        selected.extend(perm[..shots_per_class].iter().map(|&j| members[j]));
    }
    selected.sort_unstable();

    let dim = embeddings.cols;
    let n = selected.len();
    let mut x = Mat::zeros(n, dim);
    for (r, &i) in selected.iter().enumerate() {
        x.row_mut(r).copy_from_slice(embeddings.row(i));
    }
    let mut weights = Mat::zeros(num_classes, dim);
    let mut bias = Mat::zeros(1, num_classes);
    let lr = 1.0;
    for _ in 0..10_000 {
        // softmax probabilities with the one-hot targets subtracted
        let mut delta = mat::mm_nt(&x, &weights);
        for r in 0..n {
            let row = delta.row_mut(r);
            for c in 0..num_classes {
                row[c] += bias.at(0, c);
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
            row[labels[selected[r]]] -= 1.0;
        }
        let mut gw = mat::mm_tn(&delta, &x);
        gw.scale_in_place(1.0 / n as f64);
        let mut gb = Mat::zeros(1, num_classes);
        for r in 0..n {
            for c in 0..num_classes {
                gb.set(0, c, gb.at(0, c) + delta.at(r, c) / n as f64);
            }
        }
        let gnorm = (gw.sq_norm() + gb.sq_norm()).sqrt();
        if gnorm < 1e-5 {
            break;
        }
        weights.add_scaled_in_place(&gw, -lr);
        bias.add_scaled_in_place(&gb, -lr);
    }
    Ok(ProbeModel { weights, bias, selected })
}

pub fn probe_accuracy(model: &ProbeModel, embeddings: &Mat, labels: &[usize]) -> f64 {
    let correct = (0..embeddings.rows)
        .filter(|&r| model.ranking(embeddings.row(r))[0] == labels[r])
        .count();
    correct as f64 / embeddings.rows.max(1) as f64
}

/// Fraction of samples whose true label appears in the first `k` ranks.
/// Lengths must be aligned.
pub fn topk_accuracy(rankings: &[Vec<usize>], true_labels: &[usize], k: usize) -> f64 {
    assert_eq!(rankings.len(), true_labels.len(), "rankings vs labels length");
    if rankings.is_empty() {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .zip(true_labels)
        .filter(|(r, &t)| r.iter().take(k).any(|&c| c == t))
        .count();
    hits as f64 / rankings.len() as f64
}

/// Mean probe accuracy over several seeds, the Fig.-4 protocol.
pub fn probe_over_seeds(
    embeddings: &Mat,
    labels: &[usize],
    shots: usize,
    seeds: &[u64],
) -> Result<(f64, Vec<f64>)> {
    if seeds.is_empty() {
        return Err(Error::invalid("no probe seeds given"));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let model = linear_probe_fit(embeddings, labels, shots, s)?;
        per_seed.push(probe_accuracy(&model, embeddings, labels));
    }
    let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    Ok((mean, per_seed))
}
