//! Contrastive training: the four-term point↔image / point↔text objective,
//! cosine schedule with warmup, Adam, masking, stochastic depth, gradient
//! verification, and the end-to-end run driver.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::checkpoint;
use crate::encoder::{build_forward, Encoder, EncoderConfig, ForwardOptions, Role, StagedEncoder};
use crate::error::{Error, Result};
use crate::geometry::normalize_unit_sphere;
use crate::mat::{self, Mat};
use crate::rng::{self, tag};
use crate::teachercache::{load_manifest, sample_batch, Manifest};
use crate::tokenizer::{group_patches, PatchSet};

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Both,
    TextOnly,
    ImageOnly,
}

/// Learning-rate schedule: linear warmup to the peak, then cosine decay to 0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

pub fn lr_at(step: usize, s: &Schedule) -> f64 {
    if s.warmup_steps > 0 && step < s.warmup_steps {
        return s.peak_lr * step as f64 / s.warmup_steps as f64;
    }
    let span = (s.total_steps - s.warmup_steps).max(1) as f64;
    let progress = (step - s.warmup_steps) as f64 / span;
    s.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.98, eps: 1e-6 }
    }
}

/// Adam with bias correction and no weight decay. Moments are keyed by
/// tensor name and allocated lazily.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub params: AdamParams,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

impl AdamState {
    pub fn new(params: AdamParams) -> Self {
        AdamState { params, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update; `t` is the 1-based step count for bias correction.
    pub fn update(&mut self, name: &str, w: &mut Mat, g: &Mat, lr: f64, t: usize) {
        let p = self.params;
        let m = self.m.entry(name.to_string()).or_insert_with(|| Mat::zeros(w.rows, w.cols));
        let v = self.v.entry(name.to_string()).or_insert_with(|| Mat::zeros(w.rows, w.cols));
        let bc1 = 1.0 - p.beta1.powi(t as i32);
        let bc2 = 1.0 - p.beta2.powi(t as i32);
        for i in 0..w.data.len() {
            let gi = g.data[i];
            m.data[i] = p.beta1 * m.data[i] + (1.0 - p.beta1) * gi;
            v.data[i] = p.beta2 * v.data[i] + (1.0 - p.beta2) * gi * gi;
            let mhat = m.data[i] / bc1;
            let vhat = v.data[i] / bc2;
            w.data[i] -= lr * mhat / (vhat.sqrt() + p.eps);
        }
    }
}

/// Everything the optimizer owns between steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub encoder: Encoder,
    pub log_tau: f64,
    pub step: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub mask_ratio: f64,
    pub drop_path_rate: f64,
    pub schedule: Schedule,
    pub adam: AdamState,
}

impl TrainState {
    pub fn new(
        encoder: Encoder,
        seed: u64,
        loss_mode: LossMode,
        mask_ratio: f64,
        drop_path_rate: f64,
        schedule: Schedule,
    ) -> Result<TrainState> {
        if !(0.0..1.0).contains(&mask_ratio) {
            return Err(Error::invalid(format!("mask_ratio {mask_ratio} outside [0, 1)")));
        }
        if !(0.0..1.0).contains(&drop_path_rate) {
            return Err(Error::invalid(format!("drop_path_rate {drop_path_rate} outside [0, 1)")));
        }
        Ok(TrainState {
            encoder,
            log_tau: TAU_INIT.ln(),
            step: 0,
            seed,
            loss_mode,
            mask_ratio,
            drop_path_rate,
            schedule,
            adam: AdamState::new(AdamParams::default()),
        })
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }
}

/// A tokenized batch ready for the forward pass; teacher vectors raw.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub patches: Vec<PatchSet>,
    pub image_vecs: Mat,
    pub text_vecs: Mat,
    pub shape_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
    pub grad_norm: f64,
    /// Tokens the transformer consumed per cloud (class token included);
    /// identical across the batch since G and the mask ratio are fixed.
    pub tokens_per_cloud: usize,
}

fn row_logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_unit_rows(m: &Mat, what: &str) -> Result<()> {
    for r in 0..m.rows {
        let n = mat::dot(m.row(r), m.row(r)).sqrt();
        if (n - 1.0).abs() > 1e-4 {
            return Err(Error::invalid(format!("{what} row {r} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// The Eq.-style symmetric InfoNCE over unit-normalized rows: mean of the
/// point→x and x→point cross-entropies for each enabled modality.
pub fn contrastive_loss(e_p: &Mat, e_i: &Mat, e_t: &Mat, tau: f64, mode: LossMode) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    let n = e_p.rows;
    if e_i.rows != n || e_t.rows != n || e_i.cols != e_p.cols || e_t.cols != e_p.cols {
        return Err(Error::shape(format!(
            "triplet shapes disagree: P {}x{}, I {}x{}, T {}x{}",
            e_p.rows, e_p.cols, e_i.rows, e_i.cols, e_t.rows, e_t.cols
        )));
    }
    check_unit_rows(e_p, "point embedding")?;
    check_unit_rows(e_i, "image embedding")?;
    check_unit_rows(e_t, "text embedding")?;

    // mean cross-entropy along the diagonal of sim/tau, both directions
    let pair = |a: &Mat, b: &Mat| -> f64 {
        let mut logits = mat::mm_nt(a, b);
        logits.scale_in_place(1.0 / tau);
        let lt = logits.transpose();
        let mut total = 0.0;
        for r in 0..n {
            total += row_logsumexp(logits.row(r)) - logits.at(r, r);
            total += row_logsumexp(lt.row(r)) - lt.at(r, r);
        }
        total / (2.0 * n as f64)
    };
    Ok(match mode {
        LossMode::Both => 0.5 * (pair(e_p, e_t) + pair(e_p, e_i)),
        LossMode::TextOnly => pair(e_p, e_t),
        LossMode::ImageOnly => pair(e_p, e_i),
    })
}

/// Taped version over raw (unnormalized) rows; normalization is part of the
/// graph so gradients flow through it. `log_tau` must be a 1x1 node.
pub fn contrastive_loss_taped(
    tape: &mut Tape,
    e_p: NodeId,
    e_i: NodeId,
    e_t: NodeId,
    log_tau: NodeId,
    mode: LossMode,
) -> NodeId {
    let u_p = tape.unit_rows(e_p);
    let u_i = tape.unit_rows(e_i);
    let u_t = tape.unit_rows(e_t);
    let neg = tape.scale(log_tau, -1.0);
    let inv_tau = tape.exp(neg);

    let pair = |tape: &mut Tape, a: NodeId, b: NodeId| -> NodeId {
        let sim = tape.matmul_nt(a, b);
        let logits = tape.mul_scalar_node(sim, inv_tau);
        let fwd = tape.ce_diag_rows(logits);
        let logits_t = tape.transpose(logits);
        let bwd = tape.ce_diag_rows(logits_t);
        let sum = tape.add(fwd, bwd);
        tape.scale(sum, 0.5)
    };
    match mode {
        LossMode::Both => {
            let pt = pair(tape, u_p, u_t);
            let pi = pair(tape, u_p, u_i);
            let sum = tape.add(pt, pi);
            tape.scale(sum, 0.5)
        }
        LossMode::TextOnly => pair(tape, u_p, u_t),
        LossMode::ImageOnly => pair(tape, u_p, u_i),
    }
}

/// The full step graph: staged encoder, per-cloud masked forwards,
/// normalized stacked embeddings, and the loss node.
pub(crate) struct StepGraph {
    pub tape: Tape,
    pub staged: StagedEncoder,
    pub log_tau_node: NodeId,
    pub loss_node: NodeId,
    pub token_counts: Vec<usize>,
}

pub(crate) fn build_step_graph(state: &TrainState, batch: &PreparedBatch) -> Result<StepGraph> {
    if batch.patches.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let d = state.encoder.config.teacher_dim;
    if batch.image_vecs.cols != d || batch.text_vecs.cols != d {
        return Err(Error::shape(format!(
            "teacher vectors are {}- and {}-dimensional, encoder projects to {d}",
            batch.image_vecs.cols, batch.text_vecs.cols
        )));
    }
    if batch.image_vecs.rows != batch.patches.len() || batch.text_vecs.rows != batch.patches.len() {
        return Err(Error::shape("batch row counts disagree".to_string()));
    }

    let mut tape = Tape::new();
    let staged = state.encoder.stage(&mut tape, true);
    let log_tau_node = tape.leaf(Mat::from_vec(1, 1, vec![state.log_tau]));

    let depth = state.encoder.config.depth;
    let mut embeds = Vec::with_capacity(batch.patches.len());
    let mut token_counts = Vec::with_capacity(batch.patches.len());
    for (i, patches) in batch.patches.iter().enumerate() {
        let g = patches.g;
        let keep_count = ((1.0 - state.mask_ratio) * g as f64).ceil() as usize;
        let mask: Option<Vec<bool>> = if keep_count >= g {
            None
        } else {
            let mut rng = rng::derive(state.seed, &[tag::TOKEN_MASK, state.step as u64, i as u64]);
            let perm = rng::permutation(&mut rng, g);
            let mut mask = vec![false; g];
            for &gi in &perm[..keep_count] {
                mask[gi] = true;
            }
            Some(mask)
        };
        let scales: Option<Vec<(f64, f64)>> = if state.drop_path_rate > 0.0 {
            let mut rng = rng::derive(state.seed, &[tag::DROP_PATH, state.step as u64, i as u64]);
            Some(
                (0..depth)
                    .map(|b| {
                        let p = if depth > 1 {
                            state.drop_path_rate * b as f64 / (depth - 1) as f64
                        } else {
                            0.0
                        };
                        let mut draw = || {
                            let u: f64 = rng.gen_range(0.0..1.0);
                            if u >= p {
                                1.0 / (1.0 - p)
                            } else {
                                0.0
                            }
                        };
                        (draw(), draw())
                    })
                    .collect(),
            )
        } else {
            None
        };
        let out = build_forward(
            &mut tape,
            &state.encoder.config,
            &staged,
            patches,
            &ForwardOptions {
                keep_mask: mask.as_deref(),
                colors_override: None,
                branch_scales: scales.as_deref(),
                tap_layers: &[],
            },
        )?;
        token_counts.push(out.token_count);
        embeds.push(out.embedding);
    }
    let e_p = tape.concat_rows(&embeds);
    let e_i = tape.constant(batch.image_vecs.clone());
    let e_t = tape.constant(batch.text_vecs.clone());
    let loss_node = contrastive_loss_taped(&mut tape, e_p, e_i, e_t, log_tau_node, state.loss_mode);
    Ok(StepGraph { tape, staged, log_tau_node, loss_node, token_counts })
}

/// One optimizer step. On any non-finite loss or gradient the state is left
/// untouched and an error describes what went wrong. Reported `tau` is the
/// value used for this step's loss (pre-update).
pub fn train_step(state: &mut TrainState, batch: &PreparedBatch) -> Result<StepMetrics> {
    state.encoder.ensure_finite()?;
    let graph = build_step_graph(state, batch)?;
    let loss = graph.tape.value(graph.loss_node).data[0];
    if !loss.is_finite() {
        return Err(Error::non_finite(format!("loss at step {}", state.step)));
    }
    let grads = graph.tape.backward(graph.loss_node);

    let mut by_name: HashMap<String, Mat> = HashMap::new();
    let mut sq_sum = 0.0;
    for (meta, node) in &graph.staged.params {
        if !meta.trainable {
            continue;
        }
        let g = match grads.get(*node) {
            Some(g) => g.clone(),
            None => {
                let v = graph.tape.value(*node);
                Mat::zeros(v.rows, v.cols)
            }
        };
        if !g.is_finite() {
            return Err(Error::non_finite(format!(
                "gradient for '{}' at step {}",
                meta.name, state.step
            )));
        }
        sq_sum += g.sq_norm();
        by_name.insert(meta.name.clone(), g);
    }
    let tau_grad = grads.get(graph.log_tau_node).map(|g| g.data[0]).unwrap_or(0.0);
    if !tau_grad.is_finite() {
        return Err(Error::non_finite(format!("gradient for log_tau at step {}", state.step)));
    }
    sq_sum += tau_grad * tau_grad;
    let grad_norm = sq_sum.sqrt();

    let lr = lr_at(state.step, &state.schedule);
    let tau_used = state.tau();
    let t = state.step + 1;
    let adam = &mut state.adam;
    state.encoder.visit_params_mut(&mut |meta, w| {
        if let Some(g) = by_name.get(&meta.name) {
            adam.update(&meta.name, w, g, lr, t);
        }
    });
    let mut tau_mat = Mat::from_vec(1, 1, vec![state.log_tau]);
    let tau_grad_mat = Mat::from_vec(1, 1, vec![tau_grad]);
    adam.update("log_tau", &mut tau_mat, &tau_grad_mat, lr, t);
    state.log_tau = tau_mat.data[0].clamp(TAU_MIN.ln(), TAU_MAX.ln());

    let metrics = StepMetrics {
        step: state.step,
        loss,
        lr,
        tau: tau_used,
        grad_norm,
        tokens_per_cloud: graph.token_counts[0],
    };
    state.step += 1;
    Ok(metrics)
}

/// Finite-difference verification of the full training gradient. Samples at
/// least 200 scalars across every tensor role plus log_tau and returns the
/// maximum relative error (denominators floored at 1e-8).
pub fn grad_check(state: &TrainState, batch: &PreparedBatch, epsilon: f64) -> Result<f64> {
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(Error::invalid(format!("epsilon {epsilon} must be positive")));
    }
    let graph = build_step_graph(state, batch)?;
    let grads = graph.tape.backward(graph.loss_node);
    let mut analytic: HashMap<String, Mat> = HashMap::new();
    for (meta, node) in &graph.staged.params {
        if meta.trainable {
            let g = match grads.get(*node) {
                Some(g) => g.clone(),
                None => Mat::zeros(graph.tape.value(*node).rows, graph.tape.value(*node).cols),
            };
            analytic.insert(meta.name.clone(), g);
        }
    }
    let tau_grad = grads.get(graph.log_tau_node).map(|g| g.data[0]).unwrap_or(0.0);

    // group trainable tensors by role, then sample a per-role quota
    let mut by_role: BTreeMap<&'static str, Vec<(String, usize)>> = BTreeMap::new();
    state.encoder.visit_params(&mut |meta, m| {
        if meta.trainable {
            let key = role_key(meta.role);
            by_role.entry(key).or_default().push((meta.name.clone(), m.len()));
        }
    });
    let quota = 200usize.div_ceil(by_role.len());
    let mut rng = rng::derive(state.seed, &[tag::GRAD_CHECK, state.step as u64]);
    let mut samples: Vec<(String, usize)> = Vec::new();
    for (_, tensors) in &by_role {
        let total: usize = tensors.iter().map(|(_, l)| l).sum();
        for _ in 0..quota.min(total) {
            let (name, len) = &tensors[rng.gen_range(0..tensors.len())];
            samples.push((name.clone(), rng.gen_range(0..*len)));
        }
    }

    let loss_of = |s: &TrainState| -> Result<f64> {
        let g = build_step_graph(s, batch)?;
        Ok(g.tape.value(g.loss_node).data[0])
    };

    let mut max_rel: f64 = 0.0;
    let mut check = |a: f64, n: f64| {
        let rel = (a - n).abs() / f64::max(1e-8, a.abs().max(n.abs()));
        max_rel = max_rel.max(rel);
    };
    for (name, idx) in samples {
        let mut poked = state.clone();
        let poke = |s: &mut TrainState, delta: f64| {
            s.encoder.visit_params_mut(&mut |meta, m| {
                if meta.name == name {
                    m.data[idx] += delta;
                }
            });
        };
        poke(&mut poked, epsilon);
        let plus = loss_of(&poked)?;
        poke(&mut poked, -2.0 * epsilon);
        let minus = loss_of(&poked)?;
        let numeric = (plus - minus) / (2.0 * epsilon);
        check(analytic[&name].data[idx], numeric);
    }
    // log_tau always included
    let mut poked = state.clone();
    poked.log_tau += epsilon;
    let plus = loss_of(&poked)?;
    poked.log_tau -= 2.0 * epsilon;
    let minus = loss_of(&poked)?;
    check(tau_grad, (plus - minus) / (2.0 * epsilon));
    Ok(max_rel)
}

fn role_key(role: Role) -> &'static str {
    match role {
        Role::Tokenizer => "tokenizer",
        Role::Positional => "positional",
        Role::ClassToken => "cls",
        Role::Qkv => "qkv",
        Role::AttnProj => "attn_proj",
        Role::Norm => "norm",
        Role::Mlp => "mlp",
        Role::FinalNorm => "final_norm",
        Role::Projection => "projection",
    }
}

/// Run configuration, exactly the documented JSON surface.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub scale: String,
    #[serde(rename = "G", default = "default_g")]
    pub g: usize,
    #[serde(rename = "K", default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub teacher_dim: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub total_steps: usize,
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
    #[serde(default = "default_drop_path")]
    pub drop_path_rate: f64,
    #[serde(default)]
    pub loss_mode: LossMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub determinism: bool,
    pub manifest_path: PathBuf,
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub freeze_transformer: bool,
}

fn default_g() -> usize {
    64
}
fn default_k() -> usize {
    32
}
fn default_batch() -> usize {
    32
}
fn default_peak_lr() -> f64 {
    1e-3
}
fn default_mask_ratio() -> f64 {
    0.5
}
fn default_drop_path() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::invalid("total_steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.g == 0 || self.k == 0 {
            return Err(Error::invalid("G and K must be at least 1"));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::invalid(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::invalid(format!("mask_ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::invalid(format!(
                "drop_path_rate {} outside [0, 1)",
                self.drop_path_rate
            )));
        }
        if let Some(w) = self.warmup_steps {
            if w > self.total_steps {
                return Err(Error::invalid(format!(
                    "warmup_steps {w} exceeds total_steps {}",
                    self.total_steps
                )));
            }
        }
        if self.freeze_transformer && self.init_checkpoint.is_none() {
            return Err(Error::invalid(
                "freeze_transformer requires init_checkpoint (freezing fresh weights trains nothing useful)",
            ));
        }
        Ok(())
    }

    /// Warmup defaults to 3% of total steps (rounded) when unset.
    pub fn resolved_warmup(&self) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| ((self.total_steps as f64) * 0.03).round() as usize)
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let mut cfg = EncoderConfig::preset(&self.scale)?;
        if let Some(d) = self.teacher_dim {
            cfg.teacher_dim = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub final_tau: f64,
    pub params: usize,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub model_card: PathBuf,
}

#[derive(Debug, Serialize)]
struct ModelCard {
    scale: String,
    encoder: EncoderConfig,
    #[serde(rename = "G")]
    g: usize,
    #[serde(rename = "K")]
    k: usize,
    params: usize,
    total_steps: usize,
    warmup_steps: usize,
    peak_lr: f64,
    mask_ratio: f64,
    drop_path_rate: f64,
    loss_mode: LossMode,
    seed: u64,
    determinism: bool,
    final_loss: f64,
    final_tau: f64,
    notes: Vec<String>,
}

/// Tokenize the sampled shapes of one step. Clouds are normalized once and
/// cached by the caller; FPS starts are drawn per (seed, step, shape).
pub fn prepare_step_batch(
    manifest: &Manifest,
    clouds: &mut HashMap<usize, crate::geometry::PointCloud>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<PreparedBatch> {
    let batch = sample_batch(manifest, cfg.batch_size, cfg.seed, step)?;
    let mut patches = Vec::with_capacity(batch.len());
    for (row, &si) in batch.shape_indices.iter().enumerate() {
        if !clouds.contains_key(&si) {
            let contents = crate::ply::read_ply(&batch.cloud_paths[row])?;
            clouds.insert(si, normalize_unit_sphere(&contents.cloud)?);
        }
        let cloud = &clouds[&si];
        let mut rng = rng::derive(cfg.seed, &[tag::FPS_START, step as u64, si as u64]);
        let start = rng.gen_range(0..cloud.len());
        patches.push(group_patches(cloud, cfg.g, cfg.k, start)?);
    }
    Ok(PreparedBatch {
        patches,
        image_vecs: batch.image_vecs,
        text_vecs: batch.text_vecs,
        shape_ids: batch.shape_ids,
    })
}

/// Full training run: builds the encoder, iterates `total_steps`, writes
/// `metrics.jsonl`, `checkpoint.u3dc`, and `model_card.json` into `out_dir`.
pub fn run_training(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let manifest = load_manifest(&cfg.manifest_path)?;
    let enc_cfg = cfg.encoder_config()?;
    if manifest.image_cache.dim != enc_cfg.teacher_dim || manifest.text_cache.dim != enc_cfg.teacher_dim {
        return Err(Error::shape(format!(
            "caches have dims {} (image) and {} (text); encoder projects to {}",
            manifest.image_cache.dim, manifest.text_cache.dim, enc_cfg.teacher_dim
        )));
    }

    let mut encoder = Encoder::init(&enc_cfg, cfg.seed)?;
    if let Some(ck) = &cfg.init_checkpoint {
        encoder = checkpoint::load_2d_prior(ck, &encoder, cfg.freeze_transformer)?;
    }
    let schedule = Schedule {
        peak_lr: cfg.peak_lr,
        total_steps: cfg.total_steps,
        warmup_steps: cfg.resolved_warmup(),
    };
    let mut state = TrainState::new(
        encoder,
        cfg.seed,
        cfg.loss_mode,
        cfg.mask_ratio,
        cfg.drop_path_rate,
        schedule,
    )?;

    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let mut clouds = HashMap::new();
    let mut last = None;
    for step in 0..cfg.total_steps {
        let batch = prepare_step_batch(&manifest, &mut clouds, cfg, step)?;
        let m = train_step(&mut state, &batch)?;
        writeln!(metrics_file, "{}", serde_json::to_string(&m)?)?;
        last = Some(m);
    }
    metrics_file.flush()?;

    let checkpoint_path = out_dir.join("checkpoint.u3dc");
    let tau_mat = Mat::from_vec(1, 1, vec![state.log_tau]);
    checkpoint::save_encoder(&checkpoint_path, &state.encoder, &[("log_tau".to_string(), &tau_mat)])?;

    let last = last.expect("at least one step ran");
    let card = ModelCard {
        scale: cfg.scale.clone(),
        encoder: enc_cfg.clone(),
        g: cfg.g,
        k: cfg.k,
        params: enc_cfg.count_params()?,
        total_steps: cfg.total_steps,
        warmup_steps: schedule.warmup_steps,
        peak_lr: cfg.peak_lr,
        mask_ratio: cfg.mask_ratio,
        drop_path_rate: cfg.drop_path_rate,
        loss_mode: cfg.loss_mode,
        seed: cfg.seed,
        determinism: cfg.determinism,
        final_loss: last.loss,
        final_tau: state.tau(),
        notes: vec![
            "inputs are recentred and rescaled to the unit sphere at both training and inference".to_string(),
            "positional embeddings are a function of patch centers only".to_string(),
            "embeddings are unit-normalized at loss and evaluation sites, not inside the encoder".to_string(),
        ],
    };
    let card_path = out_dir.join("model_card.json");
    std::fs::write(&card_path, serde_json::to_string_pretty(&card)?)?;

    Ok(TrainSummary {
        steps: cfg.total_steps,
        final_loss: last.loss,
        final_tau: state.tau(),
        params: enc_cfg.count_params()?,
        checkpoint: checkpoint_path,
        metrics: metrics_path,
        model_card: card_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointCloud;
    use crate::teachercache::fixtures::synthetic_manifest;
    use rand::Rng;

    fn sched(peak: f64, total: usize, warmup: usize) -> Schedule {
        Schedule { peak_lr: peak, total_steps: total, warmup_steps: warmup }
    }

    fn unit_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = rng::derive(seed, &[4242]);
        let mut m = Mat::zeros(rows, cols);
        for v in m.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        mat::unit_normalize_rows(&mut m);
        m
    }

    fn nano_state(seed: u64, mask: f64, dpr: f64) -> TrainState {
        let cfg = EncoderConfig::preset("nano").unwrap();
        let enc = Encoder::init(&cfg, seed).unwrap();
        TrainState::new(enc, seed, LossMode::Both, mask, dpr, sched(1e-3, 100, 10)).unwrap()
    }

    fn synthetic_batch(n: usize, g: usize, k: usize, dim: usize, seed: u64) -> PreparedBatch {
        blob_batch(n, 48, g, k, dim, seed)
    }

    /// Distinguishable shapes: anisotropic blobs with shape-specific colors.
    fn blob_batch(n: usize, points: usize, g: usize, k: usize, dim: usize, seed: u64) -> PreparedBatch {
        let mut rng = rng::derive(seed, &[991]);
        let mut image_vecs = Mat::zeros(n, dim);
        let mut text_vecs = Mat::zeros(n, dim);
        let mut patches = Vec::new();
        let mut shape_ids = Vec::new();
        for i in 0..n {
            let axes: Vec<f64> = (0..3).map(|_| rng.gen_range(0.2..1.0)).collect();
            let center: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let base: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..0.9)).collect();
            let mut pos = Vec::with_capacity(points * 3);
            let mut col = Vec::with_capacity(points * 3);
            for _ in 0..points {
                for a in 0..3 {
                    pos.push(center[a] + axes[a] * rng.gen_range(-1.0..1.0));
                    col.push((base[a] + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0));
                }
            }
            let cloud = PointCloud::new(format!("s{i}"), pos, col).unwrap();
            let cloud = normalize_unit_sphere(&cloud).unwrap();
            patches.push(group_patches(&cloud, g, k, 0).unwrap());
            for c in 0..dim {
                image_vecs.set(i, c, rng.gen_range(-1.0..1.0));
                text_vecs.set(i, c, rng.gen_range(-1.0..1.0));
            }
            shape_ids.push(format!("s{i}"));
        }
        PreparedBatch { patches, image_vecs, text_vecs, shape_ids }
    }

    fn flatten_params(enc: &Encoder) -> Vec<(String, Vec<u64>)> {
        let mut out = Vec::new();
        enc.visit_params(&mut |meta, m| {
            out.push((meta.name.clone(), m.data.iter().map(|v| v.to_bits()).collect()));
        });
        out
    }

    #[test]
    fn lr_schedule_endpoints() {
        let s = sched(1e-3, 1000, 100);
        assert_eq!(lr_at(0, &s), 0.0);
        assert_eq!(lr_at(100, &s), 1e-3);
        assert!((lr_at(550, &s) - 5e-4).abs() < 1e-15);
        assert!(lr_at(1000, &s).abs() < 1e-15);
        let warm = lr_at(50, &s);
        assert!((warm - 5e-4).abs() < 1e-15);
        let no_warm = sched(2e-3, 10, 0);
        assert_eq!(lr_at(0, &no_warm), 2e-3);
    }

    #[test]
    fn loss_single_pair_is_zero() {
        let e = unit_mat(1, 8, 1);
        for mode in [LossMode::Both, LossMode::TextOnly, LossMode::ImageOnly] {
            let loss = contrastive_loss(&e, &e, &e, 0.07, mode).unwrap();
            assert!(loss.abs() < 1e-12, "{mode:?} gave {loss}");
        }
    }

    #[test]
    fn loss_two_orthogonal_closed_form() {
        let eye = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let expected = (1.0 + (-1.0f64).exp()).ln();
        for mode in [LossMode::Both, LossMode::TextOnly, LossMode::ImageOnly] {
            let loss = contrastive_loss(&eye, &eye, &eye, 1.0, mode).unwrap();
            assert!((loss - expected).abs() < 1e-12, "{mode:?} gave {loss}, want {expected}");
        }
    }

    #[test]
    fn loss_rejects_bad_inputs() {
        let e = unit_mat(2, 4, 2);
        assert!(contrastive_loss(&e, &e, &e, 0.0, LossMode::Both).is_err());
        assert!(contrastive_loss(&e, &e, &e, -1.0, LossMode::Both).is_err());
        let mut long = e.clone();
        long.set(0, 0, long.at(0, 0) + 0.1);
        assert!(contrastive_loss(&long, &e, &e, 0.07, LossMode::Both).is_err());
        let wide = unit_mat(2, 5, 3);
        assert!(contrastive_loss(&e, &wide, &e, 0.07, LossMode::Both).is_err());
        let tall = unit_mat(3, 4, 4);
        assert!(contrastive_loss(&e, &e, &tall, 0.07, LossMode::Both).is_err());
    }

    #[test]
    fn loss_permutation_invariant() {
        let n = 5;
        let e_p = unit_mat(n, 6, 5);
        let e_i = unit_mat(n, 6, 6);
        let e_t = unit_mat(n, 6, 7);
        let base = contrastive_loss(&e_p, &e_i, &e_t, 0.07, LossMode::Both).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let apply = |m: &Mat| {
            let mut out = Mat::zeros(n, 6);
            for (dst, &src) in perm.iter().enumerate() {
                for c in 0..6 {
                    out.set(dst, c, m.at(src, c));
                }
            }
            out
        };
        let shuffled =
            contrastive_loss(&apply(&e_p), &apply(&e_i), &apply(&e_t), 0.07, LossMode::Both)
                .unwrap();
        assert!((base - shuffled).abs() < 1e-12);
    }

    #[test]
    fn taped_loss_matches_direct_and_ignores_row_scale() {
        let n = 4;
        let d = 8;
        let mut rng = rng::derive(11, &[17]);
        let mut raw_p = Mat::zeros(n, d);
        for v in raw_p.data.iter_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let e_i = unit_mat(n, d, 21);
        let e_t = unit_mat(n, d, 22);
        let mut u_p = raw_p.clone();
        mat::unit_normalize_rows(&mut u_p);
        for mode in [LossMode::Both, LossMode::TextOnly, LossMode::ImageOnly] {
            let direct = contrastive_loss(&u_p, &e_i, &e_t, TAU_INIT, mode).unwrap();
            let build = |p: &Mat| {
                let mut tape = Tape::new();
                let pn = tape.constant(p.clone());
                let in_ = tape.constant(e_i.clone());
                let tn = tape.constant(e_t.clone());
                let lt = tape.leaf(Mat::from_vec(1, 1, vec![TAU_INIT.ln()]));
                let loss = contrastive_loss_taped(&mut tape, pn, in_, tn, lt, mode);
                tape.value(loss).data[0]
            };
            let taped = build(&raw_p);
            assert!((taped - direct).abs() < 1e-12, "{mode:?}: {taped} vs {direct}");
            let mut scaled = raw_p.clone();
            for c in 0..d {
                scaled.set(2, c, scaled.at(2, c) * 3.7);
            }
            assert!((build(&scaled) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn state_rejects_bad_rates() {
        let cfg = EncoderConfig::preset("nano").unwrap();
        let enc = Encoder::init(&cfg, 0).unwrap();
        let s = sched(1e-3, 10, 0);
        assert!(TrainState::new(enc.clone(), 0, LossMode::Both, 1.0, 0.0, s).is_err());
        assert!(TrainState::new(enc.clone(), 0, LossMode::Both, -0.1, 0.0, s).is_err());
        assert!(TrainState::new(enc, 0, LossMode::Both, 0.0, 1.0, s).is_err());
    }

    #[test]
    fn train_step_masks_and_reports() {
        let mut state = nano_state(3, 0.5, 0.1);
        let batch = synthetic_batch(3, 8, 4, 64, 30);
        let graph = build_step_graph(&state, &batch).unwrap();
        // ceil(0.5 * 8) = 4 kept patches + class token
        assert_eq!(graph.token_counts, vec![5, 5, 5]);

        let m = train_step(&mut state, &batch).unwrap();
        assert_eq!(m.step, 0);
        assert_eq!(state.step, 1);
        assert!(m.loss.is_finite() && m.loss > 0.0);
        assert_eq!(m.lr, lr_at(0, &state.schedule));
        assert!((m.tau - TAU_INIT).abs() < 1e-12);
        assert!(m.grad_norm > 0.0);
    }

    #[test]
    fn train_step_single_pair_leaves_weights() {
        let mut state = nano_state(5, 0.0, 0.0);
        let batch = synthetic_batch(1, 6, 3, 64, 31);
        let before = flatten_params(&state.encoder);
        let tau_before = state.log_tau;
        let m = train_step(&mut state, &batch).unwrap();
        assert!(m.loss.abs() < 1e-12);
        assert_eq!(m.grad_norm, 0.0);
        assert_eq!(flatten_params(&state.encoder), before);
        assert_eq!(state.log_tau, tau_before);
    }

    #[test]
    fn train_loss_decreases_on_fixed_batch() {
        // class-token pooling starts near-collapsed (shared token dominates),
        // so the fast-convergence check runs on mean pooling
        let mut cfg = EncoderConfig::preset("nano").unwrap();
        cfg.pooling = crate::encoder::Pooling::MeanPool;
        let enc = Encoder::init(&cfg, 9).unwrap();
        let mut state =
            TrainState::new(enc, 9, LossMode::Both, 0.0, 0.0, sched(3e-2, 150, 0)).unwrap();
        let batch = blob_batch(4, 256, 16, 8, 64, 32);
        let first = train_step(&mut state, &batch).unwrap().loss;
        let mut last = first;
        for _ in 1..150 {
            last = train_step(&mut state, &batch).unwrap().loss;
        }
        assert!(last < first * 0.25, "loss {first} -> {last} did not drop 4x");
        assert!(last < 0.1, "final loss {last} still high");
    }

    #[test]
    fn freeze_transformer_keeps_blocks_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = EncoderConfig::preset("nano").unwrap();
        let donor = Encoder::init(&cfg, 77).unwrap();
        let prior = dir.path().join("prior.u3dc");
        checkpoint::save_encoder(&prior, &donor, &[]).unwrap();

        let fresh = Encoder::init(&cfg, 78).unwrap();
        let enc = checkpoint::load_2d_prior(&prior, &fresh, true).unwrap();
        let mut state =
            TrainState::new(enc, 78, LossMode::Both, 0.0, 0.0, sched(1e-2, 10, 0)).unwrap();
        let frozen_names = |pairs: &[(String, Vec<u64>)]| -> Vec<(String, Vec<u64>)> {
            pairs
                .iter()
                .filter(|(n, _)| {
                    n.starts_with("blocks.") || n == "cls_token" || n.starts_with("norm.")
                })
                .cloned()
                .collect()
        };
        let before = flatten_params(&state.encoder);
        let batch = synthetic_batch(3, 6, 3, 64, 33);
        for _ in 0..3 {
            train_step(&mut state, &batch).unwrap();
        }
        let after = flatten_params(&state.encoder);
        assert_eq!(frozen_names(&before), frozen_names(&after));
        let tok_before = &before.iter().find(|(n, _)| n == "tokenizer.stage1.fc1.weight").unwrap().1;
        let tok_after = &after.iter().find(|(n, _)| n == "tokenizer.stage1.fc1.weight").unwrap().1;
        assert_ne!(tok_before, tok_after, "tokenizer should keep training");
    }

    #[test]
    fn train_step_aborts_on_poisoned_weights() {
        let mut state = nano_state(4, 0.0, 0.0);
        state.encoder.visit_params_mut(&mut |meta, m| {
            if meta.name == "blocks.0.attn.qkv.weight" {
                m.data[0] = f64::NAN;
            }
        });
        let batch = synthetic_batch(2, 6, 3, 64, 34);
        let err = train_step(&mut state, &batch).unwrap_err();
        assert!(err.to_string().contains("qkv"), "unexpected error: {err}");
        assert_eq!(state.step, 0);
    }

    #[test]
    fn grad_check_nano() {
        let state = nano_state(6, 0.25, 0.1);
        let batch = synthetic_batch(2, 6, 3, 64, 35);
        assert!(grad_check(&state, &batch, 0.0).is_err());
        let max_rel = grad_check(&state, &batch, 1e-5).unwrap();
        assert!(max_rel < 1e-3, "max relative error {max_rel}");

        // flat loss: a single pair has provably zero gradient everywhere
        let flat_state = nano_state(6, 0.0, 0.0);
        let flat_batch = synthetic_batch(1, 6, 3, 64, 37);
        let flat = grad_check(&flat_state, &flat_batch, 1e-5).unwrap();
        assert_eq!(flat, 0.0);
    }

    #[test]
    fn two_runs_bit_identical() {
        let batch = synthetic_batch(3, 8, 4, 64, 36);
        let run = || {
            let mut state = nano_state(12, 0.5, 0.1);
            let mut metrics = Vec::new();
            for _ in 0..3 {
                metrics.push(train_step(&mut state, &batch).unwrap());
            }
            (flatten_params(&state.encoder), state.log_tau.to_bits(), metrics)
        };
        let (p1, t1, m1) = run();
        let (p2, t2, m2) = run();
        assert_eq!(p1, p2);
        assert_eq!(t1, t2);
        for (a, b) in m1.iter().zip(&m2) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.grad_norm.to_bits(), b.grad_norm.to_bits());
        }
    }

    #[test]
    fn config_surface() {
        let json = r#"{
            "scale": "nano",
            "G": 8,
            "K": 4,
            "teacher_dim": 64,
            "batch_size": 2,
            "total_steps": 1000,
            "warmup_steps": null,
            "peak_lr": 0.001,
            "mask_ratio": 0.5,
            "drop_path_rate": 0.1,
            "loss_mode": "both",
            "seed": 7,
            "determinism": true,
            "manifest_path": "manifest.json",
            "init_checkpoint": null,
            "freeze_transformer": false
        }"#;
        let cfg: TrainConfig = serde_json::from_str(json).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.resolved_warmup(), 30);
        assert_eq!(cfg.g, 8);
        assert!(serde_json::from_str::<TrainConfig>(
            r#"{"scale":"nano","total_steps":1,"manifest_path":"m.json","bogus":1}"#
        )
        .is_err());
        let frozen: TrainConfig = serde_json::from_str(
            r#"{"scale":"nano","total_steps":1,"manifest_path":"m.json","freeze_transformer":true}"#,
        )
        .unwrap();
        assert!(frozen.validate().is_err(), "freeze without prior should fail validation");
        let minimal: TrainConfig =
            serde_json::from_str(r#"{"scale":"nano","total_steps":10,"manifest_path":"m.json"}"#)
                .unwrap();
        assert_eq!(minimal.g, 64);
        assert_eq!(minimal.k, 32);
        assert_eq!(minimal.mask_ratio, 0.5);
        assert_eq!(minimal.loss_mode, LossMode::Both);
        assert!(minimal.determinism);
    }

    #[test]
    fn run_training_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synthetic_manifest(dir.path(), 4, 2, 64, 48, 55);
        let cfg = TrainConfig {
            scale: "nano".to_string(),
            g: 8,
            k: 4,
            teacher_dim: None,
            batch_size: 2,
            total_steps: 3,
            warmup_steps: Some(1),
            peak_lr: 1e-3,
            mask_ratio: 0.5,
            drop_path_rate: 0.1,
            loss_mode: LossMode::Both,
            seed: 55,
            determinism: true,
            manifest_path: manifest,
            init_checkpoint: None,
            freeze_transformer: false,
        };
        let out = dir.path().join("run");
        let summary = run_training(&cfg, &out).unwrap();
        assert_eq!(summary.steps, 3);
        assert!(summary.final_loss.is_finite());

        let lines: Vec<String> = std::fs::read_to_string(&summary.metrics)
            .unwrap()
            .lines()
            .map(str::to_string)
            .collect();
        assert_eq!(lines.len(), 3);
        for (i, line) in lines.iter().enumerate() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["step"], i);
            assert!(v["loss"].as_f64().unwrap().is_finite());
        }

        let enc_cfg = cfg.encoder_config().unwrap();
        let (enc, extras) = checkpoint::load_encoder(&summary.checkpoint, &enc_cfg).unwrap();
        assert_eq!(enc.num_params(), enc_cfg.count_params().unwrap());
        assert!(extras.contains_key("log_tau"));

        let card: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&summary.model_card).unwrap()).unwrap();
        assert_eq!(card["scale"], "nano");
        assert_eq!(card["total_steps"], 3);
    }
}

