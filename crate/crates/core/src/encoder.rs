//! The transformer encoder over patch tokens: scaling ladder, parameter
//! accounting, forward pass (shared between training and eval via the tape),
//! and weight visitation used by the optimizer and checkpoint io.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::tokenizer::{
    embed_patches_taped, positional_embed_taped, PatchSet, TokenizerNodes, TokenizerWeights,
};
use serde::{Deserialize, Serialize};

/// How the per-token features collapse into one global feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    ClassToken,
    MeanPool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// Hidden width of the per-block MLP.
    pub mlp_hidden: usize,
    /// Dimension of the frozen teacher embeddings the encoder projects into.
    pub teacher_dim: usize,
    /// Tokenizer stage-1 width.
    pub d1: usize,
    /// Tokenizer stage-2 hidden width.
    pub d2: usize,
    /// Positional MLP hidden width.
    pub p1: usize,
    #[serde(default)]
    pub pooling: Pooling,
}

impl EncoderConfig {
    /// Named points on the scaling ladder. `nano` is a test-size config for
    /// fast end-to-end runs; the lettered scales follow the published ladder.
    pub fn preset(name: &str) -> Result<EncoderConfig> {
        let (depth, width, heads, mlp_hidden) = match name {
            "Ti" => (12, 192, 3, 768),
            "S" => (12, 384, 6, 1536),
            "B" => (12, 768, 12, 3072),
            "L" => (24, 1024, 16, 4096),
            "g" => (40, 1408, 16, 6144),
            "nano" => {
                return Ok(EncoderConfig {
                    depth: 2,
                    width: 32,
                    heads: 2,
                    mlp_hidden: 128,
                    teacher_dim: 64,
                    d1: 16,
                    d2: 32,
                    p1: 16,
                    pooling: Pooling::ClassToken,
                })
            }
            other => return Err(Error::invalid(format!("unknown encoder scale '{other}'"))),
        };
        Ok(EncoderConfig {
            depth,
            width,
            heads,
            mlp_hidden,
            teacher_dim: 1024,
            d1: 256,
            d2: 512,
            p1: 128,
            pooling: Pooling::ClassToken,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("encoder depth must be at least 1"));
        }
        for (what, v) in [
            ("width", self.width),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("teacher_dim", self.teacher_dim),
            ("d1", self.d1),
            ("d2", self.d2),
            ("p1", self.p1),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("encoder {what} must be positive")));
            }
        }
        if self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    /// Analytic scalar count for this config; no allocation.
    pub fn count_params(&self) -> Result<usize> {
        self.validate()?;
        let (w, h) = (self.width, self.mlp_hidden);
        let tokenizer = (6 * self.d1 + self.d1)
            + (self.d1 * self.d1 + self.d1)
            + (2 * self.d1 * self.d2 + self.d2)
            + (self.d2 * w + w);
        let pos = (3 * self.p1 + self.p1) + (self.p1 * w + w);
        let block = (w * 3 * w + 3 * w) + (w * w + w) + 4 * w + (w * h + h) + (h * w + w);
        Ok(tokenizer + pos + w + self.depth * block + 2 * w + w * self.teacher_dim)
    }
}

/// Which kind of tensor a parameter is; grad-check samples across all roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Tokenizer,
    Positional,
    ClassToken,
    Qkv,
    AttnProj,
    Norm,
    Mlp,
    FinalNorm,
    Projection,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub norm1_w: Mat,
    pub norm1_b: Mat,
    pub qkv_w: Mat,
    pub qkv_b: Mat,
    pub proj_w: Mat,
    pub proj_b: Mat,
    pub norm2_w: Mat,
    pub norm2_b: Mat,
    pub fc1_w: Mat,
    pub fc1_b: Mat,
    pub fc2_w: Mat,
    pub fc2_b: Mat,
}

impl Block {
    fn alloc(w: usize, h: usize) -> Block {
        Block {
            norm1_w: Mat::zeros(1, w),
            norm1_b: Mat::zeros(1, w),
            qkv_w: Mat::zeros(w, 3 * w),
            qkv_b: Mat::zeros(1, 3 * w),
            proj_w: Mat::zeros(w, w),
            proj_b: Mat::zeros(1, w),
            norm2_w: Mat::zeros(1, w),
            norm2_b: Mat::zeros(1, w),
            fc1_w: Mat::zeros(w, h),
            fc1_b: Mat::zeros(1, h),
            fc2_w: Mat::zeros(h, w),
            fc2_b: Mat::zeros(1, w),
        }
    }
}

/// Which tensors are excluded from optimizer updates. The 2D-prior loader
/// freezes exactly the set it loads: all blocks, the class token, and the
/// final norm.
#[derive(Debug, Clone, Default)]
pub struct FrozenFlags {
    pub blocks: Vec<bool>,
    pub core: bool,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub tok: TokenizerWeights,
    /// [1, width] learnable class token.
    pub cls: Mat,
    pub blocks: Vec<Block>,
    pub norm_w: Mat,
    pub norm_b: Mat,
    /// [width, teacher_dim] bias-free projection.
    pub proj: Mat,
    pub frozen: FrozenFlags,
}

impl Encoder {
    /// Fresh weights: truncated-normal std 0.02 for linear weights and the
    /// class token, zeros for biases, ones for norm scales.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Encoder> {
        config.validate()?;
        let mut enc = Encoder::zeros(config)?;
        let mut rng = crate::rng::derive(seed, &[crate::rng::tag::INIT]);
        enc.visit_params_mut(&mut |meta: &ParamMeta, m: &mut Mat| {
            if meta.name.ends_with(".bias") {
                // already zero
            } else if matches!(meta.role, Role::Norm | Role::FinalNorm) {
                let fill = if meta.name.ends_with(".weight") && !meta.name.contains(".bias") {
                    1.0
                } else {
                    0.0
                };
                for v in &mut m.data {
                    *v = fill;
                }
            } else {
                for v in &mut m.data {
                    *v = crate::rng::trunc_normal(&mut rng, 0.02);
                }
            }
        });
        Ok(enc)
    }

    pub fn zeros(config: &EncoderConfig) -> Result<Encoder> {
        config.validate()?;
        let (w, h) = (config.width, config.mlp_hidden);
        Ok(Encoder {
            config: config.clone(),
            tok: TokenizerWeights::zeros(config.d1, config.d2, config.p1, w),
            cls: Mat::zeros(1, w),
            blocks: (0..config.depth).map(|_| Block::alloc(w, h)).collect(),
            norm_w: Mat::zeros(1, w),
            norm_b: Mat::zeros(1, w),
            proj: Mat::zeros(w, config.teacher_dim),
            frozen: FrozenFlags { blocks: vec![false; config.depth], core: false },
        })
    }

    pub fn num_params(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, m| total += m.len());
        total
    }

    /// Visit every tensor in canonical order. This single order defines the
    /// checkpoint layout, optimizer-state keys, and tape staging.
    pub fn visit_params(&self, f: &mut dyn FnMut(&ParamMeta, &Mat)) {
        let frozen = &self.frozen;
        let mut visit = |name: String, role: Role, trainable: bool, m: &Mat| {
            f(&ParamMeta { name, role, trainable }, m)
        };
        let t = &self.tok;
        for (name, m) in [
            ("tokenizer.stage1.fc1.weight", &t.s1_w1),
            ("tokenizer.stage1.fc1.bias", &t.s1_b1),
            ("tokenizer.stage1.fc2.weight", &t.s1_w2),
            ("tokenizer.stage1.fc2.bias", &t.s1_b2),
            ("tokenizer.stage2.fc1.weight", &t.s2_w1),
            ("tokenizer.stage2.fc1.bias", &t.s2_b1),
            ("tokenizer.stage2.fc2.weight", &t.s2_w2),
            ("tokenizer.stage2.fc2.bias", &t.s2_b2),
        ] {
            visit(name.to_string(), Role::Tokenizer, true, m);
        }
        for (name, m) in [
            ("pos.fc1.weight", &t.pos_w1),
            ("pos.fc1.bias", &t.pos_b1),
            ("pos.fc2.weight", &t.pos_w2),
            ("pos.fc2.bias", &t.pos_b2),
        ] {
            visit(name.to_string(), Role::Positional, true, m);
        }
        visit("cls_token".to_string(), Role::ClassToken, !frozen.core, &self.cls);
        for (i, b) in self.blocks.iter().enumerate() {
            let tr = !frozen.blocks[i];
            for (suffix, role, m) in [
                ("norm1.weight", Role::Norm, &b.norm1_w),
                ("norm1.bias", Role::Norm, &b.norm1_b),
                ("attn.qkv.weight", Role::Qkv, &b.qkv_w),
                ("attn.qkv.bias", Role::Qkv, &b.qkv_b),
                ("attn.proj.weight", Role::AttnProj, &b.proj_w),
                ("attn.proj.bias", Role::AttnProj, &b.proj_b),
                ("norm2.weight", Role::Norm, &b.norm2_w),
                ("norm2.bias", Role::Norm, &b.norm2_b),
                ("mlp.fc1.weight", Role::Mlp, &b.fc1_w),
                ("mlp.fc1.bias", Role::Mlp, &b.fc1_b),
                ("mlp.fc2.weight", Role::Mlp, &b.fc2_w),
                ("mlp.fc2.bias", Role::Mlp, &b.fc2_b),
            ] {
                visit(format!("blocks.{i}.{suffix}"), role, tr, m);
            }
        }
        visit("norm.weight".to_string(), Role::FinalNorm, !frozen.core, &self.norm_w);
        visit("norm.bias".to_string(), Role::FinalNorm, !frozen.core, &self.norm_b);
        visit("proj.weight".to_string(), Role::Projection, true, &self.proj);
    }

    /// Mutable visitation in the same canonical order as `visit_params`.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&ParamMeta, &mut Mat)) {
        let frozen = self.frozen.clone();
        let mut visit = |name: String, role: Role, trainable: bool, m: &mut Mat| {
            f(&ParamMeta { name, role, trainable }, m)
        };
        let t = &mut self.tok;
        for (name, m) in [
            ("tokenizer.stage1.fc1.weight", &mut t.s1_w1),
            ("tokenizer.stage1.fc1.bias", &mut t.s1_b1),
            ("tokenizer.stage1.fc2.weight", &mut t.s1_w2),
            ("tokenizer.stage1.fc2.bias", &mut t.s1_b2),
            ("tokenizer.stage2.fc1.weight", &mut t.s2_w1),
            ("tokenizer.stage2.fc1.bias", &mut t.s2_b1),
            ("tokenizer.stage2.fc2.weight", &mut t.s2_w2),
            ("tokenizer.stage2.fc2.bias", &mut t.s2_b2),
        ] {
            visit(name.to_string(), Role::Tokenizer, true, m);
        }
        for (name, m) in [
            ("pos.fc1.weight", &mut t.pos_w1),
            ("pos.fc1.bias", &mut t.pos_b1),
            ("pos.fc2.weight", &mut t.pos_w2),
            ("pos.fc2.bias", &mut t.pos_b2),
        ] {
            visit(name.to_string(), Role::Positional, true, m);
        }
        visit("cls_token".to_string(), Role::ClassToken, !frozen.core, &mut self.cls);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let tr = !frozen.blocks[i];
            for (suffix, role, m) in [
                ("norm1.weight", Role::Norm, &mut b.norm1_w),
                ("norm1.bias", Role::Norm, &mut b.norm1_b),
                ("attn.qkv.weight", Role::Qkv, &mut b.qkv_w),
                ("attn.qkv.bias", Role::Qkv, &mut b.qkv_b),
                ("attn.proj.weight", Role::AttnProj, &mut b.proj_w),
                ("attn.proj.bias", Role::AttnProj, &mut b.proj_b),
                ("norm2.weight", Role::Norm, &mut b.norm2_w),
                ("norm2.bias", Role::Norm, &mut b.norm2_b),
                ("mlp.fc1.weight", Role::Mlp, &mut b.fc1_w),
                ("mlp.fc1.bias", Role::Mlp, &mut b.fc1_b),
                ("mlp.fc2.weight", Role::Mlp, &mut b.fc2_w),
                ("mlp.fc2.bias", Role::Mlp, &mut b.fc2_b),
            ] {
                visit(format!("blocks.{i}.{suffix}"), role, tr, m);
            }
        }
        visit("norm.weight".to_string(), Role::FinalNorm, !frozen.core, &mut self.norm_w);
        visit("norm.bias".to_string(), Role::FinalNorm, !frozen.core, &mut self.norm_b);
        visit("proj.weight".to_string(), Role::Projection, true, &mut self.proj);
    }

    pub fn ensure_finite(&self) -> Result<()> {
        let mut bad: Option<String> = None;
        self.visit_params(&mut |meta, m| {
            if bad.is_none() && !m.is_finite() {
                bad = Some(meta.name.clone());
            }
        });
        match bad {
            Some(name) => Err(Error::non_finite(format!("encoder tensor '{name}'"))),
            None => Ok(()),
        }
    }

    /// Push every tensor onto a tape. Trainable tensors become gradient
    /// leaves when `training` is set; everything else becomes a constant.
    pub fn stage(&self, tape: &mut Tape, training: bool) -> StagedEncoder {
        let mut list: Vec<(ParamMeta, NodeId)> = Vec::new();
        self.visit_params(&mut |meta, m| {
            let id = if training && meta.trainable {
                tape.leaf(m.clone())
            } else {
                tape.constant(m.clone())
            };
            list.push((meta.clone(), id));
        });
        // the canonical order fixes every position below
        let mut cur = 0usize;
        let mut next = || {
            let id = list[cur].1;
            cur += 1;
            id
        };
        let tok = TokenizerNodes {
            s1_w1: next(),
            s1_b1: next(),
            s1_w2: next(),
            s1_b2: next(),
            s2_w1: next(),
            s2_b1: next(),
            s2_w2: next(),
            s2_b2: next(),
            pos_w1: next(),
            pos_b1: next(),
            pos_w2: next(),
            pos_b2: next(),
        };
        let cls = next();
        let blocks: Vec<BlockNodes> = (0..self.config.depth)
            .map(|_| BlockNodes {
                norm1_w: next(),
                norm1_b: next(),
                qkv_w: next(),
                qkv_b: next(),
                proj_w: next(),
                proj_b: next(),
                norm2_w: next(),
                norm2_b: next(),
                fc1_w: next(),
                fc1_b: next(),
                fc2_w: next(),
                fc2_b: next(),
            })
            .collect();
        let norm_w = next();
        let norm_b = next();
        let proj = next();
        assert_eq!(cur, list.len(), "staging order out of sync with visitation");
        StagedEncoder { tok, cls, blocks, norm_w, norm_b, proj, params: list }
    }

    /// Eval-mode forward: no mask unless given, no stochastic depth.
    pub fn forward(
        &self,
        patches: &PatchSet,
        keep_mask: Option<&[bool]>,
        tap_layers: &[usize],
    ) -> Result<(Vec<f64>, LayerFeatures)> {
        self.ensure_finite()?;
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false);
        let out = build_forward(
            &mut tape,
            &self.config,
            &staged,
            patches,
            &ForwardOptions { keep_mask, colors_override: None, branch_scales: None, tap_layers },
        )?;
        let embedding = tape.value(out.embedding).row(0).to_vec();
        let taps = out
            .taps
            .iter()
            .map(|&(layer, id)| (layer, tape.value(id).clone()))
            .collect();
        Ok((embedding, LayerFeatures { taps, kept: out.kept }))
    }
}

#[derive(Debug, Clone)]
pub struct ParamMeta {
    pub name: String,
    pub role: Role,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockNodes {
    pub norm1_w: NodeId,
    pub norm1_b: NodeId,
    pub qkv_w: NodeId,
    pub qkv_b: NodeId,
    pub proj_w: NodeId,
    pub proj_b: NodeId,
    pub norm2_w: NodeId,
    pub norm2_b: NodeId,
    pub fc1_w: NodeId,
    pub fc1_b: NodeId,
    pub fc2_w: NodeId,
    pub fc2_b: NodeId,
}

/// All encoder tensors staged on a tape, plus the flat (meta, node) list in
/// canonical order for gradient collection.
pub struct StagedEncoder {
    pub tok: TokenizerNodes,
    pub cls: NodeId,
    pub blocks: Vec<BlockNodes>,
    pub norm_w: NodeId,
    pub norm_b: NodeId,
    pub proj: NodeId,
    pub params: Vec<(ParamMeta, NodeId)>,
}

/// Per-token features recorded after requested blocks (1-based indices).
/// Row 0 is the class token; rows 1.. follow kept-patch order.
#[derive(Debug, Clone)]
pub struct LayerFeatures {
    pub taps: Vec<(usize, Mat)>,
    /// Original patch indices that survived the keep mask.
    pub kept: Vec<usize>,
}

pub struct ForwardOptions<'a> {
    pub keep_mask: Option<&'a [bool]>,
    /// Replaces the patch-color constant with an existing tape node of shape
    /// [G*K, 3]; used by painting. Requires `keep_mask == None`.
    pub colors_override: Option<NodeId>,
    /// Per-block (attention, mlp) residual-branch multipliers for stochastic
    /// depth; `None` means 1.0 everywhere.
    pub branch_scales: Option<&'a [(f64, f64)]>,
    pub tap_layers: &'a [usize],
}

pub struct ForwardNodes {
    /// [1, teacher_dim] raw (un-normalized) embedding node.
    pub embedding: NodeId,
    pub taps: Vec<(usize, NodeId)>,
    /// Attention probability nodes, one per (block, head).
    pub attn_probs: Vec<NodeId>,
    pub kept: Vec<usize>,
    /// Token count seen by the transformer (kept patches + class token).
    pub token_count: usize,
}

/// Build the full forward graph on `tape`. Shared verbatim by training,
/// eval, gradient checking, and painting so the computation can never drift
/// between paths.
pub fn build_forward(
    tape: &mut Tape,
    config: &EncoderConfig,
    staged: &StagedEncoder,
    patches: &PatchSet,
    opts: &ForwardOptions,
) -> Result<ForwardNodes> {
    let g = patches.g;
    let k = patches.k;
    let kept: Vec<usize> = match opts.keep_mask {
        Some(mask) => {
            if mask.len() != g {
                return Err(Error::shape(format!("keep mask has {} entries for G={g}", mask.len())));
            }
            let kept: Vec<usize> = (0..g).filter(|&i| mask[i]).collect();
            if kept.is_empty() {
                return Err(Error::invalid("keep mask drops every token"));
            }
            kept
        }
        None => (0..g).collect(),
    };
    if opts.colors_override.is_some() && opts.keep_mask.is_some() {
        return Err(Error::invalid("colors_override cannot be combined with a keep mask"));
    }
    for &t in opts.tap_layers {
        if t == 0 || t > config.depth {
            return Err(Error::invalid(format!("tap layer {t} outside 1..={}", config.depth)));
        }
    }

    // Masked patches are never materialized: the tokenizer only sees rows of
    // the kept patches.
    let (coords, colors) = if kept.len() == g {
        let coords = tape.constant(patches.local_coords.clone());
        let colors = match opts.colors_override {
            Some(id) => {
                let v = tape.value(id);
                if (v.rows, v.cols) != (g * k, 3) {
                    return Err(Error::shape(format!(
                        "colors override is {}x{}, want {}x3",
                        v.rows,
                        v.cols,
                        g * k
                    )));
                }
                id
            }
            None => tape.constant(patches.local_colors.clone()),
        };
        (coords, colors)
    } else {
        let mut coords = Mat::zeros(kept.len() * k, 3);
        let mut colors = Mat::zeros(kept.len() * k, 3);
        for (row, &gi) in kept.iter().enumerate() {
            for mi in 0..k {
                coords.row_mut(row * k + mi).copy_from_slice(patches.local_coords.row(gi * k + mi));
                colors.row_mut(row * k + mi).copy_from_slice(patches.local_colors.row(gi * k + mi));
            }
        }
        (tape.constant(coords), tape.constant(colors))
    };
    let centers = if kept.len() == g {
        patches.centers.clone()
    } else {
        let mut c = Mat::zeros(kept.len(), 3);
        for (row, &gi) in kept.iter().enumerate() {
            c.row_mut(row).copy_from_slice(patches.centers.row(gi));
        }
        c
    };
    let centers = tape.constant(centers);

    let tokens = embed_patches_taped(tape, &staged.tok, coords, colors, k);
    let pos = positional_embed_taped(tape, &staged.tok, centers);
    let tokens = tape.add(tokens, pos);
    let mut x = tape.concat_rows(&[staged.cls, tokens]);
    let n_tokens = kept.len() + 1;

    let head_dim = config.width / config.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut taps = Vec::new();
    let mut attn_probs = Vec::new();
    for (bi, b) in staged.blocks.iter().enumerate() {
        let (s_attn, s_mlp) = opts.branch_scales.map_or((1.0, 1.0), |s| s[bi]);

        let t1 = tape.layer_norm(x, b.norm1_w, b.norm1_b);
        let qkv = tape.linear(t1, b.qkv_w, Some(b.qkv_b));
        let mut head_outs = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let q = tape.slice_cols(qkv, h * head_dim, head_dim);
            let kk = tape.slice_cols(qkv, config.width + h * head_dim, head_dim);
            let v = tape.slice_cols(qkv, 2 * config.width + h * head_dim, head_dim);
            let logits = tape.matmul_nt(q, kk);
            let logits = tape.scale(logits, scale);
            let probs = tape.softmax_rows(logits);
            attn_probs.push(probs);
            head_outs.push(tape.matmul(probs, v));
        }
        let merged = tape.concat_cols(&head_outs);
        let attn_out = tape.linear(merged, b.proj_w, Some(b.proj_b));
        let attn_out = if s_attn != 1.0 { tape.scale(attn_out, s_attn) } else { attn_out };
        x = tape.add(x, attn_out);

        let t2 = tape.layer_norm(x, b.norm2_w, b.norm2_b);
        let m = tape.linear(t2, b.fc1_w, Some(b.fc1_b));
        let m = tape.gelu(m);
        let m = tape.linear(m, b.fc2_w, Some(b.fc2_b));
        let m = if s_mlp != 1.0 { tape.scale(m, s_mlp) } else { m };
        x = tape.add(x, m);

        if opts.tap_layers.contains(&(bi + 1)) {
            // patch tokens only: the class token is not a spatial feature
            let patch_rows = tape.slice_rows(x, 1, n_tokens - 1);
            taps.push((bi + 1, patch_rows));
        }
    }

    let normed = tape.layer_norm(x, staged.norm_w, staged.norm_b);
    let pooled = match config.pooling {
        Pooling::ClassToken => tape.slice_rows(normed, 0, 1),
        Pooling::MeanPool => {
            let patch_rows = tape.slice_rows(normed, 1, n_tokens - 1);
            let avg = Mat::from_vec(1, n_tokens - 1, vec![1.0 / (n_tokens - 1) as f64; n_tokens - 1]);
            let avg = tape.constant(avg);
            tape.matmul(avg, patch_rows)
        }
    };
    let embedding = tape.linear(pooled, staged.proj, None);
    Ok(ForwardNodes { embedding, taps, attn_probs, kept, token_count: n_tokens })
}
