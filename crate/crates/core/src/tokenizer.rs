//! Point-cloud tokenization: FPS centers, kNN patches, and a small shared
//! two-stage point network that turns each patch into one token.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn, PointCloud};
use crate::mat::Mat;
use rand_chacha::ChaCha8Rng;

/// A cloud grouped into G patches of exactly K members each.
///
/// Member 0 of every patch is the center itself, so its local coordinate is
/// the zero vector.
#[derive(Debug, Clone)]
pub struct PatchSet {
    /// [G, 3] center positions.
    pub centers: Mat,
    /// [G*K, 3] neighbor positions minus the patch center, patch-major.
    pub local_coords: Mat,
    /// [G*K, 3] neighbor colors, copied unshifted.
    pub local_colors: Mat,
    /// Cloud indices of the G centers.
    pub center_indices: Vec<usize>,
    /// Cloud indices of all members, [G*K], aligned with local rows.
    pub member_indices: Vec<usize>,
    pub g: usize,
    pub k: usize,
}

/// FPS centers + recentred kNN neighborhoods.
pub fn group_patches(cloud: &PointCloud, g: usize, k: usize, start_index: usize) -> Result<PatchSet> {
    let n = cloud.len();
    if g == 0 || g > n {
        return Err(Error::invalid(format!("patch count G={g} outside 1..={n}")));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("patch size K={k} outside 1..={n}")));
    }
    let center_indices = farthest_point_sample(&cloud.positions, g, start_index)?;
    let queries: Vec<f64> = center_indices
        .iter()
        .flat_map(|&i| cloud.position(i))
        .collect();
    let neighbors = knn(&cloud.positions, &queries, k)?;

    let mut centers = Mat::zeros(g, 3);
    let mut local_coords = Mat::zeros(g * k, 3);
    let mut local_colors = Mat::zeros(g * k, 3);
    let mut member_indices = Vec::with_capacity(g * k);
    for (gi, &ci) in center_indices.iter().enumerate() {
        let c = cloud.position(ci);
        centers.row_mut(gi).copy_from_slice(&c);
        // Force the center into slot 0: coincident duplicates can win the
        // zero-distance tie by index, but the patch must carry its own center.
        let mut members = Vec::with_capacity(k);
        members.push(ci);
        for &ni in &neighbors[gi] {
            if ni != ci && members.len() < k {
                members.push(ni);
            }
        }
        for (mi, &pi) in members.iter().enumerate() {
            let p = cloud.position(pi);
            let row = local_coords.row_mut(gi * k + mi);
            row[0] = p[0] - c[0];
            row[1] = p[1] - c[1];
            row[2] = p[2] - c[2];
            local_colors.row_mut(gi * k + mi).copy_from_slice(&cloud.color(pi));
            member_indices.push(pi);
        }
    }
    Ok(PatchSet { centers, local_coords, local_colors, center_indices, member_indices, g, k })
}

/// The tokenizer's learnable tensors: a two-stage shared point MLP
/// (6→D₁→D₁, then after pool-concat (2·D₁)→D₂→width) and the positional
/// MLP over centers (3→P₁→width). GELU between the linears of each pair.
#[derive(Debug, Clone)]
pub struct TokenizerWeights {
    pub s1_w1: Mat,
    pub s1_b1: Mat,
    pub s1_w2: Mat,
    pub s1_b2: Mat,
    pub s2_w1: Mat,
    pub s2_b1: Mat,
    pub s2_w2: Mat,
    pub s2_b2: Mat,
    pub pos_w1: Mat,
    pub pos_b1: Mat,
    pub pos_w2: Mat,
    pub pos_b2: Mat,
}

impl TokenizerWeights {
    pub fn zeros(d1: usize, d2: usize, p1: usize, width: usize) -> Self {
        TokenizerWeights {
            s1_w1: Mat::zeros(6, d1),
            s1_b1: Mat::zeros(1, d1),
            s1_w2: Mat::zeros(d1, d1),
            s1_b2: Mat::zeros(1, d1),
            s2_w1: Mat::zeros(2 * d1, d2),
            s2_b1: Mat::zeros(1, d2),
            s2_w2: Mat::zeros(d2, width),
            s2_b2: Mat::zeros(1, width),
            pos_w1: Mat::zeros(3, p1),
            pos_b1: Mat::zeros(1, p1),
            pos_w2: Mat::zeros(p1, width),
            pos_b2: Mat::zeros(1, width),
        }
    }

    pub fn init(d1: usize, d2: usize, p1: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut w = TokenizerWeights::zeros(d1, d2, p1, width);
        for m in [&mut w.s1_w1, &mut w.s1_w2, &mut w.s2_w1, &mut w.s2_w2, &mut w.pos_w1, &mut w.pos_w2] {
            for v in &mut m.data {
                *v = crate::rng::trunc_normal(rng, 0.02);
            }
        }
        w
    }
}

/// Tape node ids for staged tokenizer weights, in the same field order.
#[derive(Debug, Clone, Copy)]
pub struct TokenizerNodes {
    pub s1_w1: NodeId,
    pub s1_b1: NodeId,
    pub s1_w2: NodeId,
    pub s1_b2: NodeId,
    pub s2_w1: NodeId,
    pub s2_b1: NodeId,
    pub s2_w2: NodeId,
    pub s2_b2: NodeId,
    pub pos_w1: NodeId,
    pub pos_b1: NodeId,
    pub pos_w2: NodeId,
    pub pos_b2: NodeId,
}

/// Taped patch embedding over [G*K, 3] coord and color nodes.
///
/// Stage 1 runs per point, a patch-wise max-pool is concatenated back onto
/// each point feature (point feature first, pooled second), stage 2 runs per
/// point again, and a final max-pool yields one row per patch.
pub fn embed_patches_taped(
    tape: &mut Tape,
    w: &TokenizerNodes,
    coords: NodeId,
    colors: NodeId,
    k: usize,
) -> NodeId {
    let x6 = tape.concat_cols(&[coords, colors]);
    let h = tape.linear(x6, w.s1_w1, Some(w.s1_b1));
    let h = tape.gelu(h);
    let h = tape.linear(h, w.s1_w2, Some(w.s1_b2));
    let pooled = tape.pool_groups(h, k);
    let rep = tape.repeat_rows(pooled, k);
    let cat = tape.concat_cols(&[h, rep]);
    let h2 = tape.linear(cat, w.s2_w1, Some(w.s2_b1));
    let h2 = tape.gelu(h2);
    let h2 = tape.linear(h2, w.s2_w2, Some(w.s2_b2));
    tape.pool_groups(h2, k)
}

/// Taped positional embedding of [G, 3] centers.
pub fn positional_embed_taped(tape: &mut Tape, w: &TokenizerNodes, centers: NodeId) -> NodeId {
    let h = tape.linear(centers, w.pos_w1, Some(w.pos_b1));
    let h = tape.gelu(h);
    tape.linear(h, w.pos_w2, Some(w.pos_b2))
}

fn stage_const(tape: &mut Tape, w: &TokenizerWeights) -> TokenizerNodes {
    TokenizerNodes {
        s1_w1: tape.constant(w.s1_w1.clone()),
        s1_b1: tape.constant(w.s1_b1.clone()),
        s1_w2: tape.constant(w.s1_w2.clone()),
        s1_b2: tape.constant(w.s1_b2.clone()),
        s2_w1: tape.constant(w.s2_w1.clone()),
        s2_b1: tape.constant(w.s2_b1.clone()),
        s2_w2: tape.constant(w.s2_w2.clone()),
        s2_b2: tape.constant(w.s2_b2.clone()),
        pos_w1: tape.constant(w.pos_w1.clone()),
        pos_b1: tape.constant(w.pos_b1.clone()),
        pos_w2: tape.constant(w.pos_w2.clone()),
        pos_b2: tape.constant(w.pos_b2.clone()),
    }
}

/// Evaluate tokens for a whole patch set: [G, width].
pub fn embed_patches(patches: &PatchSet, w: &TokenizerWeights) -> Result<Mat> {
    if w.s1_w1.rows != 6 {
        return Err(Error::shape(format!("stage-1 weight expects 6 inputs, has {}", w.s1_w1.rows)));
    }
    let mut tape = Tape::new();
    let nodes = stage_const(&mut tape, w);
    let coords = tape.constant(patches.local_coords.clone());
    let colors = tape.constant(patches.local_colors.clone());
    let out = embed_patches_taped(&mut tape, &nodes, coords, colors, patches.k);
    let tokens = tape.value(out).clone();
    tokens.ensure_finite("patch tokens")?;
    Ok(tokens)
}

/// Evaluate positional embeddings for [G, 3] centers: [G, width].
pub fn positional_embed(centers: &Mat, w: &TokenizerWeights) -> Result<Mat> {
    if centers.cols != 3 {
        return Err(Error::shape(format!("centers must be Gx3, got {}x{}", centers.rows, centers.cols)));
    }
    let mut tape = Tape::new();
    let nodes = stage_const(&mut tape, w);
    let c = tape.constant(centers.clone());
    let out = positional_embed_taped(&mut tape, &nodes, c);
    let emb = tape.value(out).clone();
    emb.ensure_finite("positional embedding")?;
    Ok(emb)
}
