//! Reverse-mode autodiff on a flat tape of matrix ops.
//!
//! Values are computed eagerly as nodes are pushed; `backward` walks the tape
//! in reverse. The op set is exactly what the encoder, contrastive loss,
//! segmentation head, and painting objective need — nothing speculative.
//! Every kernel visits data in a fixed order, so gradients are bit-stable.

use crate::mat::{self, Mat};

pub type NodeId = usize;

/// LayerNorm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId },
    /// Elementwise product.
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    /// Every entry of `x` multiplied by the 1x1 node `s`.
    MulScalarNode { x: NodeId, s: NodeId },
    /// y = x·W (+ b broadcast over rows). W is [in, out], b is [1, out].
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    MatMul { a: NodeId, b: NodeId },
    /// y = a·bᵀ.
    MatMulNT { a: NodeId, b: NodeId },
    Exp { x: NodeId },
    Gelu { x: NodeId },
    /// Row-wise layer norm; gamma/beta are [1, d].
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    SoftmaxRows { x: NodeId },
    /// Rows scaled to unit L2 norm; zero rows stay zero.
    UnitRows { x: NodeId },
    /// Max over each consecutive group of k rows; argmax rows cached.
    PoolGroups { x: NodeId, argmax: Vec<usize> },
    /// Each row repeated k times.
    RepeatRows { x: NodeId, k: usize },
    ConcatCols { xs: Vec<NodeId> },
    ConcatRows { xs: Vec<NodeId> },
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    Transpose { x: NodeId },
    /// y[i] = x[indices[i]]; backward scatter-adds.
    GatherRows { x: NodeId, indices: Vec<usize> },
    /// 1x1 sum of all entries.
    SumAll { x: NodeId },
    /// 1x1 mean over rows i of cross-entropy(softmax(row i), label=i).
    CeDiagRows { logits: NodeId },
    /// Same with explicit labels.
    CeLabelRows { logits: NodeId, labels: Vec<usize> },
}

struct Node {
    op: Op,
    value: Mat,
    needs_grad: bool,
}

/// Gradients per node after a backward pass.
pub struct Grads {
    by_node: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Mat> {
        self.by_node.get_mut(id).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Mat, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        self.nodes.len() - 1
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Trainable input (parameters, or inputs optimized directly such as
    /// paint colors).
    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "add shape mismatch");
        let mut v = va.clone();
        v.add_in_place(vb);
        let g = self.any_grad(&[a, b]);
        self.push(Op::Add { a, b }, v, g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "mul shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let v = Mat::from_vec(va.rows, va.cols, data);
        let g = self.any_grad(&[a, b]);
        self.push(Op::Mul { a, b }, v, g)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        v.scale_in_place(c);
        let g = self.nodes[x].needs_grad;
        self.push(Op::Scale { x, c }, v, g)
    }

    pub fn mul_scalar_node(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let sv = &self.nodes[s].value;
        assert_eq!((sv.rows, sv.cols), (1, 1), "scalar node must be 1x1");
        let c = sv.data[0];
        let mut v = self.nodes[x].value.clone();
        v.scale_in_place(c);
        let g = self.any_grad(&[x, s]);
        self.push(Op::MulScalarNode { x, s }, v, g)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let (vx, vw) = (&self.nodes[x].value, &self.nodes[w].value);
        assert_eq!(vx.cols, vw.rows, "linear: x cols {} vs w rows {}", vx.cols, vw.rows);
        let mut v = mat::mm_nn(vx, vw);
        if let Some(b) = b {
            let vb = &self.nodes[b].value;
            assert_eq!((vb.rows, vb.cols), (1, v.cols), "linear bias shape");
            for r in 0..v.rows {
                let row = v.row_mut(r);
                for (o, bv) in row.iter_mut().zip(&vb.data) {
                    *o += bv;
                }
            }
        }
        let mut ids = vec![x, w];
        ids.extend(b);
        let g = self.any_grad(&ids);
        self.push(Op::Linear { x, w, b }, v, g)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = mat::mm_nn(&self.nodes[a].value, &self.nodes[b].value);
        let g = self.any_grad(&[a, b]);
        self.push(Op::MatMul { a, b }, v, g)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = mat::mm_nt(&self.nodes[a].value, &self.nodes[b].value);
        let g = self.any_grad(&[a, b]);
        self.push(Op::MatMulNT { a, b }, v, g)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x].value;
        let data = vx.data.iter().map(|v| v.exp()).collect();
        let v = Mat::from_vec(vx.rows, vx.cols, data);
        let g = self.nodes[x].needs_grad;
        self.push(Op::Exp { x }, v, g)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x].value;
        let data = vx.data.iter().map(|&v| gelu(v)).collect();
        let v = Mat::from_vec(vx.rows, vx.cols, data);
        let g = self.nodes[x].needs_grad;
        self.push(Op::Gelu { x }, v, g)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (vx, vg, vb) = (&self.nodes[x].value, &self.nodes[gamma].value, &self.nodes[beta].value);
        let d = vx.cols;
        assert_eq!((vg.rows, vg.cols), (1, d), "layer_norm gamma shape");
        assert_eq!((vb.rows, vb.cols), (1, d), "layer_norm beta shape");
        let mut v = Mat::zeros(vx.rows, d);
        for r in 0..vx.rows {
            let row = vx.row(r);
            let (mean, rstd) = row_moments(row);
            let out = v.row_mut(r);
            for c in 0..d {
                out[c] = (row[c] - mean) * rstd * vg.data[c] + vb.data[c];
            }
        }
        let g = self.any_grad(&[x, gamma, beta]);
        self.push(Op::LayerNorm { x, gamma, beta }, v, g)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x].value;
        let mut v = Mat::zeros(vx.rows, vx.cols);
        for r in 0..vx.rows {
            softmax_into(vx.row(r), v.row_mut(r));
        }
        let g = self.nodes[x].needs_grad;
        self.push(Op::SoftmaxRows { x }, v, g)
    }

    pub fn unit_rows(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        mat::unit_normalize_rows(&mut v);
        let g = self.nodes[x].needs_grad;
        self.push(Op::UnitRows { x }, v, g)
    }

    pub fn pool_groups(&mut self, x: NodeId, k: usize) -> NodeId {
        let vx = &self.nodes[x].value;
        assert!(k > 0 && vx.rows % k == 0, "pool_groups: {} rows not divisible by {k}", vx.rows);
        let groups = vx.rows / k;
        let d = vx.cols;
        let mut v = Mat::zeros(groups, d);
        let mut argmax = vec![0usize; groups * d];
        for gi in 0..groups {
            for c in 0..d {
                let mut best = f64::NEG_INFINITY;
                let mut best_r = gi * k;
                for r in gi * k..(gi + 1) * k {
                    let val = vx.at(r, c);
                    if val > best {
                        best = val;
                        best_r = r;
                    }
                }
                v.set(gi, c, best);
                argmax[gi * d + c] = best_r;
            }
        }
        let g = self.nodes[x].needs_grad;
        self.push(Op::PoolGroups { x, argmax }, v, g)
    }

    pub fn repeat_rows(&mut self, x: NodeId, k: usize) -> NodeId {
        let vx = &self.nodes[x].value;
        let mut v = Mat::zeros(vx.rows * k, vx.cols);
        for r in 0..vx.rows {
            for j in 0..k {
                v.row_mut(r * k + j).copy_from_slice(vx.row(r));
            }
        }
        let g = self.nodes[x].needs_grad;
        self.push(Op::RepeatRows { x, k }, v, g)
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let rows = self.nodes[xs[0]].value.rows;
        let cols: usize = xs.iter().map(|&i| self.nodes[i].value.cols).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for &i in xs {
            let vi = &self.nodes[i].value;
            assert_eq!(vi.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[off..off + vi.cols].copy_from_slice(vi.row(r));
            }
            off += vi.cols;
        }
        let g = self.any_grad(xs);
        self.push(Op::ConcatCols { xs: xs.to_vec() }, v, g)
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let cols = self.nodes[xs[0]].value.cols;
        let rows: usize = xs.iter().map(|&i| self.nodes[i].value.rows).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut off = 0;
        for &i in xs {
            let vi = &self.nodes[i].value;
            assert_eq!(vi.cols, cols, "concat_rows col mismatch");
            for r in 0..vi.rows {
                v.row_mut(off + r).copy_from_slice(vi.row(r));
            }
            off += vi.rows;
        }
        let g = self.any_grad(xs);
        self.push(Op::ConcatRows { xs: xs.to_vec() }, v, g)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let vx = &self.nodes[x].value;
        assert!(start + len <= vx.rows, "slice_rows out of range");
        let mut v = Mat::zeros(len, vx.cols);
        for r in 0..len {
            v.row_mut(r).copy_from_slice(vx.row(start + r));
        }
        let g = self.nodes[x].needs_grad;
        self.push(Op::SliceRows { x, start }, v, g)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let vx = &self.nodes[x].value;
        assert!(start + len <= vx.cols, "slice_cols out of range");
        let mut v = Mat::zeros(vx.rows, len);
        for r in 0..vx.rows {
            v.row_mut(r).copy_from_slice(&vx.row(r)[start..start + len]);
        }
        let g = self.nodes[x].needs_grad;
        self.push(Op::SliceCols { x, start }, v, g)
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.transpose();
        let g = self.nodes[x].needs_grad;
        self.push(Op::Transpose { x }, v, g)
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> NodeId {
        let vx = &self.nodes[x].value;
        let mut v = Mat::zeros(indices.len(), vx.cols);
        for (r, &i) in indices.iter().enumerate() {
            assert!(i < vx.rows, "gather_rows index {i} >= {}", vx.rows);
            v.row_mut(r).copy_from_slice(vx.row(i));
        }
        let g = self.nodes[x].needs_grad;
        self.push(Op::GatherRows { x, indices: indices.to_vec() }, v, g)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.data.iter().sum();
        let g = self.nodes[x].needs_grad;
        self.push(Op::SumAll { x }, Mat::from_vec(1, 1, vec![s]), g)
    }

    pub fn ce_diag_rows(&mut self, logits: NodeId) -> NodeId {
        let v = &self.nodes[logits].value;
        assert_eq!(v.rows, v.cols, "ce_diag_rows needs square logits");
        let labels: Vec<usize> = (0..v.rows).collect();
        let loss = ce_mean(v, &labels);
        let g = self.nodes[logits].needs_grad;
        self.push(Op::CeDiagRows { logits }, Mat::from_vec(1, 1, vec![loss]), g)
    }

    pub fn ce_label_rows(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let v = &self.nodes[logits].value;
        assert_eq!(v.rows, labels.len(), "ce_label_rows label count");
        for &l in labels {
            assert!(l < v.cols, "ce label {l} >= {}", v.cols);
        }
        let loss = ce_mean(v, labels);
        let g = self.nodes[logits].needs_grad;
        self.push(Op::CeLabelRows { logits, labels: labels.to_vec() }, Mat::from_vec(1, 1, vec![loss]), g)
    }

    /// Reverse pass from a 1x1 root seeded with gradient 1.
    pub fn backward(&self, root: NodeId) -> Grads {
        let rv = &self.nodes[root].value;
        assert_eq!((rv.rows, rv.cols), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root].needs_grad {
            grads[root] = Some(Mat::from_vec(1, 1, vec![1.0]));
        }

        for id in (0..=root).rev() {
            let Some(dy) = grads[id].take() else { continue };
            self.backprop_one(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Grads { by_node: grads }
    }

    fn acc(&self, grads: &mut [Option<Mat>], id: NodeId, delta: Mat) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => g.add_in_place(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_one(&self, id: NodeId, dy: &Mat, grads: &mut [Option<Mat>]) {
        let val = |i: NodeId| &self.nodes[i].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, dy.clone());
            }
            Op::Mul { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let da = Mat::from_vec(dy.rows, dy.cols, dy.data.iter().zip(&vb.data).map(|(d, v)| d * v).collect());
                let db = Mat::from_vec(dy.rows, dy.cols, dy.data.iter().zip(&va.data).map(|(d, v)| d * v).collect());
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::Scale { x, c } => {
                let mut dx = dy.clone();
                dx.scale_in_place(*c);
                self.acc(grads, *x, dx);
            }
            Op::MulScalarNode { x, s } => {
                let c = val(*s).data[0];
                let mut dx = dy.clone();
                dx.scale_in_place(c);
                self.acc(grads, *x, dx);
                let ds = dy.dot_all(val(*x));
                self.acc(grads, *s, Mat::from_vec(1, 1, vec![ds]));
            }
            Op::Linear { x, w, b } => {
                if self.nodes[*x].needs_grad {
                    self.acc(grads, *x, mat::mm_nt(dy, val(*w)));
                }
                if self.nodes[*w].needs_grad {
                    self.acc(grads, *w, mat::mm_tn(val(*x), dy));
                }
                if let Some(b) = b {
                    if self.nodes[*b].needs_grad {
                        let mut db = Mat::zeros(1, dy.cols);
                        for r in 0..dy.rows {
                            db.add_in_place(&Mat::from_vec(1, dy.cols, dy.row(r).to_vec()));
                        }
                        self.acc(grads, *b, db);
                    }
                }
            }
            Op::MatMul { a, b } => {
                if self.nodes[*a].needs_grad {
                    self.acc(grads, *a, mat::mm_nt(dy, val(*b)));
                }
                if self.nodes[*b].needs_grad {
                    self.acc(grads, *b, mat::mm_tn(val(*a), dy));
                }
            }
            Op::MatMulNT { a, b } => {
                if self.nodes[*a].needs_grad {
                    self.acc(grads, *a, mat::mm_nn(dy, val(*b)));
                }
                if self.nodes[*b].needs_grad {
                    self.acc(grads, *b, mat::mm_tn(dy, val(*a)));
                }
            }
            Op::Exp { x } => {
                let y = &self.nodes[id].value;
                let dx = Mat::from_vec(dy.rows, dy.cols, dy.data.iter().zip(&y.data).map(|(d, v)| d * v).collect());
                self.acc(grads, *x, dx);
            }
            Op::Gelu { x } => {
                let vx = val(*x);
                let dx = Mat::from_vec(
                    dy.rows,
                    dy.cols,
                    dy.data.iter().zip(&vx.data).map(|(d, &v)| d * gelu_grad(v)).collect(),
                );
                self.acc(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (vx, vg) = (val(*x), val(*gamma));
                let d = vx.cols;
                let mut dx = Mat::zeros(vx.rows, d);
                let mut dgamma = Mat::zeros(1, d);
                let mut dbeta = Mat::zeros(1, d);
                for r in 0..vx.rows {
                    let row = vx.row(r);
                    let (mean, rstd) = row_moments(row);
                    let dyr = dy.row(r);
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    let mut xhat = vec![0.0; d];
                    for c in 0..d {
                        xhat[c] = (row[c] - mean) * rstd;
                        let g = dyr[c] * vg.data[c];
                        sum_g += g;
                        sum_gx += g * xhat[c];
                        dgamma.data[c] += dyr[c] * xhat[c];
                        dbeta.data[c] += dyr[c];
                    }
                    let inv_d = 1.0 / d as f64;
                    let out = dx.row_mut(r);
                    for c in 0..d {
                        let g = dyr[c] * vg.data[c];
                        out[c] = (g - sum_g * inv_d - xhat[c] * sum_gx * inv_d) * rstd;
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::SoftmaxRows { x } => {
                let y = &self.nodes[id].value;
                let mut dx = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let dyr = dy.row(r);
                    let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                    let out = dx.row_mut(r);
                    for c in 0..y.cols {
                        out[c] = yr[c] * (dyr[c] - dot);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::UnitRows { x } => {
                let vx = val(*x);
                let y = &self.nodes[id].value;
                let mut dx = Mat::zeros(vx.rows, vx.cols);
                for r in 0..vx.rows {
                    let norm = mat::dot(vx.row(r), vx.row(r)).sqrt();
                    if norm <= 1e-12 {
                        continue; // zero row stays zero; subgradient 0
                    }
                    let yr = y.row(r);
                    let dyr = dy.row(r);
                    let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                    let out = dx.row_mut(r);
                    for c in 0..vx.cols {
                        out[c] = (dyr[c] - yr[c] * dot) / norm;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::PoolGroups { x, argmax } => {
                let vx = val(*x);
                let d = vx.cols;
                let mut dx = Mat::zeros(vx.rows, d);
                for gi in 0..dy.rows {
                    for c in 0..d {
                        let r = argmax[gi * d + c];
                        *dx.row_mut(r).get_mut(c).unwrap() += dy.at(gi, c);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::RepeatRows { x, k } => {
                let vx = val(*x);
                let mut dx = Mat::zeros(vx.rows, vx.cols);
                for r in 0..vx.rows {
                    for j in 0..*k {
                        let src = dy.row(r * k + j);
                        let dst = dx.row_mut(r);
                        for c in 0..vx.cols {
                            dst[c] += src[c];
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::ConcatCols { xs } => {
                let mut off = 0;
                for &i in xs {
                    let w = self.nodes[i].value.cols;
                    if self.nodes[i].needs_grad {
                        let mut di = Mat::zeros(dy.rows, w);
                        for r in 0..dy.rows {
                            di.row_mut(r).copy_from_slice(&dy.row(r)[off..off + w]);
                        }
                        self.acc(grads, i, di);
                    }
                    off += w;
                }
            }
            Op::ConcatRows { xs } => {
                let mut off = 0;
                for &i in xs {
                    let h = self.nodes[i].value.rows;
                    if self.nodes[i].needs_grad {
                        let mut di = Mat::zeros(h, dy.cols);
                        for r in 0..h {
                            di.row_mut(r).copy_from_slice(dy.row(off + r));
                        }
                        self.acc(grads, i, di);
                    }
                    off += h;
                }
            }
            Op::SliceRows { x, start } => {
                let vx = val(*x);
                let mut dx = Mat::zeros(vx.rows, vx.cols);
                for r in 0..dy.rows {
                    dx.row_mut(start + r).copy_from_slice(dy.row(r));
                }
                self.acc(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let vx = val(*x);
                let mut dx = Mat::zeros(vx.rows, vx.cols);
                for r in 0..dy.rows {
                    dx.row_mut(r)[*start..start + dy.cols].copy_from_slice(dy.row(r));
                }
                self.acc(grads, *x, dx);
            }
            Op::Transpose { x } => {
                self.acc(grads, *x, dy.transpose());
            }
            Op::GatherRows { x, indices } => {
                let vx = val(*x);
                let mut dx = Mat::zeros(vx.rows, vx.cols);
                for (r, &i) in indices.iter().enumerate() {
                    let src = dy.row(r);
                    let dst = dx.row_mut(i);
                    for c in 0..vx.cols {
                        dst[c] += src[c];
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::SumAll { x } => {
                let vx = val(*x);
                let d = dy.data[0];
                self.acc(grads, *x, Mat::from_vec(vx.rows, vx.cols, vec![d; vx.len()]));
            }
            Op::CeDiagRows { logits } => {
                let labels: Vec<usize> = (0..val(*logits).rows).collect();
                let dx = ce_grad(val(*logits), &labels, dy.data[0]);
                self.acc(grads, *logits, dx);
            }
            Op::CeLabelRows { logits, labels } => {
                let dx = ce_grad(val(*logits), labels, dy.data[0]);
                self.acc(grads, *logits, dx);
            }
        }
    }
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
fn row_moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Mean cross-entropy of row softmaxes against integer labels.
fn ce_mean(logits: &Mat, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    total / labels.len() as f64
}

fn ce_grad(logits: &Mat, labels: &[usize], upstream: f64) -> Mat {
    let n = labels.len() as f64;
    let mut dx = Mat::zeros(logits.rows, logits.cols);
    for (r, &l) in labels.iter().enumerate() {
        softmax_into(logits.row(r), dx.row_mut(r));
        let row = dx.row_mut(r);
        row[l] -= 1.0;
        for v in row.iter_mut() {
            *v *= upstream / n;
        }
    }
    dx
}
