use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, SalgError};
use crate::par;
use crate::segmentation::RegionPlan;

use super::{strides_of, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

/// The coefficient of the GELU tanh approximation: sqrt(2/pi).
const GELU_A: f64 = 0.797_884_560_802_865_4;
const GELU_B: f64 = 0.044_715;

/// Operations recorded on the tape. Constant payloads (masks, plans, index
/// maps) are shared pointers so recording stays cheap.
#[derive(Clone)]
pub enum Op {
    Leaf,
    Add(Value, Value),
    Mul(Value, Value),
    Scale(Value, f64),
    AddBias(Value, Value),
    Matmul(Value, Value),
    Softmax(Value, usize),
    LayerNorm { x: Value, gamma: Value, beta: Value, eps: f64 },
    Gelu(Value),
    Sin(Value),
    Conv2d { x: Value, w: Value, stride: usize, padding: usize },
    Reshape(Value),
    Permute { x: Value, axes: Vec<usize> },
    Sum(Value),
    MeanAxis0(Value),
    RepeatRows { x: Value, n: usize },
    MulSlotMask { x: Value, mask: Arc<Vec<bool>> },
    AttnKeyMask { x: Value, mask: Arc<Vec<bool>> },
    AddRelPosBias { x: Value, table: Value, index: Arc<Vec<usize>> },
    GatherRegions { map: Value, agr: Value, plan: Arc<RegionPlan> },
    ScatterRegions { batch: Value, plan: Arc<RegionPlan> },
    Slot0(Value),
    PadHw(Value),
    CropHw(Value),
    SpaceToDepth2(Value),
    CrossEntropy { logits: Value, target: usize },
}

struct Node {
    tensor: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Per-node gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` required grad and was reached.
    pub fn of(&self, v: Value) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Reverse-mode tape: eager forward evaluation, recorded ops, single-writer.
///
/// Tensors held by nodes are immutable; a fresh graph is built per forward
/// pass. Parameters bind through [`Graph::param`], which memoizes per id so a
/// parameter appears as exactly one node no matter how often it is used.
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Value>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor, op: Op, requires_grad: bool, param: Option<ParamId>) -> Value {
        self.nodes.push(Node { tensor, op, requires_grad, param });
        Value(self.nodes.len() - 1)
    }

    fn req(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input that does not participate in differentiation.
    pub fn input(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf, false, None)
    }

    /// Records an input that gradients flow into (for tests and probes).
    pub fn input_with_grad(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf, true, None)
    }

    /// Binds a parameter from `store`; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Value {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let t = Tensor::from_arc(store.shape(id).to_vec(), store.value_arc(id));
        let v = self.push(t, Op::Leaf, true, Some(id));
        self.param_nodes.insert(id, v);
        v
    }

    /// The node a parameter is bound to in this graph, if it was used.
    pub fn param_node(&self, id: ParamId) -> Option<Value> {
        self.param_nodes.get(&id).copied()
    }

    pub fn data(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    // ── Elementwise and linear algebra ──────────────────────────────────

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.shape() != tb.shape() {
            return Err(SalgError::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; ta.numel()];
        let (da, db) = (ta.data(), tb.data());
        par::for_each_chunk_mut(&mut out, 4096, |ci, chunk| {
            let base = ci * 4096;
            for (i, o) in chunk.iter_mut().enumerate() {
                *o = da[base + i] + db[base + i];
            }
        });
        let shape = ta.shape().to_vec();
        let rg = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg, None))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.shape() != tb.shape() {
            return Err(SalgError::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg, None))
    }

    pub fn scale(&mut self, x: Value, c: f64) -> Value {
        let t = &self.nodes[x.0].tensor;
        let out: Vec<f64> = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.req(x);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Scale(x, c), rg, None)
    }

    /// `x[.., C] + b[C]`, broadcasting the bias over all leading dimensions.
    pub fn add_bias(&mut self, x: Value, b: Value) -> Result<Value> {
        let (tx, tb) = (&self.nodes[x.0].tensor, &self.nodes[b.0].tensor);
        let c = *tx.shape().last().unwrap_or(&0);
        if tb.shape() != [c] {
            return Err(SalgError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; tx.numel()];
        let (dx, db) = (tx.data(), tb.data());
        par::for_each_chunk_mut(&mut out, c, |row, chunk| {
            let base = row * c;
            for (j, o) in chunk.iter_mut().enumerate() {
                *o = dx[base + j] + db[j];
            }
        });
        let shape = tx.shape().to_vec();
        let rg = self.req(x) || self.req(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x, b), rg, None))
    }

    /// Batched matrix product `a[.., M, K] x b[.., K, N]` with broadcasting
    /// over leading dimensions.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        let spec = MatmulSpec::resolve(ta.shape(), tb.shape())?;
        let mut out = vec![0.0; spec.batch * spec.m * spec.n];
        let (da, db) = (ta.data(), tb.data());
        let (m, k, n) = (spec.m, spec.k, spec.n);
        par::for_each_chunk_mut(&mut out, n, |row, chunk| {
            let bi = row / m;
            let i = row % m;
            let a_base = spec.a_offset(bi) + i * k;
            let b_base = spec.b_offset(bi);
            for (kk, &av) in da[a_base..a_base + k].iter().enumerate() {
                let b_row = &db[b_base + kk * n..b_base + (kk + 1) * n];
                for (o, &bv) in chunk.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        });
        let mut shape = spec.lead.clone();
        shape.push(m);
        shape.push(n);
        let rg = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Matmul(a, b), rg, None))
    }

    /// Numerically stabilized softmax along `axis`. Entries equal to `-inf`
    /// map to exactly zero; a fully `-inf` run yields an all-zero run.
    pub fn softmax(&mut self, x: Value, axis: usize) -> Result<Value> {
        let t = &self.nodes[x.0].tensor;
        if axis >= t.shape().len() {
            return Err(SalgError::InvalidShape {
                op: "softmax",
                shape: t.shape().to_vec(),
                detail: format!("axis {axis} out of range"),
            });
        }
        let dim = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let block = dim * inner;
        let mut out = vec![0.0; t.numel()];
        let dx = t.data();
        par::for_each_chunk_mut(&mut out, block, |outer, chunk| {
            let base = outer * block;
            for off in 0..inner {
                softmax_lane(&dx[base..base + block], chunk, off, inner, dim);
            }
        });
        let shape = t.shape().to_vec();
        let rg = self.req(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x, axis), rg, None))
    }

    /// Per-token layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Value, gamma: Value, beta: Value, eps: f64) -> Result<Value> {
        let (tx, tg, tb) =
            (&self.nodes[x.0].tensor, &self.nodes[gamma.0].tensor, &self.nodes[beta.0].tensor);
        let c = *tx.shape().last().ok_or_else(|| SalgError::InvalidShape {
            op: "layer_norm",
            shape: tx.shape().to_vec(),
            detail: "rank 0 input".into(),
        })?;
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(SalgError::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; tx.numel()];
        let (dx, dg, db) = (tx.data(), tg.data(), tb.data());
        par::for_each_chunk_mut(&mut out, c, |row, chunk| {
            let xs = &dx[row * c..(row + 1) * c];
            let (mu, inv) = layer_norm_stats(xs, eps);
            for j in 0..c {
                chunk[j] = (xs[j] - mu) * inv * dg[j] + db[j];
            }
        });
        let shape = tx.shape().to_vec();
        let rg = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, eps }, rg, None))
    }

    pub fn gelu(&mut self, x: Value) -> Value {
        let t = &self.nodes[x.0].tensor;
        let mut out = vec![0.0; t.numel()];
        let dx = t.data();
        par::for_each_chunk_mut(&mut out, 4096, |ci, chunk| {
            let base = ci * 4096;
            for (i, o) in chunk.iter_mut().enumerate() {
                let v = dx[base + i];
                let t = (GELU_A * (v + GELU_B * v * v * v)).tanh();
                *o = 0.5 * v * (1.0 + t);
            }
        });
        let shape = t.shape().to_vec();
        let rg = self.req(x);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Gelu(x), rg, None)
    }

    pub fn sin(&mut self, x: Value) -> Value {
        let t = &self.nodes[x.0].tensor;
        let out: Vec<f64> = t.data().iter().map(|v| v.sin()).collect();
        let shape = t.shape().to_vec();
        let rg = self.req(x);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Sin(x), rg, None)
    }

    /// 2-D cross-correlation on an `[H, W, Cin]` map with an
    /// `[Cout, Cin, kh, kw]` kernel.
    pub fn conv2d(&mut self, x: Value, w: Value, stride: usize, padding: usize) -> Result<Value> {
        let (tx, tw) = (&self.nodes[x.0].tensor, &self.nodes[w.0].tensor);
        if tx.shape().len() != 3 || tw.shape().len() != 4 {
            return Err(SalgError::ShapeMismatch {
                op: "conv2d",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let (h, wid, cin) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cout, cin_w, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        if cin != cin_w {
            return Err(SalgError::ShapeMismatch {
                op: "conv2d",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        if kh > h + 2 * padding || kw > wid + 2 * padding || stride == 0 {
            return Err(SalgError::InvalidShape {
                op: "conv2d",
                shape: tx.shape().to_vec(),
                detail: format!("kernel {kh}x{kw} exceeds padded input (stride {stride})"),
            });
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wid + 2 * padding - kw) / stride + 1;
        // Kernel relaid as [kh, kw, cin, cout] so the innermost loop is
        // contiguous in cout.
        let wt = relayout_kernel(tw.data(), cout, cin, kh, kw);
        let mut out = vec![0.0; oh * ow * cout];
        let dx = tx.data();
        par::for_each_chunk_mut(&mut out, ow * cout, |i, chunk| {
            for j in 0..ow {
                let acc = &mut chunk[j * cout..(j + 1) * cout];
                for ki in 0..kh {
                    let u = (i * stride + ki) as isize - padding as isize;
                    if u < 0 || u >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let v = (j * stride + kj) as isize - padding as isize;
                        if v < 0 || v >= wid as isize {
                            continue;
                        }
                        let xb = (u as usize * wid + v as usize) * cin;
                        let wb = ((ki * kw + kj) * cin) * cout;
                        for c in 0..cin {
                            let xv = dx[xb + c];
                            let wrow = &wt[wb + c * cout..wb + (c + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        });
        let rg = self.req(x) || self.req(w);
        Ok(self.push(
            Tensor::new(vec![oh, ow, cout], out)?,
            Op::Conv2d { x, w, stride, padding },
            rg,
            None,
        ))
    }

    // ── Shape plumbing ──────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Value, shape: Vec<usize>) -> Result<Value> {
        let t = &self.nodes[x.0].tensor;
        if shape.iter().product::<usize>() != t.numel() {
            return Err(SalgError::InvalidShape {
                op: "reshape",
                shape,
                detail: format!("element count differs from {:?}", t.shape()),
            });
        }
        let out = Tensor::from_arc(shape, t.data_arc());
        let rg = self.req(x);
        Ok(self.push(out, Op::Reshape(x), rg, None))
    }

    pub fn permute(&mut self, x: Value, axes: Vec<usize>) -> Result<Value> {
        let t = &self.nodes[x.0].tensor;
        let rank = t.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(SalgError::InvalidShape {
                op: "permute",
                shape: t.shape().to_vec(),
                detail: format!("invalid axes {axes:?}"),
            });
        }
        let out = permute_data(t.data(), t.shape(), &axes);
        let shape: Vec<usize> = axes.iter().map(|&a| t.shape()[a]).collect();
        let rg = self.req(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Permute { x, axes }, rg, None))
    }

    // ── Reductions and broadcasts ───────────────────────────────────────

    /// Sum of all entries, as a rank-0 scalar. Fixed 1024-element blocking
    /// keeps the reduction order independent of thread count.
    pub fn sum(&mut self, x: Value) -> Value {
        let t = &self.nodes[x.0].tensor;
        let total = blocked_sum(t.data());
        let rg = self.req(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg, None)
    }

    /// Mean over the first axis: `[N, rest..] -> [rest..]`.
    pub fn mean_axis0(&mut self, x: Value) -> Result<Value> {
        let t = &self.nodes[x.0].tensor;
        if t.shape().is_empty() {
            return Err(SalgError::InvalidShape {
                op: "mean_axis0",
                shape: vec![],
                detail: "rank 0 input".into(),
            });
        }
        let n = t.shape()[0];
        let rest: usize = t.shape()[1..].iter().product();
        let dx = t.data();
        let mut out = vec![0.0; rest];
        par::for_each_chunk_mut(&mut out, 256, |ci, chunk| {
            let base = ci * 256;
            for (j, o) in chunk.iter_mut().enumerate() {
                let col = base + j;
                let mut s = 0.0;
                for i in 0..n {
                    s += dx[i * rest + col];
                }
                *o = s / n as f64;
            }
        });
        let shape = t.shape()[1..].to_vec();
        let rg = self.req(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanAxis0(x), rg, None))
    }

    /// Tiles a `[rest..]` tensor into `[n, rest..]`.
    pub fn repeat_rows(&mut self, x: Value, n: usize) -> Result<Value> {
        let t = &self.nodes[x.0].tensor;
        let rest = t.numel();
        let mut out = vec![0.0; n * rest];
        let dx = t.data();
        par::for_each_chunk_mut(&mut out, rest, |_, chunk| chunk.copy_from_slice(dx));
        let mut shape = vec![n];
        shape.extend_from_slice(t.shape());
        let rg = self.req(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::RepeatRows { x, n }, rg, None))
    }

    // ── Masking, bias, and region batching ──────────────────────────────

    /// Zeroes the channel vectors of mask-false slots of a `[K, L, C]` batch.
    pub fn mul_slot_mask(&mut self, x: Value, mask: Arc<Vec<bool>>) -> Result<Value> {
        let t = &self.nodes[x.0].tensor;
        if t.shape().len() != 3 || t.shape()[0] * t.shape()[1] != mask.len() {
            return Err(SalgError::InvalidShape {
                op: "mul_slot_mask",
                shape: t.shape().to_vec(),
                detail: format!("mask length {}", mask.len()),
            });
        }
        let c = t.shape()[2];
        let dx = t.data();
        let m = Arc::clone(&mask);
        let mut out = vec![0.0; t.numel()];
        par::for_each_chunk_mut(&mut out, c, |slot, chunk| {
            if m[slot] {
                chunk.copy_from_slice(&dx[slot * c..(slot + 1) * c]);
            }
        });
        let shape = t.shape().to_vec();
        let rg = self.req(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MulSlotMask { x, mask }, rg, None))
    }

    /// Writes `-inf` into attention logits `[K, H, L, L]` wherever the key
    /// slot is mask-false, so softmax assigns those keys exactly zero weight.
    pub fn attn_key_mask(&mut self, x: Value, mask: Arc<Vec<bool>>) -> Result<Value> {
        let t = &self.nodes[x.0].tensor;
        let s = t.shape();
        if s.len() != 4 || s[2] != s[3] || s[0] * s[3] != mask.len() {
            return Err(SalgError::InvalidShape {
                op: "attn_key_mask",
                shape: s.to_vec(),
                detail: format!("mask length {}", mask.len()),
            });
        }
        let (heads, l) = (s[1], s[3]);
        let dx = t.data();
        let m = Arc::clone(&mask);
        let mut out = vec![0.0; t.numel()];
        par::for_each_chunk_mut(&mut out, l, |row, chunk| {
            let k = row / (heads * l);
            let base = row * l;
            for (j, o) in chunk.iter_mut().enumerate() {
                *o = if m[k * l + j] { dx[base + j] } else { f64::NEG_INFINITY };
            }
        });
        let shape = s.to_vec();
        let rg = self.req(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::AttnKeyMask { x, mask }, rg, None))
    }

    /// Adds learned relative-position entries to attention logits.
    /// `x` is `[K, H, L, L]`, `table` is `[rows, H]`, and `index[i*L+j]`
    /// selects the table row for query slot `i` attending key slot `j`.
    pub fn add_rel_pos_bias(&mut self, x: Value, table: Value, index: Arc<Vec<usize>>) -> Result<Value> {
        let (tx, tt) = (&self.nodes[x.0].tensor, &self.nodes[table.0].tensor);
        let s = tx.shape();
        if s.len() != 4 || s[2] != s[3] || index.len() != s[2] * s[3] {
            return Err(SalgError::InvalidShape {
                op: "add_rel_pos_bias",
                shape: s.to_vec(),
                detail: format!("index length {}", index.len()),
            });
        }
        if tt.shape().len() != 2 || tt.shape()[1] != s[1] {
            return Err(SalgError::ShapeMismatch {
                op: "add_rel_pos_bias",
                lhs: s.to_vec(),
                rhs: tt.shape().to_vec(),
            });
        }
        let rows = tt.shape()[0];
        if let Some(&bad) = index.iter().find(|&&r| r >= rows) {
            return Err(SalgError::InvalidShape {
                op: "add_rel_pos_bias",
                shape: tt.shape().to_vec(),
                detail: format!("index entry {bad} out of {rows} table rows"),
            });
        }
        let (heads, l) = (s[1], s[3]);
        let (dx, dt) = (tx.data(), tt.data());
        let idx = Arc::clone(&index);
        let mut out = vec![0.0; tx.numel()];
        par::for_each_chunk_mut(&mut out, l * l, |kh, chunk| {
            let h = kh % heads;
            let base = kh * l * l;
            for (ij, o) in chunk.iter_mut().enumerate() {
                *o = dx[base + ij] + dt[idx[ij] * heads + h];
            }
        });
        let shape = s.to_vec();
        let rg = self.req(x) || self.req(table);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRelPosBias { x, table, index }, rg, None))
    }

    /// Lays a feature map out as per-region coverage batches with the AGR
    /// vector in slot 0. In-bounds coverage slots carry the covering token's
    /// data whether or not it belongs to the region; out-of-bounds slots are
    /// zero.
    pub fn gather_regions(&mut self, map: Value, agr: Value, plan: Arc<RegionPlan>) -> Result<Value> {
        let (tm, ta) = (&self.nodes[map.0].tensor, &self.nodes[agr.0].tensor);
        let c = *tm.shape().last().unwrap_or(&0);
        if tm.shape() != [plan.height, plan.width, c] {
            return Err(SalgError::InvalidShape {
                op: "gather_regions",
                shape: tm.shape().to_vec(),
                detail: format!("plan expects {}x{}", plan.height, plan.width),
            });
        }
        if ta.shape() != [plan.regions, c] {
            return Err(SalgError::Usage(format!(
                "gather_regions: agr shape {:?} does not match {} regions x {} channels",
                ta.shape(),
                plan.regions,
                c
            )));
        }
        let (dm, da) = (tm.data(), ta.data());
        let p = Arc::clone(&plan);
        let width = plan.width;
        let mut out = vec![0.0; plan.regions * plan.slots * c];
        par::for_each_chunk_mut(&mut out, c, |slot, chunk| {
            let (k, l) = (slot / p.slots, slot % p.slots);
            if l == 0 {
                chunk.copy_from_slice(&da[k * c..(k + 1) * c]);
            } else if let Some((r, cc)) = p.slot_origin[slot] {
                let base = (r * width + cc) * c;
                chunk.copy_from_slice(&dm[base..base + c]);
            }
        });
        let shape = vec![plan.regions, plan.slots, c];
        let rg = self.req(map) || self.req(agr);
        Ok(self.push(Tensor::new(shape, out)?, Op::GatherRegions { map, agr, plan }, rg, None))
    }

    /// Writes each region's mask-true non-AGR slots back to their origin
    /// coordinates; every other map position (padding) is zero.
    pub fn scatter_regions(&mut self, batch: Value, plan: Arc<RegionPlan>) -> Result<Value> {
        let tb = &self.nodes[batch.0].tensor;
        let c = *tb.shape().last().unwrap_or(&0);
        if tb.shape() != [plan.regions, plan.slots, c] {
            return Err(SalgError::InvalidShape {
                op: "scatter_regions",
                shape: tb.shape().to_vec(),
                detail: format!("plan expects {}x{} slots", plan.regions, plan.slots),
            });
        }
        let db = tb.data();
        let p = Arc::clone(&plan);
        let mut out = vec![0.0; plan.height * plan.width * c];
        par::for_each_chunk_mut(&mut out, c, |token, chunk| {
            if let Some(slot) = p.token_owner[token] {
                chunk.copy_from_slice(&db[slot * c..(slot + 1) * c]);
            }
        });
        let shape = vec![plan.height, plan.width, c];
        let rg = self.req(batch);
        Ok(self.push(Tensor::new(shape, out)?, Op::ScatterRegions { batch, plan }, rg, None))
    }

    /// Extracts slot 0 (the AGR token) of every region: `[K, L, C] -> [K, C]`.
    pub fn slot0(&mut self, batch: Value) -> Result<Value> {
        let t = &self.nodes[batch.0].tensor;
        if t.shape().len() != 3 {
            return Err(SalgError::InvalidShape {
                op: "slot0",
                shape: t.shape().to_vec(),
                detail: "expected [K, L, C]".into(),
            });
        }
        let (k, l, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let dx = t.data();
        let mut out = vec![0.0; k * c];
        par::for_each_chunk_mut(&mut out, c, |ki, chunk| {
            chunk.copy_from_slice(&dx[ki * l * c..ki * l * c + c]);
        });
        let rg = self.req(batch);
        Ok(self.push(Tensor::new(vec![k, c], out)?, Op::Slot0(batch), rg, None))
    }

    /// Zero-pads an `[H, W, C]` map at the bottom/right to `[new_h, new_w, C]`.
    pub fn pad_hw(&mut self, x: Value, new_h: usize, new_w: usize) -> Result<Value> {
        let t = &self.nodes[x.0].tensor;
        let (h, w, c) = dims3(t, "pad_hw")?;
        if new_h < h || new_w < w {
            return Err(SalgError::InvalidShape {
                op: "pad_hw",
                shape: t.shape().to_vec(),
                detail: format!("target {new_h}x{new_w} smaller than input"),
            });
        }
        let dx = t.data();
        let mut out = vec![0.0; new_h * new_w * c];
        par::for_each_chunk_mut(&mut out, new_w * c, |i, chunk| {
            if i < h {
                chunk[..w * c].copy_from_slice(&dx[i * w * c..(i + 1) * w * c]);
            }
        });
        let rg = self.req(x);
        Ok(self.push(Tensor::new(vec![new_h, new_w, c], out)?, Op::PadHw(x), rg, None))
    }

    /// Crops an `[H, W, C]` map to its top-left `[new_h, new_w, C]` corner.
    pub fn crop_hw(&mut self, x: Value, new_h: usize, new_w: usize) -> Result<Value> {
        let t = &self.nodes[x.0].tensor;
        let (h, w, c) = dims3(t, "crop_hw")?;
        if new_h > h || new_w > w {
            return Err(SalgError::InvalidShape {
                op: "crop_hw",
                shape: t.shape().to_vec(),
                detail: format!("target {new_h}x{new_w} larger than input"),
            });
        }
        let dx = t.data();
        let mut out = vec![0.0; new_h * new_w * c];
        par::for_each_chunk_mut(&mut out, new_w * c, |i, chunk| {
            chunk.copy_from_slice(&dx[i * w * c..i * w * c + new_w * c]);
        });
        let rg = self.req(x);
        Ok(self.push(Tensor::new(vec![new_h, new_w, c], out)?, Op::CropHw(x), rg, None))
    }

    /// Folds each 2x2 neighborhood of an `[H, W, C]` map (row-major order
    /// within the neighborhood) into channels: `[H/2, W/2, 4C]`.
    pub fn space_to_depth2(&mut self, x: Value) -> Result<Value> {
        let t = &self.nodes[x.0].tensor;
        let (h, w, c) = dims3(t, "space_to_depth2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(SalgError::InvalidShape {
                op: "space_to_depth2",
                shape: t.shape().to_vec(),
                detail: "H and W must be even (pad first)".into(),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let dx = t.data();
        let mut out = vec![0.0; oh * ow * 4 * c];
        par::for_each_chunk_mut(&mut out, 4 * c, |pos, chunk| {
            let (i, j) = (pos / ow, pos % ow);
            for dy in 0..2 {
                for dcx in 0..2 {
                    let q = dy * 2 + dcx;
                    let src = ((2 * i + dy) * w + 2 * j + dcx) * c;
                    chunk[q * c..(q + 1) * c].copy_from_slice(&dx[src..src + c]);
                }
            }
        });
        let rg = self.req(x);
        Ok(self.push(Tensor::new(vec![oh, ow, 4 * c], out)?, Op::SpaceToDepth2(x), rg, None))
    }

    /// Softmax cross-entropy of a rank-1 logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: Value, target: usize) -> Result<Value> {
        let t = &self.nodes[logits.0].tensor;
        if t.shape().len() != 1 || target >= t.shape()[0] {
            return Err(SalgError::InvalidShape {
                op: "cross_entropy",
                shape: t.shape().to_vec(),
                detail: format!("target {target} for rank-1 logits"),
            });
        }
        let xs = t.data();
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss = lse - xs[target];
        let rg = self.req(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target }, rg, None))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar `loss`. Returns per-node gradients; use
    /// [`Graph::accumulate_param_grads`] to fold them into a store.
    pub fn backward(&self, loss: Value) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].tensor;
        if !lt.is_scalar() {
            return Err(SalgError::NonScalarLoss { shape: lt.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().expect("checked above");
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradients of parameter-bound nodes into `store`, in node
    /// order (deterministic).
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, grads.grads[id].as_ref()) {
                store.accumulate_grad(pid, g);
            }
        }
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Value, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        match slot {
            Some(g) => {
                debug_assert_eq!(g.len(), delta.len());
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g);
                self.accum(grads, *b, g);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.nodes[a.0].tensor.data(), self.nodes[b.0].tensor.data());
                if self.req(*a) {
                    let d: Vec<f64> = g.iter().zip(db).map(|(gi, bi)| gi * bi).collect();
                    self.accum(grads, *a, &d);
                }
                if self.req(*b) {
                    let d: Vec<f64> = g.iter().zip(da).map(|(gi, ai)| gi * ai).collect();
                    self.accum(grads, *b, &d);
                }
            }
            Op::Scale(x, c) => {
                if self.req(*x) {
                    let d: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                    self.accum(grads, *x, &d);
                }
            }
            Op::AddBias(x, b) => {
                if self.req(*x) {
                    self.accum(grads, *x, g);
                }
                if self.req(*b) {
                    let c = self.nodes[b.0].tensor.numel();
                    let rows = g.len() / c;
                    let mut d = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            d[j] += g[r * c + j];
                        }
                    }
                    self.accum(grads, *b, &d);
                }
            }
            Op::Matmul(a, b) => self.backward_matmul(*a, *b, g, grads),
            Op::Softmax(x, axis) => {
                if self.req(*x) {
                    let y = self.nodes[id].tensor.data();
                    let shape = self.nodes[id].tensor.shape();
                    let dim = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let block = dim * inner;
                    let mut d = vec![0.0; g.len()];
                    par::for_each_chunk_mut(&mut d, block, |outer, chunk| {
                        let base = outer * block;
                        for off in 0..inner {
                            let mut dot = 0.0;
                            for r in 0..dim {
                                let i = base + r * inner + off;
                                dot += y[i] * g[i];
                            }
                            for r in 0..dim {
                                let i = base + r * inner + off;
                                chunk[r * inner + off] = y[i] * (g[i] - dot);
                            }
                        }
                    });
                    self.accum(grads, *x, &d);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                self.backward_layer_norm(*x, *gamma, *beta, *eps, g, grads)
            }
            Op::Gelu(x) => {
                if self.req(*x) {
                    let dx = self.nodes[x.0].tensor.data();
                    let mut d = vec![0.0; g.len()];
                    par::for_each_chunk_mut(&mut d, 4096, |ci, chunk| {
                        let base = ci * 4096;
                        for (i, o) in chunk.iter_mut().enumerate() {
                            let v = dx[base + i];
                            let u = GELU_A * (v + GELU_B * v * v * v);
                            let t = u.tanh();
                            let du = GELU_A * (1.0 + 3.0 * GELU_B * v * v);
                            *o = g[base + i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                        }
                    });
                    self.accum(grads, *x, &d);
                }
            }
            Op::Sin(x) => {
                if self.req(*x) {
                    let dx = self.nodes[x.0].tensor.data();
                    let d: Vec<f64> = g.iter().zip(dx).map(|(gi, xi)| gi * xi.cos()).collect();
                    self.accum(grads, *x, &d);
                }
            }
            Op::Conv2d { x, w, stride, padding } => {
                self.backward_conv2d(*x, *w, *stride, *padding, id, g, grads)
            }
            Op::Reshape(x) => self.accum(grads, *x, g),
            Op::Permute { x, axes } => {
                if self.req(*x) {
                    let mut inverse = vec![0usize; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let d = permute_data(g, self.nodes[id].tensor.shape(), &inverse);
                    self.accum(grads, *x, &d);
                }
            }
            Op::Sum(x) => {
                if self.req(*x) {
                    let d = vec![g[0]; self.nodes[x.0].tensor.numel()];
                    self.accum(grads, *x, &d);
                }
            }
            Op::MeanAxis0(x) => {
                if self.req(*x) {
                    let n = self.nodes[x.0].tensor.shape()[0];
                    let rest = g.len();
                    let scale = 1.0 / n as f64;
                    let mut d = vec![0.0; n * rest];
                    par::for_each_chunk_mut(&mut d, rest, |_, chunk| {
                        for (j, o) in chunk.iter_mut().enumerate() {
                            *o = g[j] * scale;
                        }
                    });
                    self.accum(grads, *x, &d);
                }
            }
            Op::RepeatRows { x, n } => {
                if self.req(*x) {
                    let rest = self.nodes[x.0].tensor.numel();
                    let mut d = vec![0.0; rest];
                    for r in 0..*n {
                        for j in 0..rest {
                            d[j] += g[r * rest + j];
                        }
                    }
                    self.accum(grads, *x, &d);
                }
            }
            Op::MulSlotMask { x, mask } => {
                if self.req(*x) {
                    let c = self.nodes[x.0].tensor.shape()[2];
                    let mut d = vec![0.0; g.len()];
                    par::for_each_chunk_mut(&mut d, c, |slot, chunk| {
                        if mask[slot] {
                            chunk.copy_from_slice(&g[slot * c..(slot + 1) * c]);
                        }
                    });
                    self.accum(grads, *x, &d);
                }
            }
            Op::AttnKeyMask { x, mask } => {
                if self.req(*x) {
                    let s = self.nodes[x.0].tensor.shape();
                    let (heads, l) = (s[1], s[3]);
                    let mut d = vec![0.0; g.len()];
                    par::for_each_chunk_mut(&mut d, l, |row, chunk| {
                        let k = row / (heads * l);
                        let base = row * l;
                        for (j, o) in chunk.iter_mut().enumerate() {
                            if mask[k * l + j] {
                                *o = g[base + j];
                            }
                        }
                    });
                    self.accum(grads, *x, &d);
                }
            }
            Op::AddRelPosBias { x, table, index } => {
                if self.req(*x) {
                    self.accum(grads, *x, g);
                }
                if self.req(*table) {
                    let s = self.nodes[x.0].tensor.shape();
                    let (k, heads, l) = (s[0], s[1], s[2]);
                    let rows = self.nodes[table.0].tensor.shape()[0];
                    let mut d = vec![0.0; rows * heads];
                    // One task per head column; each sums its own strided
                    // entries in fixed (k, i, j) order.
                    let cols: Vec<Vec<f64>> = par::map_indexed(heads, |h| {
                        let mut col = vec![0.0; rows];
                        for ki in 0..k {
                            let base = (ki * heads + h) * l * l;
                            for ij in 0..l * l {
                                col[index[ij]] += g[base + ij];
                            }
                        }
                        col
                    });
                    for (h, col) in cols.iter().enumerate() {
                        for (r, v) in col.iter().enumerate() {
                            d[r * heads + h] = *v;
                        }
                    }
                    self.accum(grads, *table, &d);
                }
            }
            Op::GatherRegions { map, agr, plan } => {
                let c = self.nodes[map.0].tensor.shape()[2];
                if self.req(*map) {
                    let p = Arc::clone(plan);
                    let mut d = vec![0.0; plan.height * plan.width * c];
                    par::for_each_chunk_mut(&mut d, c, |token, chunk| {
                        let start = p.reader_offsets[token];
                        let end = p.reader_offsets[token + 1];
                        for &slot in &p.reader_slots[start..end] {
                            let base = slot * c;
                            for (o, &gv) in chunk.iter_mut().zip(&g[base..base + c]) {
                                *o += gv;
                            }
                        }
                    });
                    self.accum(grads, *map, &d);
                }
                if self.req(*agr) {
                    let slots = plan.slots;
                    let mut d = vec![0.0; plan.regions * c];
                    par::for_each_chunk_mut(&mut d, c, |k, chunk| {
                        chunk.copy_from_slice(&g[k * slots * c..k * slots * c + c]);
                    });
                    self.accum(grads, *agr, &d);
                }
            }
            Op::ScatterRegions { batch, plan } => {
                if self.req(*batch) {
                    let c = self.nodes[batch.0].tensor.shape()[2];
                    let p = Arc::clone(plan);
                    let width = plan.width;
                    let mut d = vec![0.0; self.nodes[batch.0].tensor.numel()];
                    par::for_each_chunk_mut(&mut d, c, |slot, chunk| {
                        let l = slot % p.slots;
                        if l == 0 || !p.slot_mask[slot] {
                            return;
                        }
                        if let Some((r, cc)) = p.slot_origin[slot] {
                            let base = (r * width + cc) * c;
                            chunk.copy_from_slice(&g[base..base + c]);
                        }
                    });
                    self.accum(grads, *batch, &d);
                }
            }
            Op::Slot0(batch) => {
                if self.req(*batch) {
                    let s = self.nodes[batch.0].tensor.shape();
                    let (l, c) = (s[1], s[2]);
                    let mut d = vec![0.0; self.nodes[batch.0].tensor.numel()];
                    par::for_each_chunk_mut(&mut d, l * c, |k, chunk| {
                        chunk[..c].copy_from_slice(&g[k * c..(k + 1) * c]);
                    });
                    self.accum(grads, *batch, &d);
                }
            }
            Op::PadHw(x) => {
                if self.req(*x) {
                    let (h, w, c) = dims3(&self.nodes[x.0].tensor, "pad_hw").expect("validated");
                    let ow = self.nodes[id].tensor.shape()[1];
                    let mut d = vec![0.0; h * w * c];
                    par::for_each_chunk_mut(&mut d, w * c, |i, chunk| {
                        chunk.copy_from_slice(&g[i * ow * c..i * ow * c + w * c]);
                    });
                    self.accum(grads, *x, &d);
                }
            }
            Op::CropHw(x) => {
                if self.req(*x) {
                    let (h, w, c) = dims3(&self.nodes[x.0].tensor, "crop_hw").expect("validated");
                    let s = self.nodes[id].tensor.shape();
                    let (nh, nw) = (s[0], s[1]);
                    let mut d = vec![0.0; h * w * c];
                    par::for_each_chunk_mut(&mut d, w * c, |i, chunk| {
                        if i < nh {
                            chunk[..nw * c].copy_from_slice(&g[i * nw * c..(i + 1) * nw * c]);
                        }
                    });
                    self.accum(grads, *x, &d);
                }
            }
            Op::SpaceToDepth2(x) => {
                if self.req(*x) {
                    let (h, w, c) = dims3(&self.nodes[x.0].tensor, "space_to_depth2").expect("validated");
                    let ow = w / 2;
                    let mut d = vec![0.0; h * w * c];
                    par::for_each_chunk_mut(&mut d, w * c, |u, chunk| {
                        let (i, dy) = (u / 2, u % 2);
                        for j in 0..ow {
                            for dcx in 0..2 {
                                let q = dy * 2 + dcx;
                                let src = ((i * ow + j) * 4 + q) * c;
                                let dst = (2 * j + dcx) * c;
                                chunk[dst..dst + c].copy_from_slice(&g[src..src + c]);
                            }
                        }
                    });
                    self.accum(grads, *x, &d);
                }
            }
            Op::CrossEntropy { logits, target } => {
                if self.req(*logits) {
                    let xs = self.nodes[logits.0].tensor.data();
                    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = xs.iter().map(|v| (v - m).exp()).sum();
                    let mut d: Vec<f64> =
                        xs.iter().map(|v| (v - m).exp() / denom * g[0]).collect();
                    d[*target] -= g[0];
                    self.accum(grads, *logits, &d);
                }
            }
        }
    }

    fn backward_matmul(&self, a: Value, b: Value, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        let spec = MatmulSpec::resolve(ta.shape(), tb.shape()).expect("validated in forward");
        let (m, k, n) = (spec.m, spec.k, spec.n);
        let (da, db) = (ta.data(), tb.data());
        if self.req(a) {
            // dA[ai, i, :] = sum over out-batches projecting to ai of G·B^T.
            let a_batches = spec.a_batch();
            let proj = spec.projection_lists(|bi| spec.project(bi, &spec.a_lead), a_batches);
            let mut d = vec![0.0; ta.numel()];
            par::for_each_chunk_mut(&mut d, k, |row, chunk| {
                let (ai, i) = (row / m, row % m);
                for &bi in &proj[ai] {
                    let g_row = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                    let b_base = spec.b_offset(bi);
                    for (kk, o) in chunk.iter_mut().enumerate() {
                        let b_row = &db[b_base + kk * n..b_base + (kk + 1) * n];
                        let mut s = 0.0;
                        for (gv, bv) in g_row.iter().zip(b_row) {
                            s += gv * bv;
                        }
                        *o += s;
                    }
                }
            });
            self.accum(grads, a, &d);
        }
        if self.req(b) {
            let b_batches = spec.b_batch();
            let proj = spec.projection_lists(|bi| spec.project(bi, &spec.b_lead), b_batches);
            let mut d = vec![0.0; tb.numel()];
            par::for_each_chunk_mut(&mut d, n, |row, chunk| {
                let (bbi, kk) = (row / k, row % k);
                for &bi in &proj[bbi] {
                    let a_base = spec.a_offset(bi);
                    for i in 0..m {
                        let av = da[a_base + i * k + kk];
                        if av == 0.0 {
                            continue;
                        }
                        let g_row = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                        for (o, &gv) in chunk.iter_mut().zip(g_row) {
                            *o += av * gv;
                        }
                    }
                }
            });
            self.accum(grads, b, &d);
        }
    }

    fn backward_layer_norm(
        &self,
        x: Value,
        gamma: Value,
        beta: Value,
        eps: f64,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let tx = &self.nodes[x.0].tensor;
        let c = *tx.shape().last().expect("validated");
        let rows = tx.numel() / c;
        let (dx_in, dg_in) = (tx.data(), self.nodes[gamma.0].tensor.data());
        if self.req(x) {
            let mut d = vec![0.0; tx.numel()];
            par::for_each_chunk_mut(&mut d, c, |row, chunk| {
                let xs = &dx_in[row * c..(row + 1) * c];
                let gr = &g[row * c..(row + 1) * c];
                let (mu, inv) = layer_norm_stats(xs, eps);
                let cn = c as f64;
                let mut sum_dxh = 0.0;
                let mut sum_dxh_xh = 0.0;
                for j in 0..c {
                    let xh = (xs[j] - mu) * inv;
                    let dxh = gr[j] * dg_in[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                }
                for j in 0..c {
                    let xh = (xs[j] - mu) * inv;
                    let dxh = gr[j] * dg_in[j];
                    chunk[j] = inv * (dxh - sum_dxh / cn - xh * sum_dxh_xh / cn);
                }
            });
            self.accum(grads, x, &d);
        }
        if self.req(gamma) {
            let mut d = vec![0.0; c];
            par::for_each_chunk_mut(&mut d, 64, |ci, chunk| {
                let base = ci * 64;
                for (jj, o) in chunk.iter_mut().enumerate() {
                    let j = base + jj;
                    let mut s = 0.0;
                    for row in 0..rows {
                        let xs = &dx_in[row * c..(row + 1) * c];
                        let (mu, inv) = layer_norm_stats(xs, eps);
                        s += g[row * c + j] * (xs[j] - mu) * inv;
                    }
                    *o = s;
                }
            });
            self.accum(grads, gamma, &d);
        }
        if self.req(beta) {
            let mut d = vec![0.0; c];
            for row in 0..rows {
                for j in 0..c {
                    d[j] += g[row * c + j];
                }
            }
            self.accum(grads, beta, &d);
        }
    }

    fn backward_conv2d(
        &self,
        x: Value,
        w: Value,
        stride: usize,
        padding: usize,
        id: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tx, tw) = (&self.nodes[x.0].tensor, &self.nodes[w.0].tensor);
        let (h, wid, cin) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cout, _, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        let os = self.nodes[id].tensor.shape();
        let (oh, ow) = (os[0], os[1]);
        if self.req(x) {
            let wt = relayout_kernel(tw.data(), cout, cin, kh, kw);
            let mut d = vec![0.0; tx.numel()];
            par::for_each_chunk_mut(&mut d, wid * cin, |u, chunk| {
                for ki in 0..kh {
                    let inum = u as isize + padding as isize - ki as isize;
                    if inum < 0 || inum % stride as isize != 0 {
                        continue;
                    }
                    let i = (inum / stride as isize) as usize;
                    if i >= oh {
                        continue;
                    }
                    for v in 0..wid {
                        for kj in 0..kw {
                            let jnum = v as isize + padding as isize - kj as isize;
                            if jnum < 0 || jnum % stride as isize != 0 {
                                continue;
                            }
                            let j = (jnum / stride as isize) as usize;
                            if j >= ow {
                                continue;
                            }
                            let g_row = &g[(i * ow + j) * cout..(i * ow + j + 1) * cout];
                            let wb = ((ki * kw + kj) * cin) * cout;
                            for c in 0..cin {
                                let wrow = &wt[wb + c * cout..wb + (c + 1) * cout];
                                let mut s = 0.0;
                                for (gv, wv) in g_row.iter().zip(wrow) {
                                    s += gv * wv;
                                }
                                chunk[v * cin + c] += s;
                            }
                        }
                    }
                }
            });
            self.accum(grads, x, &d);
        }
        if self.req(w) {
            let dx = tx.data();
            let mut d = vec![0.0; tw.numel()];
            par::for_each_chunk_mut(&mut d, cin * kh * kw, |o, chunk| {
                for i in 0..oh {
                    for j in 0..ow {
                        let gv = g[(i * ow + j) * cout + o];
                        if gv == 0.0 {
                            continue;
                        }
                        for ki in 0..kh {
                            let u = (i * stride + ki) as isize - padding as isize;
                            if u < 0 || u >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let v = (j * stride + kj) as isize - padding as isize;
                                if v < 0 || v >= wid as isize {
                                    continue;
                                }
                                let xb = (u as usize * wid + v as usize) * cin;
                                for c in 0..cin {
                                    chunk[(c * kh + ki) * kw + kj] += gv * dx[xb + c];
                                }
                            }
                        }
                    }
                }
            });
            self.accum(grads, w, &d);
        }
    }
}

fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    if t.shape().len() != 3 {
        return Err(SalgError::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            detail: "expected rank 3".into(),
        });
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

fn layer_norm_stats(xs: &[f64], eps: f64) -> (f64, f64) {
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

/// One softmax lane at stride `inner` within an output block.
fn softmax_lane(src: &[f64], dst: &mut [f64], off: usize, inner: usize, dim: usize) {
    let mut m = f64::NEG_INFINITY;
    for r in 0..dim {
        m = m.max(src[r * inner + off]);
    }
    if m == f64::NEG_INFINITY {
        for r in 0..dim {
            dst[r * inner + off] = 0.0;
        }
        return;
    }
    let mut denom = 0.0;
    for r in 0..dim {
        let e = (src[r * inner + off] - m).exp();
        dst[r * inner + off] = e;
        denom += e;
    }
    for r in 0..dim {
        dst[r * inner + off] /= denom;
    }
}

/// Deterministic blocked sum: fixed 1024-wide blocks reduced left to right.
fn blocked_sum(xs: &[f64]) -> f64 {
    let partials = par::map_indexed(xs.len().div_ceil(1024), |b| {
        xs[b * 1024..((b + 1) * 1024).min(xs.len())].iter().sum::<f64>()
    });
    partials.iter().sum()
}

fn permute_data(src: &[f64], src_shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = axes.iter().map(|&a| src_shape[a]).collect();
    let src_strides = strides_of(src_shape);
    let out_strides = strides_of(&out_shape);
    let last = *out_shape.last().unwrap_or(&1);
    let mut out = vec![0.0; src.len()];
    par::for_each_chunk_mut(&mut out, last.max(1), |row, chunk| {
        let base = row * last.max(1);
        for (i, o) in chunk.iter_mut().enumerate() {
            let flat = base + i;
            let mut src_idx = 0;
            for (d, &os) in out_strides.iter().enumerate() {
                let coord = (flat / os) % out_shape[d];
                src_idx += coord * src_strides[axes[d]];
            }
            *o = src[src_idx];
        }
    });
    out
}

/// Resolved geometry of a broadcasted batched matmul.
struct MatmulSpec {
    lead: Vec<usize>,
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
    a_lead: Vec<usize>,
    b_lead: Vec<usize>,
}

impl MatmulSpec {
    fn resolve(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(SalgError::ShapeMismatch { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() });
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(SalgError::ShapeMismatch { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() });
        }
        let a_lead = a[..a.len() - 2].to_vec();
        let b_lead = b[..b.len() - 2].to_vec();
        let rank = a_lead.len().max(b_lead.len());
        let mut lead = vec![0usize; rank];
        for d in 0..rank {
            let da = dim_at(&a_lead, d, rank);
            let dbv = dim_at(&b_lead, d, rank);
            if da != dbv && da != 1 && dbv != 1 {
                return Err(SalgError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                });
            }
            lead[d] = da.max(dbv);
        }
        let batch = lead.iter().product::<usize>().max(1);
        Ok(MatmulSpec { lead, m, k, n, batch, a_lead, b_lead })
    }

    fn project(&self, bi: usize, side_lead: &[usize]) -> usize {
        let rank = self.lead.len();
        let off = rank - side_lead.len();
        let mut coords = vec![0usize; rank];
        let mut rem = bi;
        for d in (0..rank).rev() {
            coords[d] = rem % self.lead[d];
            rem /= self.lead[d];
        }
        let mut idx = 0;
        for (d, &sd) in side_lead.iter().enumerate() {
            let c = if sd == 1 { 0 } else { coords[d + off] };
            idx = idx * sd + c;
        }
        idx
    }

    fn a_offset(&self, bi: usize) -> usize {
        self.project(bi, &self.a_lead) * self.m * self.k
    }

    fn b_offset(&self, bi: usize) -> usize {
        self.project(bi, &self.b_lead) * self.k * self.n
    }

    fn a_batch(&self) -> usize {
        self.a_lead.iter().product::<usize>().max(1)
    }

    fn b_batch(&self) -> usize {
        self.b_lead.iter().product::<usize>().max(1)
    }

    /// For each side-batch index, the list of output batches mapping to it.
    fn projection_lists(&self, proj: impl Fn(usize) -> usize, side_batches: usize) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); side_batches];
        for bi in 0..self.batch {
            lists[proj(bi)].push(bi);
        }
        lists
    }
}

fn dim_at(lead: &[usize], d: usize, rank: usize) -> usize {
    let off = rank - lead.len();
    if d < off {
        1
    } else {
        lead[d - off]
    }
}

/// Relays a `[cout, cin, kh, kw]` kernel as `[kh, kw, cin, cout]` so the
/// convolution inner loop runs contiguously over output channels.
fn relayout_kernel(w: &[f64], cout: usize, cin: usize, kh: usize, kw: usize) -> Vec<f64> {
    let mut wt = vec![0.0; w.len()];
    for o in 0..cout {
        for c in 0..cin {
            for ki in 0..kh {
                for kj in 0..kw {
                    wt[(((ki * kw + kj) * cin) + c) * cout + o] =
                        w[((o * cin + c) * kh + ki) * kw + kj];
                }
            }
        }
    }
    wt
}
