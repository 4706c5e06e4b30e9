//! The local-global transformer block: masked intra-region multi-head
//! self-attention with AGR tokens and relative position bias, plus the two
//! inter-region propagation schemes (MSA and averaging pooling).

use std::sync::Arc;

use crate::config::Propagation;
use crate::error::{Result, SalgError};
use crate::segmentation::RegionPlan;
use crate::tensor::{Graph, Initializer, ParamId, ParamStore, Value};

/// Variance epsilon of every layer norm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn register(store: &mut ParamStore, init: &mut Initializer, prefix: &str, dim: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gamma: store.register(&format!("{prefix}.gamma"), init.ones(vec![dim]))?,
            beta: store.register(&format!("{prefix}.beta"), init.zeros(vec![dim]))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Value) -> Result<Value> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Projection weights of one multi-head attention layer. `bias_table` is the
/// relative-position table (`None` for the inter-region MSA, which carries no
/// positional information).
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub bias_table: Option<ParamId>,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionParams {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Initializer,
        prefix: &str,
        dim: usize,
        heads: usize,
        bias_rows: Option<usize>,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(SalgError::Usage(format!(
                "attention at {prefix}: dim {dim} not divisible by {heads} heads"
            )));
        }
        let w = |store: &mut ParamStore, init: &mut Initializer, name: &str| {
            store.register(&format!("{prefix}.{name}"), init.weight(vec![dim, dim]))
        };
        let b = |store: &mut ParamStore, init: &mut Initializer, name: &str| {
            store.register(&format!("{prefix}.{name}"), init.zeros(vec![dim]))
        };
        let wq = w(store, init, "wq")?;
        let bq = b(store, init, "bq")?;
        let wk = w(store, init, "wk")?;
        let bk = b(store, init, "bk")?;
        let wv = w(store, init, "wv")?;
        let bv = b(store, init, "bv")?;
        let wo = w(store, init, "wo")?;
        let bo = b(store, init, "bo")?;
        let bias_table = match bias_rows {
            Some(rows) => Some(
                store.register(&format!("{prefix}.rel_bias"), init.weight(vec![rows, heads]))?,
            ),
            None => None,
        };
        Ok(AttentionParams { wq, bq, wk, bk, wv, bv, wo, bo, bias_table, heads, head_dim: dim / heads })
    }
}

/// Two-layer MLP with GELU and 4x expansion.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpParams {
    pub fn register(store: &mut ParamStore, init: &mut Initializer, prefix: &str, dim: usize) -> Result<Self> {
        let hidden = 4 * dim;
        Ok(MlpParams {
            w1: store.register(&format!("{prefix}.w1"), init.weight(vec![dim, hidden]))?,
            b1: store.register(&format!("{prefix}.b1"), init.zeros(vec![hidden]))?,
            w2: store.register(&format!("{prefix}.w2"), init.weight(vec![hidden, dim]))?,
            b2: store.register(&format!("{prefix}.b2"), init.zeros(vec![dim]))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Value) -> Result<Value> {
        let h = linear(g, store, self.w1, self.b1, x)?;
        let h = g.gelu(h);
        linear(g, store, self.w2, self.b2, h)
    }
}

/// Inter-region MSA propagation weights (pre-LN attention + MLP, Eq.-3
/// style, no positional bias).
#[derive(Clone, Debug)]
pub struct PropagationParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

impl PropagationParams {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Initializer,
        prefix: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(PropagationParams {
            ln1: LayerNormParams::register(store, init, &format!("{prefix}.ln1"), dim)?,
            attn: AttentionParams::register(store, init, &format!("{prefix}.attn"), dim, heads, None)?,
            ln2: LayerNormParams::register(store, init, &format!("{prefix}.ln2"), dim)?,
            mlp: MlpParams::register(store, init, &format!("{prefix}.mlp"), dim)?,
        })
    }
}

/// All weights of one local-global transformer block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
    /// Present only under the MSA propagation variant.
    pub prop: Option<PropagationParams>,
}

impl BlockParams {
    pub fn register(
        store: &mut ParamStore,
        init: &mut Initializer,
        prefix: &str,
        dim: usize,
        heads: usize,
        bias_rows: usize,
        with_prop: bool,
    ) -> Result<Self> {
        let ln1 = LayerNormParams::register(store, init, &format!("{prefix}.ln1"), dim)?;
        let attn =
            AttentionParams::register(store, init, &format!("{prefix}.attn"), dim, heads, Some(bias_rows))?;
        let ln2 = LayerNormParams::register(store, init, &format!("{prefix}.ln2"), dim)?;
        let mlp = MlpParams::register(store, init, &format!("{prefix}.mlp"), dim)?;
        let prop = if with_prop {
            Some(PropagationParams::register(store, init, &format!("{prefix}.prop"), dim, heads)?)
        } else {
            None
        };
        Ok(BlockParams { ln1, attn, ln2, mlp, prop })
    }
}

/// Attention layout shared by a whole stage: masking and the relative
/// position index of its coverage geometry.
#[derive(Clone, Debug)]
pub struct AttentionGeometry {
    /// Keys each query may attend to (`None`: all).
    pub key_mask: Option<Arc<Vec<bool>>>,
    /// `L*L` map from (query, key) slot pair to bias-table row (`None`: no
    /// positional bias).
    pub bias_index: Option<Arc<Vec<usize>>>,
}

impl AttentionGeometry {
    pub fn unrestricted() -> Self {
        AttentionGeometry { key_mask: None, bias_index: None }
    }

    /// Geometry of an intra-region batch: the plan's slot mask plus the
    /// AGR-aware bias index for its coverage side.
    pub fn for_plan(plan: &RegionPlan) -> Self {
        AttentionGeometry {
            key_mask: Some(Arc::clone(&plan.slot_mask)),
            bias_index: Some(Arc::new(agr_bias_index(plan.side).0)),
        }
    }
}

/// Bias-table row count for a coverage area of side `s` with an AGR slot:
/// all (2s-1)^2 grid offsets plus dedicated AGR-to-token, token-to-AGR and
/// AGR-to-AGR rows.
pub fn agr_bias_rows(side: usize) -> usize {
    let span = 2 * side - 1;
    span * span + 3
}

/// Row index per (query, key) slot pair for an AGR-headed coverage batch of
/// side `s` (L = s*s + 1 slots, slot 0 = AGR). Returns the index map and the
/// table row count.
pub fn agr_bias_index(side: usize) -> (Vec<usize>, usize) {
    let span = 2 * side - 1;
    let grid_rows = span * span;
    let l = side * side + 1;
    let mut idx = vec![0usize; l * l];
    for i in 0..l {
        for j in 0..l {
            idx[i * l + j] = match (i, j) {
                (0, 0) => grid_rows + 2,
                (0, _) => grid_rows,
                (_, 0) => grid_rows + 1,
                (i, j) => {
                    let (yi, xi) = ((i - 1) / side, (i - 1) % side);
                    let (yj, xj) = ((j - 1) / side, (j - 1) % side);
                    let dy = yi + side - 1 - yj;
                    let dx = xi + side - 1 - xj;
                    dy * span + dx
                }
            };
        }
    }
    (idx, grid_rows + 3)
}

/// Bias layout for a plain `h x w` token grid (no AGR slot); used by the
/// final stage's global attention.
pub fn grid_bias_index(h: usize, w: usize) -> (Vec<usize>, usize) {
    let (span_y, span_x) = (2 * h - 1, 2 * w - 1);
    let n = h * w;
    let mut idx = vec![0usize; n * n];
    for i in 0..n {
        for j in 0..n {
            let dy = i / w + h - 1 - j / w;
            let dx = i % w + w - 1 - j % w;
            idx[i * n + j] = dy * span_x + dx;
        }
    }
    (idx, span_y * span_x)
}

pub fn linear(g: &mut Graph, store: &ParamStore, w: ParamId, b: ParamId, x: Value) -> Result<Value> {
    let wv = g.param(store, w);
    let bv = g.param(store, b);
    let y = g.matmul(x, wv)?;
    g.add_bias(y, bv)
}

/// Output of one attention layer; `probs` exposes the post-softmax weights
/// (`[K, H, L, L]`) for invariant tests.
pub struct AttentionOutput {
    pub out: Value,
    pub probs: Value,
}

/// Multi-head self-attention over `[K, L, C]` with optional key masking and
/// relative position bias. Scaled by 1/sqrt(head_dim).
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttentionParams,
    x: Value,
    geom: &AttentionGeometry,
) -> Result<AttentionOutput> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(SalgError::InvalidShape {
            op: "multi_head_attention",
            shape,
            detail: "expected [K, L, C]".into(),
        });
    }
    let (k, l, c) = (shape[0], shape[1], shape[2]);
    let (heads, hd) = (p.heads, p.head_dim);

    let split = |g: &mut Graph, v: Value| -> Result<Value> {
        let v = g.reshape(v, vec![k, l, heads, hd])?;
        g.permute(v, vec![0, 2, 1, 3])
    };
    let q = linear(g, store, p.wq, p.bq, x)?;
    let kk = linear(g, store, p.wk, p.bk, x)?;
    let v = linear(g, store, p.wv, p.bv, x)?;
    let qh = split(g, q)?;
    let kh = split(g, kk)?;
    let vh = split(g, v)?;
    let kt = g.permute(kh, vec![0, 1, 3, 2])?;
    let logits = g.matmul(qh, kt)?;
    let mut logits = g.scale(logits, 1.0 / (hd as f64).sqrt());
    if let (Some(table), Some(index)) = (p.bias_table, geom.bias_index.as_ref()) {
        let table = g.param(store, table);
        logits = g.add_rel_pos_bias(logits, table, Arc::clone(index))?;
    }
    if let Some(mask) = geom.key_mask.as_ref() {
        logits = g.attn_key_mask(logits, Arc::clone(mask))?;
    }
    let probs = g.softmax(logits, 3)?;
    let ctx = g.matmul(probs, vh)?;
    let merged = g.permute(ctx, vec![0, 2, 1, 3])?;
    let merged = g.reshape(merged, vec![k, l, c])?;
    let out = linear(g, store, p.wo, p.bo, merged)?;
    Ok(AttentionOutput { out, probs })
}

/// Pre-LN transformer block over gathered region batches: masked attention
/// with residual, then MLP with residual. Null slots are zeroed on entry
/// (the paper's `F ⊙ M`) and on exit, so they never leak through scatter.
pub fn intra_region_attention(
    g: &mut Graph,
    store: &ParamStore,
    p: &BlockParams,
    x: Value,
    plan: &RegionPlan,
) -> Result<Value> {
    let geom = AttentionGeometry::for_plan(plan);
    let x = g.mul_slot_mask(x, Arc::clone(&plan.slot_mask))?;
    let h = p.ln1.apply(g, store, x)?;
    let attn = multi_head_attention(g, store, &p.attn, h, &geom)?;
    let x = g.add(x, attn.out)?;
    let h = p.ln2.apply(g, store, x)?;
    let m = p.mlp.apply(g, store, h)?;
    let x = g.add(x, m)?;
    g.mul_slot_mask(x, Arc::clone(&plan.slot_mask))
}

/// Inter-region propagation by multi-head self-attention over the `[K, C]`
/// AGR tokens (pre-LN attention + residual, pre-LN MLP + residual). The AGR
/// set has no spatial order, so no positional bias is applied.
pub fn inter_region_msa(
    g: &mut Graph,
    store: &ParamStore,
    p: &PropagationParams,
    agr: Value,
) -> Result<Value> {
    let shape = g.shape(agr).to_vec();
    if shape.len() != 2 {
        return Err(SalgError::InvalidShape {
            op: "inter_region_msa",
            shape,
            detail: "expected [K, C]".into(),
        });
    }
    let (k, c) = (shape[0], shape[1]);
    let x = g.reshape(agr, vec![1, k, c])?;
    let geom = AttentionGeometry::unrestricted();
    let h = p.ln1.apply(g, store, x)?;
    let attn = multi_head_attention(g, store, &p.attn, h, &geom)?;
    let x = g.add(x, attn.out)?;
    let h = p.ln2.apply(g, store, x)?;
    let m = p.mlp.apply(g, store, h)?;
    let x = g.add(x, m)?;
    g.reshape(x, vec![k, c])
}

/// Inter-region propagation by averaging pooling: the mean AGR vector
/// replaces every region's AGR token. Parameter-free, no residual.
pub fn inter_region_ap(g: &mut Graph, agr: Value) -> Result<Value> {
    let shape = g.shape(agr).to_vec();
    if shape.len() != 2 {
        return Err(SalgError::InvalidShape {
            op: "inter_region_ap",
            shape,
            detail: "expected [K, C]".into(),
        });
    }
    let mean = g.mean_axis0(agr)?;
    g.repeat_rows(mean, shape[0])
}

/// One full local-global block: gather the map into region batches with the
/// current AGR tokens, run masked intra-region attention, scatter the result
/// back, and propagate the refined AGR tokens for the next block.
pub fn local_global_block(
    g: &mut Graph,
    store: &ParamStore,
    p: &BlockParams,
    map: Value,
    agr: Value,
    plan: &Arc<RegionPlan>,
    mode: Propagation,
) -> Result<(Value, Value)> {
    let batch = g.gather_regions(map, agr, Arc::clone(plan))?;
    let refined = intra_region_attention(g, store, p, batch, plan)?;
    let new_map = g.scatter_regions(refined, Arc::clone(plan))?;
    let agr_out = g.slot0(refined)?;
    let new_agr = match mode {
        Propagation::Msa => {
            let prop = p.prop.as_ref().ok_or_else(|| {
                SalgError::Usage("propagation mode msa without MSA weights".into())
            })?;
            inter_region_msa(g, store, prop, agr_out)?
        }
        Propagation::Ap => inter_region_ap(g, agr_out)?,
        Propagation::None => agr_out,
    };
    Ok((new_map, new_agr))
}

/// Attended query-key pairs of one layer at a stage geometry: K regions of
/// L slots each, plus the K x K propagation block under MSA.
pub fn interaction_pairs(regions: usize, slots: usize, msa: bool) -> u128 {
    let (k, l) = (regions as u128, slots as u128);
    k * l * l + if msa { k * k } else { 0 }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agr_bias_index_dedicated_rows() {
        let side = 3;
        let (idx, rows) = agr_bias_index(side);
        let l = side * side + 1;
        assert_eq!(rows, 25 + 3);
        assert_eq!(idx[0], 27); // AGR -> AGR
        assert_eq!(idx[1], 25); // AGR query, token key
        assert_eq!(idx[l], 26); // token query, AGR key
        // Equal spatial offsets share a row: (1,1)->(1,2) vs (2,1)->(2,2).
        let slot = |y: usize, x: usize| 1 + y * side + x;
        assert_eq!(idx[slot(1, 1) * l + slot(1, 2)], idx[slot(2, 1) * l + slot(2, 2)]);
        // Opposite offsets differ.
        assert_ne!(idx[slot(1, 1) * l + slot(1, 2)], idx[slot(1, 2) * l + slot(1, 1)]);
        // All grid rows are legal offsets.
        assert!(idx.iter().all(|&r| r < rows));
    }

    #[test]
    fn grid_bias_index_is_offset_indexed() {
        let (idx, rows) = grid_bias_index(2, 3);
        assert_eq!(rows, 15);
        // Self-offset row is the center.
        let n = 6;
        for i in 0..n {
            assert_eq!(idx[i * n + i], (2 - 1) * 5 + (3 - 1));
        }
        assert!(idx.iter().all(|&r| r < rows));
    }

    #[test]
    fn interaction_pairs_formula() {
        assert_eq!(interaction_pairs(64, 82, false), 64 * 82 * 82);
        assert_eq!(interaction_pairs(64, 82, true), 64 * 82 * 82 + 64 * 64);
    }
}
