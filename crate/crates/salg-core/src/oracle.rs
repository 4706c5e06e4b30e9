//! Independent brute-force reference implementations, used only for
//! verification: exhaustive token assignment, dense deletion-based attention,
//! direct convolution, compensated softmax, and a second finite-difference
//! harness. None of this shares code with the production paths; the
//! duplication is the point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SalgError};
use crate::segmentation::{RegionAssignment, RegionMeans, SegmentationConfig};
use crate::tensor::{Graph, ParamStore, Tensor, Value};

/// Comparison outcome between an implementation and its oracle.
#[derive(Clone, Debug)]
pub struct OracleReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Flat coordinates whose absolute error exceeded the invoked tolerance.
    pub mismatches: Vec<usize>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Elementwise comparison at an absolute tolerance.
pub fn compare_slices(actual: &[f64], expected: &[f64], abs_tol: f64) -> OracleReport {
    assert_eq!(actual.len(), expected.len(), "oracle comparison length mismatch");
    let mut report = OracleReport { max_abs_err: 0.0, max_rel_err: 0.0, mismatches: Vec::new() };
    for (i, (&a, &e)) in actual.iter().zip(expected).enumerate() {
        let abs = (a - e).abs();
        let rel = abs / (a.abs() + e.abs()).max(1e-12);
        if abs > report.max_abs_err {
            report.max_abs_err = abs;
        }
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
        }
        if abs > abs_tol {
            report.mismatches.push(i);
        }
    }
    report
}

// ── Exhaustive token assignment ─────────────────────────────────────────

/// Re-derives the token assignment by looping over every region mean,
/// testing coverage membership from first principles and applying the same
/// cosine and tie-break rules as production (constants read from the shared
/// config so disagreements indicate logic bugs).
pub fn brute_force_assign(
    f: &Tensor,
    means: &RegionMeans,
    cfg: &SegmentationConfig,
    valid: &[bool],
) -> RegionAssignment {
    let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let src = f.data();
    let mg = means.grid.data();
    let (n_rows, n_cols) = (means.n_rows, means.n_cols);
    let mut ids = vec![0usize; h * w];
    for u in 0..h {
        for v in 0..w {
            let fv = &src[(u * w + v) * c..(u * w + v + 1) * c];
            let mut fn2 = 0.0;
            for &x in fv {
                fn2 += x * x;
            }
            let f_norm = fn2.sqrt().max(cfg.eps_norm);
            let sim_of = |region: usize| {
                let m = &mg[region * c..(region + 1) * c];
                let mut dot = 0.0;
                let mut mn2 = 0.0;
                for (x, y) in m.iter().zip(fv) {
                    dot += x * y;
                    mn2 += x * x;
                }
                dot / (mn2.sqrt().max(cfg.eps_norm) * f_norm)
            };
            // Same tie-break as production: the token's own window wins exact
            // ties, then the smallest row-major index.
            let own = (u / cfg.window) * n_cols + v / cfg.window;
            let mut best = own;
            let mut best_sim = sim_of(own);
            for region in 0..n_rows * n_cols {
                if region == own {
                    continue;
                }
                let (ri, ci) = (region / n_cols, region % n_cols);
                // Coverage: the region's window expanded by pad on all sides.
                let row_lo = ri as isize * cfg.window as isize - cfg.pad as isize;
                let row_hi = row_lo + cfg.coverage_side() as isize - 1;
                let col_lo = ci as isize * cfg.window as isize - cfg.pad as isize;
                let col_hi = col_lo + cfg.coverage_side() as isize - 1;
                let covered = (u as isize) >= row_lo
                    && (u as isize) <= row_hi
                    && (v as isize) >= col_lo
                    && (v as isize) <= col_hi;
                if !covered {
                    continue;
                }
                let sim = sim_of(region);
                if sim > best_sim {
                    best_sim = sim;
                    best = region;
                }
            }
            ids[u * w + v] = best;
        }
    }
    RegionAssignment {
        region_id: ids,
        valid: valid.to_vec(),
        height: h,
        width: w,
        valid_height: h,
        valid_width: w,
        n_rows,
        n_cols,
        config: *cfg,
    }
}

// ── Dense deletion-based attention ──────────────────────────────────────

/// Raw weight views of one transformer block, in the row-major layouts the
/// store registers them with.
pub struct DenseBlockWeights<'a> {
    pub ln1_gamma: &'a [f64],
    pub ln1_beta: &'a [f64],
    pub wq: &'a [f64],
    pub bq: &'a [f64],
    pub wk: &'a [f64],
    pub bk: &'a [f64],
    pub wv: &'a [f64],
    pub bv: &'a [f64],
    pub wo: &'a [f64],
    pub bo: &'a [f64],
    /// `[rows, heads]`; `None` disables positional bias.
    pub bias_table: Option<&'a [f64]>,
    pub heads: usize,
    pub ln2_gamma: &'a [f64],
    pub ln2_beta: &'a [f64],
    pub mlp_w1: &'a [f64],
    pub mlp_b1: &'a [f64],
    pub mlp_w2: &'a [f64],
    pub mlp_b2: &'a [f64],
}

fn oracle_layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mut mu = 0.0;
    for &v in x {
        mu += v;
    }
    mu /= n;
    let mut var = 0.0;
    for &v in x {
        var += (v - mu) * (v - mu);
    }
    var /= n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().zip(gamma.iter().zip(beta)).map(|(&v, (&g, &b))| (v - mu) * inv * g + b).collect()
}

fn oracle_affine(x: &[f64], w: &[f64], b: &[f64], cin: usize, cout: usize) -> Vec<f64> {
    let mut out = b.to_vec();
    for (i, &xv) in x.iter().enumerate().take(cin) {
        for j in 0..cout {
            out[j] += xv * w[i * cout + j];
        }
    }
    out
}

fn oracle_gelu(x: f64) -> f64 {
    let a = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (a * (x + 0.044_715 * x * x * x)).tanh())
}

/// The bias row the oracle picks for a (query, key) pair of coverage slots
/// (original slot indices, slot 0 = AGR). Re-derived, not shared.
fn oracle_bias_row(side: usize, qi: usize, ki: usize) -> usize {
    let span = 2 * side - 1;
    let grid = span * span;
    match (qi, ki) {
        (0, 0) => grid + 2,
        (0, _) => grid,
        (_, 0) => grid + 1,
        (q, k) => {
            let (yq, xq) = ((q - 1) / side, (q - 1) % side);
            let (yk, xk) = ((k - 1) / side, (k - 1) % side);
            (yq + side - 1 - yk) * span + (xq + side - 1 - xk)
        }
    }
}

fn oracle_grid_bias_row(h: usize, w: usize, qi: usize, ki: usize) -> usize {
    let span_x = 2 * w - 1;
    ((qi / w) + h - 1 - (ki / w)) * span_x + (qi % w) + w - 1 - (ki % w)
}

/// Textbook pre-LN transformer block over an explicit token list, with bias
/// rows supplied per pair. `tokens[i]` is one C-vector; returns the refined
/// vectors in the same order.
pub fn dense_block_oracle(
    weights: &DenseBlockWeights,
    tokens: &[Vec<f64>],
    bias_row: impl Fn(usize, usize) -> Option<usize>,
) -> Vec<Vec<f64>> {
    let n = tokens.len();
    let c = tokens[0].len();
    let heads = weights.heads;
    let hd = c / heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x: Vec<Vec<f64>> = tokens.to_vec();
    // Attention sub-layer.
    let normed: Vec<Vec<f64>> =
        x.iter().map(|t| oracle_layer_norm(t, weights.ln1_gamma, weights.ln1_beta)).collect();
    let q: Vec<Vec<f64>> = normed.iter().map(|t| oracle_affine(t, weights.wq, weights.bq, c, c)).collect();
    let k: Vec<Vec<f64>> = normed.iter().map(|t| oracle_affine(t, weights.wk, weights.bk, c, c)).collect();
    let v: Vec<Vec<f64>> = normed.iter().map(|t| oracle_affine(t, weights.wv, weights.bv, c, c)).collect();
    for i in 0..n {
        let mut merged = vec![0.0; c];
        for h in 0..heads {
            let qs = &q[i][h * hd..(h + 1) * hd];
            let mut logits = Vec::with_capacity(n);
            for j in 0..n {
                let ks = &k[j][h * hd..(h + 1) * hd];
                let mut dot = 0.0;
                for (a, b) in qs.iter().zip(ks) {
                    dot += a * b;
                }
                let mut logit = dot * scale;
                if let (Some(table), Some(row)) = (weights.bias_table, bias_row(i, j)) {
                    logit += table[row * heads + h];
                }
                logits.push(logit);
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for j in 0..n {
                let p = exps[j] / denom;
                let vs = &v[j][h * hd..(h + 1) * hd];
                for d in 0..hd {
                    merged[h * hd + d] += p * vs[d];
                }
            }
        }
        let proj = oracle_affine(&merged, weights.wo, weights.bo, c, c);
        for (o, p) in x[i].iter_mut().zip(proj) {
            *o += p;
        }
    }
    // MLP sub-layer.
    let hidden = weights.mlp_b1.len();
    for xi in x.iter_mut() {
        let normed = oracle_layer_norm(xi, weights.ln2_gamma, weights.ln2_beta);
        let mut h1 = oracle_affine(&normed, weights.mlp_w1, weights.mlp_b1, c, hidden);
        for v in h1.iter_mut() {
            *v = oracle_gelu(*v);
        }
        let h2 = oracle_affine(&h1, weights.mlp_w2, weights.mlp_b2, hidden, c);
        for (o, p) in xi.iter_mut().zip(h2) {
            *o += p;
        }
    }
    x
}

/// Dense oracle for one region of a coverage batch: physically deletes null
/// slots, runs the textbook block on the survivors (AGR first), and returns
/// (kept original slot index, refined vector) pairs.
pub fn dense_region_oracle(
    weights: &DenseBlockWeights,
    region_tokens: &[f64],
    mask: &[bool],
    slots: usize,
    side: usize,
    channels: usize,
) -> Vec<(usize, Vec<f64>)> {
    let kept: Vec<usize> = (0..slots).filter(|&l| mask[l]).collect();
    let tokens: Vec<Vec<f64>> =
        kept.iter().map(|&l| region_tokens[l * channels..(l + 1) * channels].to_vec()).collect();
    let out = dense_block_oracle(weights, &tokens, |qi, ki| {
        Some(oracle_bias_row(side, kept[qi], kept[ki]))
    });
    kept.into_iter().zip(out).collect()
}

/// Dense oracle over a full `h x w` token grid (no AGR, grid bias rows).
pub fn dense_grid_oracle(
    weights: &DenseBlockWeights,
    tokens: &[f64],
    h: usize,
    w: usize,
    channels: usize,
) -> Vec<Vec<f64>> {
    let list: Vec<Vec<f64>> =
        (0..h * w).map(|t| tokens[t * channels..(t + 1) * channels].to_vec()).collect();
    dense_block_oracle(weights, &list, |qi, ki| Some(oracle_grid_bias_row(h, w, qi, ki)))
}

// ── Direct convolution ──────────────────────────────────────────────────

/// Six-loop direct cross-correlation on `[H, W, Cin]` with
/// `[Cout, Cin, kh, kw]`, zero padding.
pub fn conv2d_reference(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[f64],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; oh * ow * cout];
    for i in 0..oh {
        for j in 0..ow {
            for o in 0..cout {
                let mut acc = 0.0;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let u = (i * stride + ki) as isize - padding as isize;
                        let v = (j * stride + kj) as isize - padding as isize;
                        if u < 0 || v < 0 || u >= h as isize || v >= w as isize {
                            continue;
                        }
                        for c in 0..cin {
                            acc += x[((u as usize) * w + v as usize) * cin + c]
                                * weight[((o * cin + c) * kh + ki) * kw + kj];
                        }
                    }
                }
                out[(i * ow + j) * cout + o] = acc;
            }
        }
    }
    out
}

// ── Compensated softmax reference ───────────────────────────────────────

/// Softmax via Kahan-compensated summation (an independent numeric route).
pub fn softmax_reference(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return vec![0.0; xs.len()];
    }
    let exps: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &e in &exps {
        let y = e - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    exps.iter().map(|&e| e / sum).collect()
}

// ── Independent finite differences ──────────────────────────────────────

/// Second, independent central-difference gradient harness. Checks up to
/// `per_param` deterministically-chosen coordinates of each parameter
/// against the analytic gradients and reports every deviation above `tol`
/// (relative error).
pub fn numeric_grad<F>(
    store: &mut ParamStore,
    build: F,
    h: f64,
    tol: f64,
    per_param: Option<usize>,
    seed: u64,
) -> Result<OracleReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Value>,
{
    if h <= 0.0 {
        return Err(SalgError::Usage("numeric_grad: h must be positive".into()));
    }
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    if !g.data(loss).is_scalar() {
        return Err(SalgError::NonScalarLoss { shape: g.shape(loss).to_vec() });
    }
    let grads = g.backward(loss)?;

    let mut report = OracleReport { max_abs_err: 0.0, max_rel_err: 0.0, mismatches: Vec::new() };
    let ids: Vec<_> = store.ids().collect();
    let mut flat_base = 0usize;
    for (pi, id) in ids.iter().enumerate() {
        let len = store.value(*id).len();
        let analytic: Vec<f64> = match g.param_node(*id).and_then(|n| grads.of(n)) {
            Some(a) => a.to_vec(),
            None => vec![0.0; len],
        };
        let coords: Vec<usize> = match per_param {
            Some(count) if count < len => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(pi as u64 * 7919));
                let mut set = std::collections::BTreeSet::new();
                while set.len() < count {
                    set.insert(rng.random_range(0..len));
                }
                set.into_iter().collect()
            }
            _ => (0..len).collect(),
        };
        for coord in coords {
            let orig = store.value(*id)[coord];
            store.set_coord(*id, coord, orig + h);
            let mut gp = Graph::new();
            let lp = build(&mut gp, store)?;
            let plus = gp.data(lp).data()[0];
            store.set_coord(*id, coord, orig - h);
            let mut gm = Graph::new();
            let lm = build(&mut gm, store)?;
            let minus = gm.data(lm).data()[0];
            store.set_coord(*id, coord, orig);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[coord];
            let abs = (a - numeric).abs();
            let rel = abs / (a.abs() + numeric.abs()).max(1e-12);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel > tol {
                report.mismatches.push(flat_base + coord);
            }
        }
        flat_base += len;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compare_slices_reports_mismatch_coords() {
        let r = compare_slices(&[1.0, 2.0, 3.0], &[1.0, 2.5, 3.0], 0.1);
        assert_eq!(r.mismatches, vec![1]);
        assert!((r.max_abs_err - 0.5).abs() < 1e-15);
        let ok = compare_slices(&[1.0, 2.0], &[1.0, 2.0], 1e-12);
        assert!(ok.passed());
    }

    #[test]
    fn softmax_reference_handles_all_masked() {
        assert_eq!(softmax_reference(&[f64::NEG_INFINITY; 3]), vec![0.0; 3]);
    }

    #[test]
    fn conv_reference_identity_kernel() {
        // 1x1 kernel of value 1 is the identity on a single channel.
        let x = [1.0, 2.0, 3.0, 4.0];
        let out = conv2d_reference(&x, 2, 2, 1, &[1.0], 1, 1, 1, 1, 0);
        assert_eq!(out, x);
    }
}
