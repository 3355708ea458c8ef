//! Trainable coarse localizer: cross-attention between query tokens and
//! the base grid, a per-cell logit head, and the combined classification +
//! distance-aware training loss.
//!
//! Query tokens (plus a learnable positional embedding) attend over the
//! 100 base-grid cells (keys and values, with their own positional
//! embedding) through 8 scaled-dot-product heads. The attended tokens are
//! mean-pooled and a linear head emits one logit per cell. Backpropagation
//! is hand-derived; gradient tests check it against central finite
//! differences end to end.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::descriptor::{tokenize, BaseGrid, DescriptorConfig, TokenGrid};
use crate::error::{CoreError, Result};
use crate::geom::{cell_center, GridIndex, MapSpec};
use crate::math;
use crate::raster::SemanticRaster;
use crate::rng::Rng;

/// Weights of the retrieval stage.
///
/// Per-head query/key/value projections are stored head-major as
/// `(dh x D)` blocks (`w[(h*dh + o)*D + k]`); the output projection and
/// logit head are `(D x D)` and `(N x D)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalParams {
    pub dim: usize,
    pub heads: usize,
    pub query_rows: usize,
    pub query_cols: usize,
    pub grid_dim: usize,
    pub query_pos: Vec<f64>,
    pub base_pos: Vec<f64>,
    pub w_query: Vec<f64>,
    pub w_key: Vec<f64>,
    pub w_value: Vec<f64>,
    pub w_output: Vec<f64>,
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
}

impl RetrievalParams {
    /// Seeded random initialization.
    pub fn init(
        dim: usize,
        heads: usize,
        query_rows: usize,
        query_cols: usize,
        grid_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(CoreError::Shape(alloc::format!(
                "head count {heads} must divide dim {dim}"
            )));
        }
        let t = query_rows * query_cols;
        let n = grid_dim * grid_dim;
        let dh = dim / heads;
        let mut rng = Rng::new(seed);
        let scale = 1.0 / math::sqrt(dim as f64);
        // Unit-norm descriptors give O(1/sqrt(D)) attention scores under a
        // plain 1/sqrt(D) init, which leaves every softmax uniform and the
        // gradient through attention vanishingly small. The query/key
        // projections start four times hotter so scores open at O(1).
        let qk_scale = 4.0 / math::sqrt(dim as f64);
        let mut randn = |count: usize, s: f64| -> Vec<f64> {
            (0..count).map(|_| rng.normal() * s).collect()
        };

        // Attention-mass readout bootstrap: cells get strong near-
        // orthogonal positional signatures, the value and output
        // projections start as the identity, and each head row starts
        // aligned with its cell's signature. The logits then read per-cell
        // attention mass from the first step, so the gradient drives the
        // query/key routing instead of having to co-discover a readout.
        // The query/key projections start near slices of the identity, so
        // routing opens as plain content similarity between tokens and
        // centered cells.
        let base_pos = randn(n * dim, 1.0);
        let mut w_value = vec![0.0; heads * dh * dim];
        let mut w_output = vec![0.0; dim * dim];
        for k in 0..dim {
            w_value[k * dim + k] = 1.0;
            w_output[k * dim + k] = 1.0;
        }
        let mut w_query = randn(heads * dh * dim, 0.25 * qk_scale);
        let mut w_key = randn(heads * dh * dim, 0.25 * qk_scale);
        for h in 0..heads {
            for o in 0..dh {
                w_query[(h * dh + o) * dim + h * dh + o] += 2.0;
                w_key[(h * dh + o) * dim + h * dh + o] += 2.0;
            }
        }
        let mut head_weight = randn(n * dim, 0.05 * scale);
        for (c, row) in head_weight.chunks_mut(dim).enumerate() {
            for (w, p) in row.iter_mut().zip(&base_pos[c * dim..(c + 1) * dim]) {
                *w += 2.0 * p / dim as f64;
            }
        }

        Ok(Self {
            dim,
            heads,
            query_rows,
            query_cols,
            grid_dim,
            query_pos: randn(t * dim, scale),
            base_pos,
            w_query,
            w_key,
            w_value,
            w_output,
            head_weight,
            head_bias: vec![0.0; n],
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dim: self.dim,
            heads: self.heads,
            query_rows: self.query_rows,
            query_cols: self.query_cols,
            grid_dim: self.grid_dim,
            query_pos: vec![0.0; self.query_pos.len()],
            base_pos: vec![0.0; self.base_pos.len()],
            w_query: vec![0.0; self.w_query.len()],
            w_key: vec![0.0; self.w_key.len()],
            w_value: vec![0.0; self.w_value.len()],
            w_output: vec![0.0; self.w_output.len()],
            head_weight: vec![0.0; self.head_weight.len()],
            head_bias: vec![0.0; self.head_bias.len()],
        }
    }

    /// Flat views over every tensor, in the declared serialization order.
    pub fn tensors(&self) -> [&[f64]; 7] {
        [
            &self.query_pos,
            &self.base_pos,
            &self.w_query,
            &self.w_key,
            &self.w_value,
            &self.w_output,
            &self.head_weight,
        ]
    }

    fn for_each_pair(&mut self, other: &Self, mut f: impl FnMut(&mut f64, f64)) {
        let dst = [
            &mut self.query_pos,
            &mut self.base_pos,
            &mut self.w_query,
            &mut self.w_key,
            &mut self.w_value,
            &mut self.w_output,
            &mut self.head_weight,
            &mut self.head_bias,
        ];
        let src = [
            &other.query_pos,
            &other.base_pos,
            &other.w_query,
            &other.w_key,
            &other.w_value,
            &other.w_output,
            &other.head_weight,
            &other.head_bias,
        ];
        for (d, s) in dst.into_iter().zip(src) {
            for (dv, sv) in d.iter_mut().zip(s.iter()) {
                f(dv, *sv);
            }
        }
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn scaled_add(&mut self, other: &Self, scale: f64) {
        self.for_each_pair(other, |d, s| *d += scale * s);
    }

    pub fn scale(&mut self, factor: f64) {
        for buf in [
            &mut self.query_pos,
            &mut self.base_pos,
            &mut self.w_query,
            &mut self.w_key,
            &mut self.w_value,
            &mut self.w_output,
            &mut self.head_weight,
            &mut self.head_bias,
        ] {
            for v in buf.iter_mut() {
                *v *= factor;
            }
        }
    }

    fn check_inputs(&self, query: &TokenGrid, base: &BaseGrid) -> Result<()> {
        if query.dim != self.dim
            || base.dim != self.dim
            || query.rows != self.query_rows
            || query.cols != self.query_cols
            || base.grid_dim != self.grid_dim
        {
            return Err(CoreError::Shape(alloc::format!(
                "query {}x{}x{} / base {}x{} incompatible with params {}x{} dim {} grid {}",
                query.rows,
                query.cols,
                query.dim,
                base.grid_dim,
                base.dim,
                self.query_rows,
                self.query_cols,
                self.dim,
                self.grid_dim
            )));
        }
        Ok(())
    }
}

/// Logits over the flattened base grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalScores {
    pub logits: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache {
    q_in: Vec<f64>,    // T x D
    k_in: Vec<f64>,    // N x D
    q_h: Vec<f64>,     // heads x T x dh
    k_h: Vec<f64>,     // heads x N x dh
    v_h: Vec<f64>,     // heads x N x dh
    attn: Vec<f64>,    // heads x T x N
    attended: Vec<f64>, // T x D
    pooled: Vec<f64>,  // D
}

/// Subtract the across-cell mean from every cell descriptor and rescale
/// each residual to unit norm. Purely a deterministic conditioning step on
/// the retrieval inputs.
fn center_cells(data: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for cell in 0..n {
        for (m, v) in mean.iter_mut().zip(&data[cell * d..(cell + 1) * d]) {
            *m += v / n as f64;
        }
    }
    let mut out = vec![0.0; n * d];
    for cell in 0..n {
        let src = &data[cell * d..(cell + 1) * d];
        let dst = &mut out[cell * d..(cell + 1) * d];
        let mut norm = 0.0;
        for ((o, v), m) in dst.iter_mut().zip(src).zip(&mean) {
            *o = v - m;
            norm += *o * *o;
        }
        let norm = math::sqrt(norm);
        if norm > 1e-9 {
            for o in dst.iter_mut() {
                *o /= norm;
            }
        }
    }
    out
}

/// Forward pass: returns the logits and the activations needed by
/// [`score_cells_backward`].
pub fn score_cells_with_cache(
    query: &TokenGrid,
    base: &BaseGrid,
    params: &RetrievalParams,
) -> Result<(RetrievalScores, ForwardCache)> {
    params.check_inputs(query, base)?;
    let d = params.dim;
    let heads = params.heads;
    let dh = d / heads;
    let t = params.query_rows * params.query_cols;
    let n = params.grid_dim * params.grid_dim;
    let inv_sqrt_dh = 1.0 / math::sqrt(dh as f64);

    let mut q_in = vec![0.0; t * d];
    for (o, (x, p)) in q_in.iter_mut().zip(query.data.iter().zip(&params.query_pos)) {
        *o = x + p;
    }
    // Pooled cell descriptors cluster within a percent of their map-wide
    // mean; centering and rescaling them first turns that residual into
    // O(1) content signal instead of asking the projections to dig it out.
    let centered = center_cells(&base.data, n, d);
    let mut k_in = vec![0.0; n * d];
    for (o, (x, p)) in k_in.iter_mut().zip(centered.iter().zip(&params.base_pos)) {
        *o = x + p;
    }

    let mut q_h = vec![0.0; heads * t * dh];
    let mut k_h = vec![0.0; heads * n * dh];
    let mut v_h = vec![0.0; heads * n * dh];
    for h in 0..heads {
        for ti in 0..t {
            let x = &q_in[ti * d..(ti + 1) * d];
            for o in 0..dh {
                let w = &params.w_query[(h * dh + o) * d..(h * dh + o + 1) * d];
                q_h[(h * t + ti) * dh + o] = dot(x, w);
            }
        }
        for ci in 0..n {
            let x = &k_in[ci * d..(ci + 1) * d];
            for o in 0..dh {
                let wk = &params.w_key[(h * dh + o) * d..(h * dh + o + 1) * d];
                let wv = &params.w_value[(h * dh + o) * d..(h * dh + o + 1) * d];
                k_h[(h * n + ci) * dh + o] = dot(x, wk);
                v_h[(h * n + ci) * dh + o] = dot(x, wv);
            }
        }
    }

    let mut attn = vec![0.0; heads * t * n];
    let mut attended = vec![0.0; t * d];
    for h in 0..heads {
        for ti in 0..t {
            let qrow = &q_h[(h * t + ti) * dh..(h * t + ti + 1) * dh];
            let arow = &mut attn[(h * t + ti) * n..(h * t + ti + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for (ci, a) in arow.iter_mut().enumerate() {
                let krow = &k_h[(h * n + ci) * dh..(h * n + ci + 1) * dh];
                *a = dot(qrow, krow) * inv_sqrt_dh;
                if *a > max {
                    max = *a;
                }
            }
            let mut total = 0.0;
            for a in arow.iter_mut() {
                *a = math::exp(*a - max);
                total += *a;
            }
            for a in arow.iter_mut() {
                *a /= total;
            }
            let orow = &mut attended[ti * d + h * dh..ti * d + (h + 1) * dh];
            for (ci, &a) in arow.iter().enumerate() {
                let vrow = &v_h[(h * n + ci) * dh..(h * n + ci + 1) * dh];
                for (o, v) in orow.iter_mut().zip(vrow) {
                    *o += a * v;
                }
            }
        }
    }

    // Output projection and mean pooling over query tokens.
    let mut pooled = vec![0.0; d];
    for ti in 0..t {
        let orow = &attended[ti * d..(ti + 1) * d];
        for (out_k, p) in pooled.iter_mut().enumerate() {
            *p += dot(&params.w_output[out_k * d..(out_k + 1) * d], orow);
        }
    }
    for p in pooled.iter_mut() {
        *p /= t as f64;
    }

    let mut logits = vec![0.0; n];
    for (ci, z) in logits.iter_mut().enumerate() {
        *z = params.head_bias[ci] + dot(&params.head_weight[ci * d..(ci + 1) * d], &pooled);
    }

    Ok((
        RetrievalScores { logits },
        ForwardCache { q_in, k_in, q_h, k_h, v_h, attn, attended, pooled },
    ))
}

/// Score every base cell for one query. See [`score_cells_with_cache`].
pub fn score_cells(
    query: &TokenGrid,
    base: &BaseGrid,
    params: &RetrievalParams,
) -> Result<RetrievalScores> {
    score_cells_with_cache(query, base, params).map(|(s, _)| s)
}

/// Backward pass through head, pooling and attention. Returns gradients
/// with respect to every parameter tensor.
pub fn score_cells_backward(
    cache: &ForwardCache,
    params: &RetrievalParams,
    dlogits: &[f64],
) -> RetrievalParams {
    let d = params.dim;
    let heads = params.heads;
    let dh = d / heads;
    let t = params.query_rows * params.query_cols;
    let n = params.grid_dim * params.grid_dim;
    let inv_sqrt_dh = 1.0 / math::sqrt(dh as f64);
    let mut g = params.zeros_like();

    // Head and pooling.
    let mut dpooled = vec![0.0; d];
    for ci in 0..n {
        let dz = dlogits[ci];
        g.head_bias[ci] = dz;
        let wrow = &params.head_weight[ci * d..(ci + 1) * d];
        let grow = &mut g.head_weight[ci * d..(ci + 1) * d];
        for k in 0..d {
            grow[k] = dz * cache.pooled[k];
            dpooled[k] += dz * wrow[k];
        }
    }

    // Mean pooling spreads the same dY to every token; the output
    // projection then gives one shared dAttended row.
    let inv_t = 1.0 / t as f64;
    let mut attended_mean = vec![0.0; d];
    for ti in 0..t {
        for (m, v) in attended_mean.iter_mut().zip(&cache.attended[ti * d..(ti + 1) * d]) {
            *m += v * inv_t;
        }
    }
    for out_k in 0..d {
        let dy = dpooled[out_k];
        let grow = &mut g.w_output[out_k * d..(out_k + 1) * d];
        for (gv, m) in grow.iter_mut().zip(&attended_mean) {
            *gv = dy * m;
        }
    }
    let mut d_attended_row = vec![0.0; d]; // same for every token
    for in_k in 0..d {
        let mut acc = 0.0;
        for out_k in 0..d {
            acc += params.w_output[out_k * d + in_k] * dpooled[out_k];
        }
        d_attended_row[in_k] = acc * inv_t;
    }

    let mut dq_in = vec![0.0; t * d];
    let mut dk_in = vec![0.0; n * d];
    let mut d_s = vec![0.0; n];
    let mut dq_h = vec![0.0; t * dh];
    let mut dk_h = vec![0.0; n * dh];
    for h in 0..heads {
        let d_o = &d_attended_row[h * dh..(h + 1) * dh];

        // dA is the same row of dot products for every token; the value
        // gradient only needs the column sums of the attention weights.
        let mut attn_colsum = vec![0.0; n];
        for ti in 0..t {
            let arow = &cache.attn[(h * t + ti) * n..(h * t + ti + 1) * n];
            for (s, a) in attn_colsum.iter_mut().zip(arow) {
                *s += a;
            }
        }
        let mut d_a = vec![0.0; n];
        for ci in 0..n {
            let vrow = &cache.v_h[(h * n + ci) * dh..(h * n + ci + 1) * dh];
            d_a[ci] = dot(d_o, vrow);
        }

        dq_h.fill(0.0);
        dk_h.fill(0.0);
        for ti in 0..t {
            let arow = &cache.attn[(h * t + ti) * n..(h * t + ti + 1) * n];
            // Softmax Jacobian: dS = A * (dA - <A, dA>), plus the 1/sqrt(dh)
            // score scaling.
            let mix = dot(arow, &d_a);
            for ci in 0..n {
                d_s[ci] = arow[ci] * (d_a[ci] - mix) * inv_sqrt_dh;
            }
            let qrow = &cache.q_h[(h * t + ti) * dh..(h * t + ti + 1) * dh];
            let dq_row = &mut dq_h[ti * dh..(ti + 1) * dh];
            for ci in 0..n {
                let ds = d_s[ci];
                let krow = &cache.k_h[(h * n + ci) * dh..(h * n + ci + 1) * dh];
                let dk_row = &mut dk_h[ci * dh..(ci + 1) * dh];
                for o in 0..dh {
                    dq_row[o] += ds * krow[o];
                    dk_row[o] += ds * qrow[o];
                }
            }
        }

        // Scatter head-space gradients onto the projections and inputs.
        for ti in 0..t {
            let x = &cache.q_in[ti * d..(ti + 1) * d];
            let dx = &mut dq_in[ti * d..(ti + 1) * d];
            for o in 0..dh {
                let dq = dq_h[ti * dh + o];
                let wrow = &params.w_query[(h * dh + o) * d..(h * dh + o + 1) * d];
                let gw = &mut g.w_query[(h * dh + o) * d..(h * dh + o + 1) * d];
                for k in 0..d {
                    gw[k] += dq * x[k];
                    dx[k] += dq * wrow[k];
                }
            }
        }
        for ci in 0..n {
            let xk = &cache.k_in[ci * d..(ci + 1) * d];
            let dx = &mut dk_in[ci * d..(ci + 1) * d];
            for o in 0..dh {
                let dk = dk_h[ci * dh + o];
                let dv = attn_colsum[ci] * d_o[o];
                let wk = &params.w_key[(h * dh + o) * d..(h * dh + o + 1) * d];
                let gk = &mut g.w_key[(h * dh + o) * d..(h * dh + o + 1) * d];
                let wv = &params.w_value[(h * dh + o) * d..(h * dh + o + 1) * d];
                let gv = &mut g.w_value[(h * dh + o) * d..(h * dh + o + 1) * d];
                for k in 0..d {
                    gk[k] += dk * xk[k];
                    gv[k] += dv * xk[k];
                    dx[k] += dk * wk[k] + dv * wv[k];
                }
            }
        }
    }

    g.query_pos.copy_from_slice(&dq_in);
    g.base_pos.copy_from_slice(&dk_in);
    g
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One Adam step over every parameter tensor, with bias correction.
fn adam_update(
    params: &mut RetrievalParams,
    grad: &RetrievalParams,
    m: &mut RetrievalParams,
    v: &mut RetrievalParams,
    step: usize,
    lr: f64,
    beta1: f64,
) {
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    fn tensors(p: &mut RetrievalParams) -> [&mut Vec<f64>; 8] {
        [
            &mut p.query_pos,
            &mut p.base_pos,
            &mut p.w_query,
            &mut p.w_key,
            &mut p.w_value,
            &mut p.w_output,
            &mut p.head_weight,
            &mut p.head_bias,
        ]
    }
    let gt = [
        &grad.query_pos,
        &grad.base_pos,
        &grad.w_query,
        &grad.w_key,
        &grad.w_value,
        &grad.w_output,
        &grad.head_weight,
        &grad.head_bias,
    ];
    let mt = tensors(m);
    let vt = tensors(v);
    let pt = tensors(params);
    for (((pk, mk), vk), g) in pt.into_iter().zip(mt).zip(vt).zip(gt) {
        for i in 0..g.len() {
            mk[i] = beta1 * mk[i] + (1.0 - beta1) * g[i];
            vk[i] = ADAM_BETA2 * vk[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let mhat = mk[i] / bc1;
            let vhat = vk[i] / bc2;
            pk[i] -= lr * mhat / (math::sqrt(vhat) + ADAM_EPS);
        }
    }
}

/// Loss weighting: classification term plus `lambda` times the
/// distance-aware term with Gaussian width `sigma_d` (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub sigma_d: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 1.0, sigma_d: 50.0 }
    }
}

/// Normalized Gaussian over cell centers, centered on the target cell.
pub fn soft_target(target: &GridIndex, spec: &MapSpec, sigma_d: f64) -> Vec<f64> {
    let n = spec.n_cells();
    let (cx, cy) = cell_center(target, spec);
    let inv = 1.0 / (2.0 * sigma_d * sigma_d);
    let mut weights = Vec::with_capacity(n);
    for flat in 0..n {
        let idx = GridIndex::from_flat(flat, spec.grid_dim);
        let (px, py) = cell_center(&idx, spec);
        let d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
        weights.push(-d2 * inv);
    }
    // Exponentiate relative to the peak so a vanishing sigma degrades to a
    // clean one-hot instead of 0/0.
    let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for w in weights.iter_mut() {
        *w = math::exp(*w - max);
        total += *w;
    }
    for w in weights.iter_mut() {
        *w /= total;
    }
    weights
}

/// The two loss terms evaluated separately: (classification, distance).
pub fn loss_components(
    scores: &RetrievalScores,
    target: &GridIndex,
    cfg: &LossConfig,
    spec: &MapSpec,
) -> (f64, f64) {
    let n = scores.logits.len();
    let target_flat = target.flat(spec.grid_dim);

    // Mean binary cross-entropy with logits against the one-hot target.
    let mut bce = 0.0;
    for (i, &z) in scores.logits.iter().enumerate() {
        let y = if i == target_flat { 1.0 } else { 0.0 };
        // max(z,0) - z*y + ln(1 + exp(-|z|))
        bce += z.max(0.0) - z * y + math::ln(1.0 + math::exp(-math::abs(z)));
    }
    bce /= n as f64;

    // Cross-entropy of the softmax against the Gaussian soft target.
    let soft = soft_target(target, spec, cfg.sigma_d);
    let max = scores.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + math::ln(scores.logits.iter().map(|&z| math::exp(z - max)).sum::<f64>());
    let mut dist = lse;
    for (&z, &y) in scores.logits.iter().zip(&soft) {
        dist -= y * z;
    }
    (bce, dist)
}

/// Total loss and its exact gradient with respect to the logits.
pub fn loss(
    scores: &RetrievalScores,
    target: &GridIndex,
    cfg: &LossConfig,
    spec: &MapSpec,
) -> (f64, Vec<f64>) {
    let n = scores.logits.len();
    let target_flat = target.flat(spec.grid_dim);
    let (bce, dist) = loss_components(scores, target, cfg, spec);

    let soft = soft_target(target, spec, cfg.sigma_d);
    let max = scores.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = scores.logits.iter().map(|&z| math::exp(z - max)).sum();
    let mut grad = Vec::with_capacity(n);
    for (i, &z) in scores.logits.iter().enumerate() {
        let y = if i == target_flat { 1.0 } else { 0.0 };
        let sigma = 1.0 / (1.0 + math::exp(-z));
        let softmax = math::exp(z - max) / total;
        grad.push((sigma - y) / n as f64 + cfg.lambda * (softmax - soft[i]));
    }
    (bce + cfg.lambda * dist, grad)
}

/// Indices of the `k` largest logits, ties broken toward the lower flat
/// index.
pub fn top_cells(scores: &RetrievalScores, k: usize, grid_dim: usize) -> Vec<GridIndex> {
    let mut order: Vec<usize> = (0..scores.logits.len()).collect();
    order.sort_by(|&a, &b| {
        scores.logits[b]
            .total_cmp(&scores.logits[a])
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.into_iter().map(|flat| GridIndex::from_flat(flat, grid_dim)).collect()
}

/// Score a query raster against the base grid, optionally taking the
/// per-cell maximum over `rotations` evenly spaced query headings. The
/// vehicle heading is unknown at inference time; scoring a handful of
/// rotations and keeping the best response per cell removes most of the
/// orientation sensitivity.
pub fn infer_scores(
    raster: &SemanticRaster,
    base: &BaseGrid,
    params: &RetrievalParams,
    desc: &DescriptorConfig,
    rotations: usize,
) -> Result<RetrievalScores> {
    let rotations = rotations.max(1);
    let mut fused: Option<Vec<f64>> = None;
    for r in 0..rotations {
        let angle = r as f64 * 2.0 * core::f64::consts::PI / rotations as f64;
        let view = if r == 0 { raster.clone() } else { raster.rotated_by(angle) };
        let tokens = tokenize(&view, desc)?;
        let scores = score_cells(&tokens, base, params)?;
        match fused.as_mut() {
            None => fused = Some(scores.logits),
            Some(f) => {
                for (fv, s) in f.iter_mut().zip(scores.logits) {
                    if s > *fv {
                        *fv = s;
                    }
                }
            }
        }
    }
    Ok(RetrievalScores { logits: fused.unwrap() })
}

/// Predicted cell for a query raster (argmax of [`infer_scores`]).
pub fn infer_cell(
    raster: &SemanticRaster,
    base: &BaseGrid,
    params: &RetrievalParams,
    desc: &DescriptorConfig,
    rotations: usize,
) -> Result<GridIndex> {
    let scores = infer_scores(raster, base, params, desc, rotations)?;
    Ok(top_cells(&scores, 1, params.grid_dim)[0])
}

/// A query raster to rotate and tokenize.
pub struct EncodeJob<'a> {
    pub raster: &'a SemanticRaster,
    pub rotation: f64,
}

/// Rotates and tokenizes query rasters a batch at a time. Encoding is
/// pure, so implementations are free to fan the batch out over threads;
/// the parameter updates themselves stay single-threaded.
pub trait QueryEncoder: Sync {
    fn encode_batch(
        &self,
        desc: &DescriptorConfig,
        jobs: &[EncodeJob<'_>],
    ) -> Result<Vec<TokenGrid>>;
}

/// Default in-order encoder.
pub struct SequentialEncoder;

impl QueryEncoder for SequentialEncoder {
    fn encode_batch(
        &self,
        desc: &DescriptorConfig,
        jobs: &[EncodeJob<'_>],
    ) -> Result<Vec<TokenGrid>> {
        jobs.iter().map(|job| encode_one(desc, job)).collect()
    }
}

/// Rotate-and-tokenize for one job; shared by every encoder.
pub fn encode_one(desc: &DescriptorConfig, job: &EncodeJob<'_>) -> Result<TokenGrid> {
    if job.rotation == 0.0 {
        tokenize(job.raster, desc)
    } else {
        tokenize(&job.raster.rotated_by(job.rotation), desc)
    }
}

/// One training example: a (possibly fused, possibly degraded) query
/// raster, the map it came from, and the ground-truth cell.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub query: SemanticRaster,
    pub map_id: usize,
    pub target: GridIndex,
}

/// Hyperparameters of the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Adam first-moment decay.
    pub beta1: f64,
    pub loss: LossConfig,
    pub seed: u64,
    /// Re-render each query at a random heading every epoch, drawn within
    /// `augment_spread` of its stored heading.
    pub augment_rotations: bool,
    /// Half-width of the augmentation jitter, radians. Inference scores
    /// `eval_rotations` discrete rotations and takes the per-cell max, so
    /// training only has to cover the residual between rotation stops.
    pub augment_spread: f64,
    /// Rotations scored at validation/inference time.
    pub eval_rotations: usize,
    pub descriptor: DescriptorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: 3e-3,
            beta1: 0.9,
            loss: LossConfig::default(),
            seed: 0,
            augment_rotations: true,
            augment_spread: core::f64::consts::PI / 8.0,
            eval_rotations: 8,
            descriptor: DescriptorConfig::default(),
        }
    }
}

/// One learning-curve row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: f64,
    pub val_top3: f64,
}

/// Result of a training run: the parameter set with the best held-out
/// 3x3 accuracy, plus the learning curve.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: RetrievalParams,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// Top-1x1 / top-3x3 accuracy of `params` over labelled samples.
pub fn evaluate_accuracy(
    samples: &[TrainSample],
    base_grids: &[BaseGrid],
    params: &RetrievalParams,
    desc: &DescriptorConfig,
    rotations: usize,
) -> Result<(f64, f64)> {
    evaluate_accuracy_with(&SequentialEncoder, samples, base_grids, params, desc, rotations)
}

/// [`evaluate_accuracy`] with a caller-supplied (possibly parallel)
/// encoder for the rotated query views.
pub fn evaluate_accuracy_with(
    encoder: &dyn QueryEncoder,
    samples: &[TrainSample],
    base_grids: &[BaseGrid],
    params: &RetrievalParams,
    desc: &DescriptorConfig,
    rotations: usize,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(CoreError::UndefinedMetric);
    }
    let rotations = rotations.max(1);
    let mut jobs = Vec::with_capacity(samples.len() * rotations);
    for sample in samples {
        for r in 0..rotations {
            jobs.push(EncodeJob {
                raster: &sample.query,
                rotation: r as f64 * 2.0 * core::f64::consts::PI / rotations as f64,
            });
        }
    }
    let grids = encoder.encode_batch(desc, &jobs)?;

    let mut hit1 = 0usize;
    let mut hit3 = 0usize;
    for (si, sample) in samples.iter().enumerate() {
        let mut fused: Vec<f64> = Vec::new();
        for grid in &grids[si * rotations..(si + 1) * rotations] {
            let scores = score_cells(grid, &base_grids[sample.map_id], params)?;
            if fused.is_empty() {
                fused = scores.logits;
            } else {
                for (f, s) in fused.iter_mut().zip(scores.logits) {
                    if s > *f {
                        *f = s;
                    }
                }
            }
        }
        let pred = top_cells(&RetrievalScores { logits: fused }, 1, params.grid_dim)[0];
        if pred == sample.target {
            hit1 += 1;
        }
        if pred.chebyshev(&sample.target) <= 1 {
            hit3 += 1;
        }
    }
    Ok((hit1 as f64 / samples.len() as f64, hit3 as f64 / samples.len() as f64))
}

/// Mini-batch Adam over all retrieval parameters with cosine
/// learning-rate decay, per-epoch seeded shuffling and rotation
/// augmentation. Returns the parameters of the epoch with the best
/// held-out top-3x3 accuracy.
pub fn train(
    train_samples: &[TrainSample],
    val_samples: &[TrainSample],
    base_grids: &[BaseGrid],
    cfg: &TrainConfig,
    spec: &MapSpec,
) -> Result<TrainOutcome> {
    train_with_encoder(&SequentialEncoder, train_samples, val_samples, base_grids, cfg, spec)
}

/// [`train`] with a caller-supplied (possibly parallel) encoder for the
/// augmented query views.
pub fn train_with_encoder(
    encoder: &dyn QueryEncoder,
    train_samples: &[TrainSample],
    val_samples: &[TrainSample],
    base_grids: &[BaseGrid],
    cfg: &TrainConfig,
    spec: &MapSpec,
) -> Result<TrainOutcome> {
    if train_samples.is_empty() {
        return Err(CoreError::InvalidConfig("training set is empty".into()));
    }
    for s in train_samples.iter().chain(val_samples) {
        if s.map_id >= base_grids.len() {
            return Err(CoreError::Shape(alloc::format!(
                "sample references map {} but only {} base grids exist",
                s.map_id,
                base_grids.len()
            )));
        }
    }

    let mut params = RetrievalParams::init(
        cfg.descriptor.dim,
        8,
        spec.window_px() / cfg.descriptor.token_px,
        spec.window_px() / cfg.descriptor.token_px,
        spec.grid_dim,
        cfg.seed,
    )?;
    let mut adam_m = params.zeros_like();
    let mut adam_v = params.zeros_like();
    let mut adam_step = 0usize;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, RetrievalParams)> = None;
    let mut loss_trace: Vec<f64> = Vec::new();

    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate
            * 0.5
            * (1.0 + math::cos(core::f64::consts::PI * epoch as f64 / cfg.epochs as f64));
        let mut rng = Rng::substream(cfg.seed, epoch as u64 + 1);
        rng.shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            // Augmentation angles are drawn in sample order before any
            // encoding happens, so parallel encoders see the same jobs.
            let jobs: Vec<EncodeJob<'_>> = batch
                .iter()
                .map(|&si| EncodeJob {
                    raster: &train_samples[si].query,
                    rotation: if cfg.augment_rotations {
                        rng.range(-cfg.augment_spread, cfg.augment_spread)
                    } else {
                        0.0
                    },
                })
                .collect();
            let token_grids = encoder.encode_batch(&cfg.descriptor, &jobs)?;

            let mut grad = params.zeros_like();
            let mut batch_loss = 0.0;
            for (&si, tokens) in batch.iter().zip(&token_grids) {
                let sample = &train_samples[si];
                let (scores, cache) =
                    score_cells_with_cache(tokens, &base_grids[sample.map_id], &params)?;
                let (l, dlogits) = loss(&scores, &sample.target, &cfg.loss, spec);
                if !l.is_finite() {
                    return Err(CoreError::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        trace: loss_trace,
                    });
                }
                batch_loss += l;
                let g = score_cells_backward(&cache, &params, &dlogits);
                grad.scaled_add(&g, 1.0 / batch.len() as f64);
            }
            batch_loss /= batch.len() as f64;
            loss_trace.push(batch_loss);
            if loss_trace.len() > 64 {
                loss_trace.remove(0);
            }
            epoch_loss += batch_loss * batch.len() as f64;
            seen += batch.len();

            adam_step += 1;
            adam_update(&mut params, &grad, &mut adam_m, &mut adam_v, adam_step, lr, cfg.beta1);
        }
        let train_loss = epoch_loss / seen as f64;

        // Per-epoch monitoring runs on a fixed held-out subset; scoring
        // hundreds of rotations of the full validation set every epoch
        // would dwarf the training itself.
        let monitor = &val_samples[..val_samples.len().min(200)];
        let (val_top1, val_top3) = if monitor.is_empty() {
            (0.0, 0.0)
        } else {
            evaluate_accuracy_with(
                encoder,
                monitor,
                base_grids,
                &params,
                &cfg.descriptor,
                cfg.eval_rotations,
            )?
        };
        curve.push(EpochStats { epoch, train_loss, val_top1, val_top3 });

        let better = match &best {
            None => true,
            Some((score, _, _)) => val_top3 > *score,
        };
        if better {
            best = Some((val_top3, epoch, params.clone()));
        }
    }

    let (params, best_epoch) = match best {
        Some((_, epoch, p)) => (p, epoch),
        None => (params, 0),
    };
    Ok(TrainOutcome { params, curve, best_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil;
    use approx::assert_relative_eq;

    fn small_spec() -> MapSpec {
        MapSpec { extent_m: 200.0, resolution: 0.5, grid_dim: 4, window_m: 60.0 }
    }

    fn random_grid(rows: usize, cols: usize, dim: usize, seed: u64) -> TokenGrid {
        let mut rng = Rng::new(seed);
        let mut data = vec![0.0; rows * cols * dim];
        for t in 0..rows * cols {
            let mut norm = 0.0;
            for k in 0..dim {
                let v = rng.normal();
                data[t * dim + k] = v;
                norm += v * v;
            }
            let norm = math::sqrt(norm);
            for k in 0..dim {
                data[t * dim + k] /= norm;
            }
        }
        TokenGrid::from_data(rows, cols, dim, data)
    }

    fn random_base(grid_dim: usize, dim: usize, seed: u64) -> BaseGrid {
        let g = random_grid(grid_dim, grid_dim, dim, seed);
        BaseGrid { grid_dim, dim, data: g.data }
    }

    #[test]
    fn soft_target_sums_to_one_and_is_positive() {
        let spec = MapSpec::default();
        for sigma in [5.0, 50.0, 500.0] {
            let y = soft_target(&GridIndex::new(3, 7), &spec, sigma);
            let sum: f64 = y.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sigma {sigma}: sum {sum}");
        }
        // Strict positivity holds wherever the Gaussian tail is
        // representable; below sigma ~17 m the far corners of a 500 m grid
        // underflow f64 entirely.
        for sigma in [25.0, 50.0, 500.0] {
            let y = soft_target(&GridIndex::new(3, 7), &spec, sigma);
            assert!(y.iter().all(|&v| v > 0.0), "sigma {sigma}");
        }
    }

    #[test]
    fn soft_target_vanishing_sigma_is_one_hot() {
        let spec = MapSpec::default();
        let target = GridIndex::new(2, 2);
        let y = soft_target(&target, &spec, 1e-3);
        for (flat, &v) in y.iter().enumerate() {
            if flat == target.flat(spec.grid_dim) {
                assert!((v - 1.0).abs() < 1e-12);
            } else {
                assert!(v.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn soft_target_neighbor_ratio_at_cell_pitch() {
        let spec = MapSpec::default();
        let y = soft_target(&GridIndex::new(5, 5), &spec, 50.0);
        let center = y[GridIndex::new(5, 5).flat(10)];
        let neighbor = y[GridIndex::new(5, 6).flat(10)];
        assert_relative_eq!(center / neighbor, (0.5f64).exp(), epsilon = 1e-9);
    }

    #[test]
    fn zero_logits_give_ln2_bce() {
        let spec = MapSpec::default();
        let scores = RetrievalScores { logits: vec![0.0; 100] };
        let (bce, _) = loss_components(&scores, &GridIndex::new(4, 4), &LossConfig::default(), &spec);
        assert_relative_eq!(bce, core::f64::consts::LN_2, epsilon = 1e-9);
    }

    #[test]
    fn equal_logits_give_ln_n_distance_loss() {
        let spec = MapSpec::default();
        let scores = RetrievalScores { logits: vec![1.7; 100] };
        let (_, dist) = loss_components(&scores, &GridIndex::new(9, 0), &LossConfig::default(), &spec);
        assert_relative_eq!(dist, (100.0f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let spec = MapSpec::default();
        let mut rng = Rng::new(4242);
        let logits: Vec<f64> = (0..100).map(|_| rng.normal() * 2.0).collect();
        let target = GridIndex::new(rng.below(10), rng.below(10));
        let cfg = LossConfig { lambda: 1.0, sigma_d: 50.0 };
        let scores = RetrievalScores { logits: logits.clone() };
        let (_, grad) = loss(&scores, &target, &cfg, &spec);
        let fd = testutil::loss_grad_fd(&logits, target.flat(10), &cfg, &spec, 1e-4);
        for (a, n) in grad.iter().zip(&fd) {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!((a - n).abs() / denom < 1e-4, "analytic {a} vs fd {n}");
        }
    }

    #[test]
    fn lambda_strictly_scales_total_loss() {
        let spec = MapSpec::default();
        let mut rng = Rng::new(7);
        let scores = RetrievalScores { logits: (0..100).map(|_| rng.normal()).collect() };
        let target = GridIndex::new(5, 5);
        let l0 = loss(&scores, &target, &LossConfig { lambda: 0.0, sigma_d: 50.0 }, &spec).0;
        let l1 = loss(&scores, &target, &LossConfig { lambda: 1.0, sigma_d: 50.0 }, &spec).0;
        let l2 = loss(&scores, &target, &LossConfig { lambda: 2.0, sigma_d: 50.0 }, &spec).0;
        assert!(l1 > l0 && l2 > l1);
        assert_relative_eq!(l2 - l1, l1 - l0, epsilon = 1e-9);
    }

    #[test]
    fn top_cells_examples() {
        let scores = RetrievalScores { logits: (0..100).map(|i| i as f64).collect() };
        assert_eq!(top_cells(&scores, 1, 10)[0], GridIndex::new(9, 9));

        let flat = RetrievalScores { logits: vec![3.0; 100] };
        assert_eq!(top_cells(&flat, 1, 10)[0], GridIndex::new(0, 0));

        let mut rng = Rng::new(55);
        let random = RetrievalScores { logits: (0..100).map(|_| rng.normal()).collect() };
        let got = top_cells(&random, 100, 10);
        let mut expect: Vec<usize> = (0..100).collect();
        expect.sort_by(|&a, &b| random.logits[b].total_cmp(&random.logits[a]).then(a.cmp(&b)));
        for (g, e) in got.iter().zip(expect) {
            assert_eq!(g.flat(10), e);
        }
    }

    #[test]
    fn adding_a_constant_does_not_move_the_argmax() {
        let mut rng = Rng::new(88);
        let logits: Vec<f64> = (0..100).map(|_| rng.normal()).collect();
        let a = top_cells(&RetrievalScores { logits: logits.clone() }, 5, 10);
        let shifted: Vec<f64> = logits.iter().map(|z| z + 123.45).collect();
        let b = top_cells(&RetrievalScores { logits: shifted }, 5, 10);
        assert_eq!(a, b);
    }

    #[test]
    fn forward_matches_naive_reference() {
        let dim = 16;
        let params = RetrievalParams::init(dim, 4, 3, 3, 4, 11).unwrap();
        let query = random_grid(3, 3, dim, 21);
        let base = random_base(4, dim, 22);
        let fast = score_cells(&query, &base, &params).unwrap();
        let slow = testutil::score_cells_reference(&query, &base, &params);
        for (a, b) in fast.logits.iter().zip(&slow.logits) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_query_and_embeddings_yield_the_bias() {
        let dim = 16;
        let mut params = RetrievalParams::init(dim, 4, 3, 3, 4, 3).unwrap();
        params.query_pos.fill(0.0);
        params.base_pos.fill(0.0);
        let mut rng = Rng::new(5);
        for b in params.head_bias.iter_mut() {
            *b = rng.normal();
        }
        let query = TokenGrid::from_data(3, 3, dim, vec![0.0; 9 * dim]);
        let base = BaseGrid { grid_dim: 4, dim, data: vec![0.0; 16 * dim] };
        let scores = score_cells(&query, &base, &params).unwrap();
        for (z, b) in scores.logits.iter().zip(&params.head_bias) {
            assert_relative_eq!(z, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn permuting_base_cells_permutes_logits() {
        let dim = 16;
        let n = 16;
        let params = RetrievalParams::init(dim, 4, 3, 3, 4, 17).unwrap();
        let query = random_grid(3, 3, dim, 31);
        let base = random_base(4, dim, 32);

        // Reverse permutation of base cells, their positional embeddings
        // and the head rows.
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut base_p = base.clone();
        let mut params_p = params.clone();
        for (dst, &src) in perm.iter().enumerate() {
            base_p.data[dst * dim..(dst + 1) * dim]
                .copy_from_slice(&base.data[src * dim..(src + 1) * dim]);
            params_p.base_pos[dst * dim..(dst + 1) * dim]
                .copy_from_slice(&params.base_pos[src * dim..(src + 1) * dim]);
            params_p.head_weight[dst * dim..(dst + 1) * dim]
                .copy_from_slice(&params.head_weight[src * dim..(src + 1) * dim]);
            params_p.head_bias[dst] = params.head_bias[src];
        }

        let plain = score_cells(&query, &base, &params).unwrap();
        let permuted = score_cells(&query, &base_p, &params_p).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_relative_eq!(permuted.logits[dst], plain.logits[src], epsilon = 1e-12);
        }
    }

    /// Full-loss gradient check through attention on one seeded
    /// configuration; the acceptance suite runs 20 of these.
    #[test]
    fn attention_gradients_match_finite_differences() {
        let spec = small_spec();
        for seed in [1u64, 2, 3] {
            let rel = testutil_gradcheck(seed, &spec);
            assert!(rel < 1e-3, "seed {seed}: max rel error {rel}");
        }
    }

    /// Maximum relative error between analytic and finite-difference
    /// gradients over a sample of parameter coordinates.
    pub(crate) fn testutil_gradcheck(seed: u64, spec: &MapSpec) -> f64 {
        fn tensor_mut(p: &mut RetrievalParams, which: usize) -> &mut Vec<f64> {
            match which {
                0 => &mut p.query_pos,
                1 => &mut p.base_pos,
                2 => &mut p.w_query,
                3 => &mut p.w_key,
                4 => &mut p.w_value,
                5 => &mut p.w_output,
                6 => &mut p.head_weight,
                _ => &mut p.head_bias,
            }
        }

        let dim = 16;
        let params = RetrievalParams::init(dim, 4, 3, 3, spec.grid_dim, seed).unwrap();
        let query = random_grid(3, 3, dim, seed ^ 0x71);
        let base = random_base(spec.grid_dim, dim, seed ^ 0xb2);
        let cfg = LossConfig { lambda: 1.0, sigma_d: spec.cell_m() };
        let target =
            GridIndex::new(seed as usize % spec.grid_dim, (seed as usize / 3) % spec.grid_dim);

        let eval = |p: &RetrievalParams| -> f64 {
            let scores = score_cells(&query, &base, p).unwrap();
            loss(&scores, &target, &cfg, spec).0
        };

        let (scores, cache) = score_cells_with_cache(&query, &base, &params).unwrap();
        let (_, dlogits) = loss(&scores, &target, &cfg, spec);
        let analytic = score_cells_backward(&cache, &params, &dlogits);

        let mut rng = Rng::new(seed ^ 0xfd);
        let mut worst = 0.0f64;
        let step = 1e-5;
        for _ in 0..48 {
            let which = rng.below(8);
            let mut p = params.clone();
            let idx = rng.below(tensor_mut(&mut p, which).len());
            let orig = tensor_mut(&mut p, which)[idx];
            tensor_mut(&mut p, which)[idx] = orig + step;
            let up = eval(&p);
            tensor_mut(&mut p, which)[idx] = orig - step;
            let down = eval(&p);
            let fd = (up - down) / (2.0 * step);
            let mut ganalytic = analytic.clone();
            let ga = tensor_mut(&mut ganalytic, which)[idx];
            let denom = fd.abs().max(ga.abs()).max(1e-8);
            worst = worst.max((fd - ga).abs() / denom);
        }
        worst
    }

    #[test]
    fn training_is_deterministic_and_memorizes_one_sample() {
        let spec = small_spec();
        let desc = DescriptorConfig { dim: 32, token_px: 20, proj_seed: 7 };
        // 120 px window -> 6x6 query tokens.
        let mut raster = SemanticRaster::filled(spec.window_px(), spec.window_px(), 0.5);
        let mut rng = Rng::new(12);
        for _ in 0..30 {
            let (r, c) = (rng.below(100), rng.below(100));
            for i in r..(r + 12).min(120) {
                for j in c..(c + 12).min(120) {
                    raster.set(i, j, (rng.below(6) + 1) as u8);
                }
            }
        }
        let sample = TrainSample { query: raster, map_id: 0, target: GridIndex::new(1, 2) };
        let tokens_side = spec.window_px() / desc.token_px;
        let base = random_base(spec.grid_dim, desc.dim, 40);
        let _ = tokens_side;

        // Pure classification loss; the distance term's soft target keeps
        // a strictly positive cross-entropy floor, so the sub-0.05
        // memorization check is only meaningful at lambda = 0.
        let cfg = TrainConfig {
            epochs: 120,
            batch_size: 1,
            learning_rate: 0.05,
            loss: LossConfig { lambda: 0.0, sigma_d: spec.cell_m() },
            seed: 9,
            augment_rotations: false,
            eval_rotations: 1,
            descriptor: desc,
            ..TrainConfig::default()
        };
        let out = train(&[sample.clone()], &[], &[base.clone()], &cfg, &spec).unwrap();
        let final_loss = out.curve.last().unwrap().train_loss;
        assert!(final_loss < 0.05, "final loss {final_loss}");

        let again = train(&[sample], &[], &[base], &cfg, &spec).unwrap();
        assert_eq!(out.params, again.params, "same seed must give identical parameters");
    }

    #[test]
    fn zero_epochs_returns_seeded_initialization() {
        let spec = small_spec();
        let desc = DescriptorConfig { dim: 32, token_px: 20, proj_seed: 7 };
        let raster = SemanticRaster::filled(spec.window_px(), spec.window_px(), 0.5);
        let sample = TrainSample { query: raster, map_id: 0, target: GridIndex::new(0, 0) };
        let base = random_base(spec.grid_dim, desc.dim, 1);
        let cfg = TrainConfig { epochs: 0, descriptor: desc, ..TrainConfig::default() };
        let out = train(&[sample], &[], &[base], &cfg, &spec).unwrap();
        let init = RetrievalParams::init(
            desc.dim,
            8,
            spec.window_px() / desc.token_px,
            spec.window_px() / desc.token_px,
            spec.grid_dim,
            cfg.seed,
        )
        .unwrap();
        assert_eq!(out.params, init);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let params = RetrievalParams::init(16, 4, 3, 3, 4, 0).unwrap();
        let query = random_grid(2, 3, 16, 1);
        let base = random_base(4, 16, 2);
        assert!(matches!(score_cells(&query, &base, &params), Err(CoreError::Shape(_))));
    }
}
