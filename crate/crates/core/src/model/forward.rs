//! Masked-attention forward pass with KV cache and optional attention
//! recording. Query rows never contribute cache entries.

use ndarray::{s, Array1, Array2, ArrayView2};

use crate::grid::GridPos;
use crate::mask::AttentionMask;

use super::ModelState;

/// One input row of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenInput {
    Condition { class: usize },
    Context { token: usize, pos: GridPos },
    Query { pos: GridPos },
}

impl TokenInput {
    pub fn is_query(&self) -> bool {
        matches!(self, TokenInput::Query { .. })
    }
}

/// What a cached or in-flight column corresponds to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColMeta {
    Condition,
    Context(GridPos),
    Query(GridPos),
}

impl ColMeta {
    pub fn pos(&self) -> Option<GridPos> {
        match self {
            ColMeta::Condition => None,
            ColMeta::Context(p) | ColMeta::Query(p) => Some(*p),
        }
    }
}

#[derive(Debug, Clone)]
struct LayerKV {
    k: Vec<f64>,
    v: Vec<f64>,
}

/// Per-layer cached keys/values. Length grows only through condition and
/// context rows.
#[derive(Debug, Clone)]
pub struct KVCache {
    layers: Vec<LayerKV>,
    dim: usize,
    len: usize,
    col_meta: Vec<ColMeta>,
}

impl KVCache {
    pub fn new(layers: usize, dim: usize) -> Self {
        KVCache {
            layers: (0..layers).map(|_| LayerKV { k: Vec::new(), v: Vec::new() }).collect(),
            dim,
            len: 0,
            col_meta: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn col_meta(&self) -> &[ColMeta] {
        &self.col_meta
    }

    fn layer_k(&self, l: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len, self.dim), &self.layers[l].k).unwrap()
    }

    fn layer_v(&self, l: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len, self.dim), &self.layers[l].v).unwrap()
    }
}

/// Attention weights recorded for one fused step.
#[derive(Debug, Clone)]
pub struct StepAttention {
    pub step: usize,
    /// Meta for every column visible in this step: cache then the fresh
    /// block.
    pub cols: Vec<ColMeta>,
    pub rows: Vec<RecordedRow>,
}

/// One query row of attention weights for one (layer, head).
#[derive(Debug, Clone)]
pub struct RecordedRow {
    pub layer: usize,
    pub head: usize,
    pub query_pos: GridPos,
    /// Probability over all columns; zero on masked columns.
    pub weights: Vec<f64>,
}

/// Recorded attention for a whole decode trace.
#[derive(Debug, Clone, Default)]
pub struct AttentionRecord {
    pub steps: Vec<StepAttention>,
}

pub(crate) fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma[j] + beta[j];
        }
    }
    out
}

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn gelu(u: f64) -> f64 {
    const A: f64 = 0.7978845608028654; // sqrt(2/pi)
    const B: f64 = 0.044715;
    0.5 * u * (1.0 + (A * (u + B * u * u * u)).tanh())
}

pub(crate) fn gelu_prime(u: f64) -> f64 {
    const A: f64 = 0.7978845608028654;
    const B: f64 = 0.044715;
    let t = (A * (u + B * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * A * (1.0 + 3.0 * B * u * u)
}

fn add_bias(mut x: Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    for mut row in x.rows_mut() {
        row += b;
    }
    x
}

/// Softmax over the allowed columns of each row; disallowed columns get
/// exactly zero weight. Panics if a row has no visible column.
pub(crate) fn masked_softmax_rows<F: Fn(usize, usize) -> bool>(
    scores: &mut Array2<f64>,
    allowed: F,
) {
    let cols = scores.ncols();
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for j in 0..cols {
            if allowed(i, j) {
                max = max.max(row[j]);
            }
        }
        assert!(max.is_finite(), "attention row {i} has no visible column");
        let mut sum = 0.0;
        for j in 0..cols {
            if allowed(i, j) {
                row[j] = (row[j] - max).exp();
                sum += row[j];
            } else {
                row[j] = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

pub(crate) fn embed_inputs(state: &ModelState, inputs: &[TokenInput]) -> Array2<f64> {
    let d = state.config.embed_dim;
    let side = state.config.side;
    let mut x = Array2::zeros((inputs.len(), d));
    for (i, input) in inputs.iter().enumerate() {
        let mut row = x.row_mut(i);
        match input {
            TokenInput::Condition { class } => {
                assert!(*class <= state.config.num_classes, "class id out of range");
                row.assign(&state.params.class_emb.row(*class));
            }
            TokenInput::Context { token, pos } => {
                assert!(*token < state.config.vocab_size, "token id out of range");
                let pi = pos.row * side + pos.col;
                row.assign(&state.params.tok_emb.row(*token));
                row += &state.params.pos_emb.row(pi);
            }
            TokenInput::Query { pos } => {
                let pi = pos.row * side + pos.col;
                row.assign(&state.params.query_emb);
                row += &state.params.pos_emb.row(pi);
            }
        }
    }
    x
}

/// Runs one fused step: encodes the non-query rows into the cache and
/// returns logits for the query rows, in input order.
///
/// `mask` must have `inputs.len()` rows and `cache.len() + inputs.len()`
/// columns. Non-query rows must precede query rows. When `record` is
/// set, query-row attention weights for every layer and head are
/// appended there.
pub fn forward_step(
    state: &ModelState,
    inputs: &[TokenInput],
    mask: &AttentionMask,
    cache: &mut KVCache,
    mut record: Option<&mut StepAttention>,
) -> Array2<f64> {
    let cfg = &state.config;
    let l_new = inputs.len();
    assert_eq!(mask.rows, l_new, "mask rows must match inputs");
    assert_eq!(mask.cols, cache.len() + l_new, "mask cols must match cache + inputs");
    let first_query = inputs.iter().position(|i| i.is_query()).unwrap_or(l_new);
    assert!(
        inputs[first_query..].iter().all(|i| i.is_query()),
        "query rows must come after context rows"
    );

    if let Some(rec) = record.as_deref_mut() {
        rec.cols = cache
            .col_meta
            .iter()
            .copied()
            .chain(inputs.iter().map(|i| match i {
                TokenInput::Condition { .. } => ColMeta::Condition,
                TokenInput::Context { pos, .. } => ColMeta::Context(*pos),
                TokenInput::Query { pos } => ColMeta::Query(*pos),
            }))
            .collect();
    }

    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = embed_inputs(state, inputs);

    for (l, lp) in state.params.layers.iter().enumerate() {
        let h1 = layer_norm(&x, &lp.ln1.gamma, &lp.ln1.beta);
        let q = add_bias(h1.dot(&lp.wq), &lp.bq);
        let k_new = add_bias(h1.dot(&lp.wk), &lp.bk);
        let v_new = add_bias(h1.dot(&lp.wv), &lp.bv);

        let c_total = cache.len() + l_new;
        let mut k_full = Array2::zeros((c_total, d));
        let mut v_full = Array2::zeros((c_total, d));
        if cache.len() > 0 {
            k_full.slice_mut(s![..cache.len(), ..]).assign(&cache.layer_k(l));
            v_full.slice_mut(s![..cache.len(), ..]).assign(&cache.layer_v(l));
        }
        k_full.slice_mut(s![cache.len().., ..]).assign(&k_new);
        v_full.slice_mut(s![cache.len().., ..]).assign(&v_new);

        let mut attn_concat = Array2::zeros((l_new, d));
        for h in 0..cfg.heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![.., cols.clone()]);
            let kh = k_full.slice(s![.., cols.clone()]);
            let vh = v_full.slice(s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|v| v * scale);
            masked_softmax_rows(&mut scores, |i, j| mask.allowed(i, j));
            if let Some(rec) = record.as_deref_mut() {
                for (i, input) in inputs.iter().enumerate() {
                    if let TokenInput::Query { pos } = input {
                        rec.rows.push(RecordedRow {
                            layer: l,
                            head: h,
                            query_pos: *pos,
                            weights: scores.row(i).to_vec(),
                        });
                    }
                }
            }
            let ah = scores.dot(&vh);
            attn_concat.slice_mut(s![.., cols]).assign(&ah);
        }
        let attn_out = add_bias(attn_concat.dot(&lp.wo), &lp.bo);
        x += &attn_out;

        let h2 = layer_norm(&x, &lp.ln2.gamma, &lp.ln2.beta);
        let u = add_bias(h2.dot(&lp.w1), &lp.b1);
        let g = u.mapv(gelu);
        let m = add_bias(g.dot(&lp.w2), &lp.b2);
        x += &m;

        // Only condition/context rows enter the cache.
        let kv = &mut cache.layers[l];
        for i in 0..first_query {
            kv.k.extend(k_new.row(i).iter());
            kv.v.extend(v_new.row(i).iter());
        }
    }

    for input in &inputs[..first_query] {
        cache.col_meta.push(match input {
            TokenInput::Condition { .. } => ColMeta::Condition,
            TokenInput::Context { pos, .. } => ColMeta::Context(*pos),
            TokenInput::Query { .. } => unreachable!(),
        });
    }
    cache.len += first_query;

    let hf = layer_norm(&x, &state.params.ln_f.gamma, &state.params.ln_f.beta);
    let logits_all = add_bias(hf.dot(&state.params.out_w), &state.params.out_b);
    logits_all.slice(s![first_query.., ..]).to_owned()
}

/// Attention-weight sanity over a recorded trace: each row sums to 1 and
/// is zero on columns the mask hid. Used by tests.
pub fn record_rows_are_distributions(record: &AttentionRecord) -> bool {
    record.steps.iter().all(|step| {
        step.rows.iter().all(|row| {
            let sum: f64 = row.weights.iter().sum();
            (sum - 1.0).abs() < 1e-6 && row.weights.iter().all(|&w| w >= 0.0)
        })
    })
}
