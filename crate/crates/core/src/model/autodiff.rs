//! Full-sequence training forward pass with cached intermediates and the
//! hand-written reverse-mode backward pass. The loss is mean
//! cross-entropy over query rows only.

use ndarray::{s, Array1, Array2};

use crate::data::TokenGrid;
use crate::mask::{build_training_layout, build_training_mask, AttentionMask, SequenceLayout, TokenKind};
use crate::model::forward::{embed_inputs, gelu, gelu_prime, masked_softmax_rows, LN_EPS};
use crate::model::{ModelParams, ModelState, TokenInput};
use crate::schedule::OrderSchedule;

/// One training sample: a ground-truth grid, its (possibly dropped-out)
/// class id, and the decoding schedule drawn for it.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub grid: TokenGrid,
    pub class: usize,
    pub schedule: OrderSchedule,
}

struct LnTrace {
    /// Normalized activations before gain/shift.
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm_trace(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array2<f64>, LnTrace) {
    let d = x.ncols() as f64;
    let n = x.nrows();
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut inv_std = Array1::zeros(n);
    let mut out = Array2::zeros(x.raw_dim());
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = inv;
        for j in 0..x.ncols() {
            let h = (row[j] - mean) * inv;
            xhat[[i, j]] = h;
            out[[i, j]] = h * gamma[j] + beta[j];
        }
    }
    (out, LnTrace { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    trace: &LnTrace,
    gamma: &Array1<f64>,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    let (n, d) = (dy.nrows(), dy.ncols());
    let df = d as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..n {
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let dyij = dy[[i, j]];
            let xh = trace.xhat[[i, j]];
            dgamma[j] += dyij * xh;
            dbeta[j] += dyij;
            let dxhat = dyij * gamma[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xh;
        }
        let inv = trace.inv_std[i];
        for j in 0..d {
            let dxhat = dy[[i, j]] * gamma[j];
            dx[[i, j]] = inv * (dxhat - sum_dxhat / df - trace.xhat[[i, j]] * sum_dxhat_xhat / df);
        }
    }
    dx
}

struct LayerTrace {
    h1: Array2<f64>,
    ln1: LnTrace,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per head attention probabilities.
    probs: Vec<Array2<f64>>,
    attn_concat: Array2<f64>,
    h2: Array2<f64>,
    ln2: LnTrace,
    u: Array2<f64>,
    g: Array2<f64>,
}

/// Intermediates of a training forward pass, for one sequence.
pub struct TrainTrace {
    pub layout: SequenceLayout,
    inputs: Vec<TokenInput>,
    layers: Vec<LayerTrace>,
    hf: Array2<f64>,
    lnf: LnTrace,
    /// Logits for every row; callers usually read only query rows.
    pub logits: Array2<f64>,
}

impl TrainTrace {
    /// Logits restricted to query rows, in layout order.
    pub fn query_logits(&self) -> Array2<f64> {
        let idx = self.layout.query_indices();
        let mut out = Array2::zeros((idx.len(), self.logits.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&self.logits.row(i));
        }
        out
    }
}

fn add_bias(mut x: Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    for mut row in x.rows_mut() {
        row += b;
    }
    x
}

/// Builds inputs in layout order from a grid and class id.
pub(crate) fn layout_inputs(layout: &SequenceLayout, grid: &TokenGrid, class: usize) -> Vec<TokenInput> {
    layout
        .entries
        .iter()
        .map(|e| match e.kind {
            TokenKind::Condition => TokenInput::Condition { class },
            TokenKind::Context => {
                let p = e.pos.unwrap();
                TokenInput::Context { token: grid.get(p), pos: p }
            }
            TokenKind::Query => TokenInput::Query { pos: e.pos.unwrap() },
        })
        .collect()
}

/// Full-sequence forward pass under a training mask, keeping every
/// intermediate needed by [`backward`].
pub fn train_forward(
    state: &ModelState,
    layout: SequenceLayout,
    inputs: Vec<TokenInput>,
    mask: AttentionMask,
) -> TrainTrace {
    let cfg = &state.config;
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    assert_eq!(mask.rows, inputs.len());
    assert_eq!(mask.cols, inputs.len());

    let mut x = embed_inputs(state, &inputs);
    let mut layers = Vec::with_capacity(cfg.layers);
    for lp in &state.params.layers {
        let (h1, ln1) = layer_norm_trace(&x, &lp.ln1.gamma, &lp.ln1.beta);
        let q = add_bias(h1.dot(&lp.wq), &lp.bq);
        let k = add_bias(h1.dot(&lp.wk), &lp.bk);
        let v = add_bias(h1.dot(&lp.wv), &lp.bv);

        let mut probs = Vec::with_capacity(cfg.heads);
        let mut attn_concat = Array2::zeros((x.nrows(), d));
        for h in 0..cfg.heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![.., cols.clone()]);
            let kh = k.slice(s![.., cols.clone()]);
            let vh = v.slice(s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|val| val * scale);
            masked_softmax_rows(&mut scores, |i, j| mask.allowed(i, j));
            let ah = scores.dot(&vh);
            attn_concat.slice_mut(s![.., cols]).assign(&ah);
            probs.push(scores);
        }
        let attn_out = add_bias(attn_concat.dot(&lp.wo), &lp.bo);
        x += &attn_out;

        let (h2, ln2) = layer_norm_trace(&x, &lp.ln2.gamma, &lp.ln2.beta);
        let u = add_bias(h2.dot(&lp.w1), &lp.b1);
        let g = u.mapv(gelu);
        let m = add_bias(g.dot(&lp.w2), &lp.b2);
        x += &m;

        layers.push(LayerTrace {
            h1,
            ln1,
            q,
            k,
            v,
            probs,
            attn_concat,
            h2,
            ln2,
            u,
            g,
        });
    }
    let (hf, lnf) = layer_norm_trace(&x, &state.params.ln_f.gamma, &state.params.ln_f.beta);
    let logits = add_bias(hf.dot(&state.params.out_w), &state.params.out_b);
    TrainTrace { layout, inputs, layers, hf, lnf, logits }
}

/// Back-propagates `dlogits` through a trace, accumulating into `grads`.
pub fn backward(state: &ModelState, trace: &TrainTrace, dlogits: &Array2<f64>, grads: &mut ModelParams) {
    let cfg = &state.config;
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    grads.out_w += &trace.hf.t().dot(dlogits);
    grads.out_b += &dlogits.sum_axis(ndarray::Axis(0));
    let dhf = dlogits.dot(&state.params.out_w.t());
    let mut dx = layer_norm_backward(
        &dhf,
        &trace.lnf,
        &state.params.ln_f.gamma,
        &mut grads.ln_f.gamma,
        &mut grads.ln_f.beta,
    );

    for (l, lt) in trace.layers.iter().enumerate().rev() {
        let lp = &state.params.layers[l];
        let gp = &mut grads.layers[l];

        // MLP block backward: x_out = x_mid + (gelu(ln2(x_mid)·w1+b1))·w2+b2.
        let dm = dx.clone();
        gp.w2 += &lt.g.t().dot(&dm);
        gp.b2 += &dm.sum_axis(ndarray::Axis(0));
        let dg = dm.dot(&lp.w2.t());
        let du = &dg * &lt.u.mapv(gelu_prime);
        gp.w1 += &lt.h2.t().dot(&du);
        gp.b1 += &du.sum_axis(ndarray::Axis(0));
        let dh2 = du.dot(&lp.w1.t());
        let dx_mid_ln = layer_norm_backward(&dh2, &lt.ln2, &lp.ln2.gamma, &mut gp.ln2.gamma, &mut gp.ln2.beta);
        let dx_mid = &dx + &dx_mid_ln;

        // Attention block backward: x_mid = x_in + (heads(ln1(x_in)))·wo+bo.
        let dattn_out = dx_mid.clone();
        gp.wo += &lt.attn_concat.t().dot(&dattn_out);
        gp.bo += &dattn_out.sum_axis(ndarray::Axis(0));
        let dconcat = dattn_out.dot(&lp.wo.t());

        let n = dx.nrows();
        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for h in 0..cfg.heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &lt.probs[h];
            let dah = dconcat.slice(s![.., cols.clone()]);
            let vh = lt.v.slice(s![.., cols.clone()]);
            let dp = dah.dot(&vh.t());
            let dvh = p.t().dot(&dah);
            // Softmax backward: ds = p ∘ (dp − rowsum(dp ∘ p)).
            let mut ds = Array2::zeros(p.raw_dim());
            for i in 0..n {
                let dot: f64 = (0..n).map(|j| dp[[i, j]] * p[[i, j]]).sum();
                for j in 0..n {
                    ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot);
                }
            }
            ds.mapv_inplace(|v| v * scale);
            let kh = lt.k.slice(s![.., cols.clone()]);
            let qh = lt.q.slice(s![.., cols.clone()]);
            dq.slice_mut(s![.., cols.clone()]).assign(&ds.dot(&kh));
            dk.slice_mut(s![.., cols.clone()]).assign(&ds.t().dot(&qh));
            dv.slice_mut(s![.., cols]).assign(&dvh);
        }
        gp.wq += &lt.h1.t().dot(&dq);
        gp.bq += &dq.sum_axis(ndarray::Axis(0));
        gp.wk += &lt.h1.t().dot(&dk);
        gp.bk += &dk.sum_axis(ndarray::Axis(0));
        gp.wv += &lt.h1.t().dot(&dv);
        gp.bv += &dv.sum_axis(ndarray::Axis(0));
        let dh1 = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
        let dx_in_ln = layer_norm_backward(&dh1, &lt.ln1, &lp.ln1.gamma, &mut gp.ln1.gamma, &mut gp.ln1.beta);
        dx = dx_mid + dx_in_ln;
    }

    // Embedding scatter.
    let side = cfg.side;
    for (i, input) in trace.inputs.iter().enumerate() {
        let drow = dx.row(i);
        match input {
            TokenInput::Condition { class } => {
                let mut g = grads.class_emb.row_mut(*class);
                g += &drow;
            }
            TokenInput::Context { token, pos } => {
                {
                    let mut g = grads.tok_emb.row_mut(*token);
                    g += &drow;
                }
                let mut g = grads.pos_emb.row_mut(pos.row * side + pos.col);
                g += &drow;
            }
            TokenInput::Query { pos } => {
                grads.query_emb += &drow;
                let mut g = grads.pos_emb.row_mut(pos.row * side + pos.col);
                g += &drow;
            }
        }
    }
}

/// Mean cross-entropy over all query rows of the batch, plus gradients.
pub fn loss_and_grads(state: &ModelState, items: &[TrainItem]) -> (f64, ModelParams) {
    let mut grads = ModelParams::zeros(&state.config);
    let total_queries: usize = items.iter().map(|it| it.schedule.grid.token_count()).sum();
    let inv = 1.0 / total_queries as f64;
    let mut loss = 0.0;
    for item in items {
        let layout = build_training_layout(&item.schedule, 1);
        let mask = build_training_mask(&layout, true).expect("layout well-formed");
        let inputs = layout_inputs(&layout, &item.grid, item.class);
        let trace = train_forward(state, layout, inputs, mask);

        let mut dlogits = Array2::zeros(trace.logits.raw_dim());
        for (i, entry) in trace.layout.entries.iter().enumerate() {
            if entry.kind != TokenKind::Query {
                continue;
            }
            let target = item.grid.get(entry.pos.unwrap());
            let row = trace.logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += (logsum - row[target]) * inv;
            for v in 0..state.config.vocab_size {
                let p = (row[v] - logsum).exp();
                dlogits[[i, v]] = (p - if v == target { 1.0 } else { 0.0 }) * inv;
            }
        }
        backward(state, &trace, &dlogits, &mut grads);
    }
    (loss, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::model::{init, test_config};
    use crate::schedule::{cosine_group_sizes, random_order};

    fn sample_item(seed: u64) -> TrainItem {
        let grid_spec = GridSpec::new(4);
        let sizes = cosine_group_sizes(16, 5).unwrap();
        let schedule = random_order(grid_spec, &sizes, seed).unwrap();
        let tokens: Vec<u16> = (0..16).map(|i| ((i * 7 + seed as usize) % 8) as u16).collect();
        TrainItem {
            grid: TokenGrid { side: 4, tokens, class_id: (seed % 2) as u32 },
            class: (seed % 2) as usize,
            schedule,
        }
    }

    #[test]
    fn uniform_logits_loss_is_log_vocab() {
        let cfg = ModelConfig { vocab_size: 16, ..test_config() };
        let mut state = init(&cfg, 0).unwrap();
        for (_, _, data) in state.params.flat_mut() {
            data.fill(0.0);
        }
        let grid_spec = GridSpec::new(4);
        let sizes = cosine_group_sizes(16, 4).unwrap();
        let schedule = random_order(grid_spec, &sizes, 3).unwrap();
        let item = TrainItem {
            grid: TokenGrid { side: 4, tokens: vec![0; 16], class_id: 0 },
            class: 0,
            schedule,
        };
        let (loss, _) = loss_and_grads(&state, &[item]);
        assert!((loss - (16.0f64).ln()).abs() < 1e-12, "loss {loss}");
    }

    use crate::data::TokenGrid;
    use crate::model::ModelConfig;

    #[test]
    fn duplicating_batch_keeps_mean_loss() {
        let state = init(&test_config(), 9).unwrap();
        let item = sample_item(1);
        let (l1, _) = loss_and_grads(&state, &[item.clone()]);
        let (l2, _) = loss_and_grads(&state, &[item.clone(), item]);
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences_spot_check() {
        // A quick directional check; the exhaustive sweep lives in the
        // acceptance suite.
        let cfg = ModelConfig { layers: 1, embed_dim: 16, heads: 2, ..test_config() };
        let state = init(&cfg, 11).unwrap();
        let items = vec![sample_item(2)];
        let (_, grads) = loss_and_grads(&state, &items);

        let eps = 1e-5;
        let mut rng_positions = vec![("layer0.wq", 5usize), ("tok_emb", 3), ("query_emb", 0), ("ln_f.gamma", 2)];
        for (name, idx) in rng_positions.drain(..) {
            let mut plus = state.clone();
            let mut minus = state.clone();
            for (n, _, data) in plus.params.flat_mut() {
                if n == name {
                    data[idx] += eps;
                }
            }
            for (n, _, data) in minus.params.flat_mut() {
                if n == name {
                    data[idx] -= eps;
                }
            }
            let (lp, _) = loss_and_grads(&plus, &items);
            let (lm, _) = loss_and_grads(&minus, &items);
            let fd = (lp - lm) / (2.0 * eps);
            let mut grads_clone = grads.clone();
            let an = grads_clone
                .flat_mut()
                .into_iter()
                .find(|(n, _, _)| n == name)
                .map(|(_, _, d)| d[idx])
                .unwrap();
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                ((fd - an) / denom).abs() < 1e-5,
                "{name}[{idx}]: fd {fd} vs an {an}"
            );
        }
    }
}
