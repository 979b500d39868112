//! Shared differentiable building blocks: conditional layer normalization,
//! condition fusion variants, a single self-attention block, dropout masks
//! and finite-difference gradient verification.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParameterStore};

/// Variance epsilon used inside layer normalization and CLN.
pub const LN_EPS: f64 = 1e-12;

/// How a condition vector is fused into token states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Cln,
    Concat,
    Add,
    Gate,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cln" => Ok(FusionMode::Cln),
            "concat" => Ok(FusionMode::Concat),
            "add" => Ok(FusionMode::Add),
            "gate" => Ok(FusionMode::Gate),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Cln => "cln",
            FusionMode::Concat => "concat",
            FusionMode::Add => "add",
            FusionMode::Gate => "gate",
        }
    }

    /// Dimension of fused states given state dim and condition dim.
    pub fn output_dim(&self, d: usize, d_cond: usize) -> usize {
        match self {
            FusionMode::Concat => d + d_cond,
            _ => d,
        }
    }
}

/// Layer normalization whose gain and bias are affine in a condition vector.
#[derive(Debug, Clone)]
pub struct ConditionalLayerNorm {
    pub w_gain: ParamId,
    pub b_gain: ParamId,
    pub w_bias: ParamId,
    pub b_bias: ParamId,
    pub eps: f64,
}

impl ConditionalLayerNorm {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        d_cond: usize,
        d: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConditionalLayerNorm {
            w_gain: store.add_linear(&format!("{prefix}.w_gain"), d_cond, d, group, rng),
            b_gain: store.add_const_row(&format!("{prefix}.b_gain"), d, 1.0, group),
            w_bias: store.add_linear(&format!("{prefix}.w_bias"), d_cond, d, group, rng),
            b_bias: store.add_bias(&format!("{prefix}.b_bias"), d, group),
            eps: LN_EPS,
        }
    }

    /// condition: (1, d_cond); states: (n, d) -> (n, d)
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        condition: Var,
        states: Var,
    ) -> Var {
        let wg = tape.param(store, self.w_gain);
        let bg = tape.param(store, self.b_gain);
        let wb = tape.param(store, self.w_bias);
        let bb = tape.param(store, self.b_bias);
        let gain = tape.matmul(condition, wg);
        let gain = tape.add(gain, bg);
        let bias = tape.matmul(condition, wb);
        let bias = tape.add(bias, bb);
        let normed = tape.normalize_rows(states, self.eps);
        let scaled = tape.mul_row(normed, gain);
        tape.add_row(scaled, bias)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w_gain, self.b_gain, self.w_bias, self.b_bias]
    }
}

/// Condition fusion function with the four variants.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub mode: FusionMode,
    pub cln: Option<ConditionalLayerNorm>,
    /// Gate projection over [h; c] -> d, only in gate mode.
    pub gate_w: Option<ParamId>,
    pub gate_b: Option<ParamId>,
}

impl Fusion {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        mode: FusionMode,
        d_cond: usize,
        d: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let cln = matches!(mode, FusionMode::Cln).then(|| {
            ConditionalLayerNorm::new(store, &format!("{prefix}.cln"), d_cond, d, group, rng)
        });
        let (gate_w, gate_b) = if matches!(mode, FusionMode::Gate) {
            (
                Some(store.add_linear(&format!("{prefix}.gate_w"), d + d_cond, d, group, rng)),
                Some(store.add_bias(&format!("{prefix}.gate_b"), d, group)),
            )
        } else {
            (None, None)
        };
        Fusion { mode, cln, gate_w, gate_b }
    }

    /// condition: (1, d_cond); states: (n, d).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        condition: Var,
        states: Var,
    ) -> Var {
        let n = tape.value(states).nrows();
        match self.mode {
            FusionMode::Cln => {
                self.cln.as_ref().expect("cln params").forward(tape, store, condition, states)
            }
            FusionMode::Add => {
                tape.add_row(states, condition)
            }
            FusionMode::Concat => {
                let cond_rows = tape.broadcast_row(condition, n);
                tape.concat_cols(&[states, cond_rows])
            }
            FusionMode::Gate => {
                let cond_rows = tape.broadcast_row(condition, n);
                let joint = tape.concat_cols(&[states, cond_rows]);
                let w = tape.param(store, self.gate_w.expect("gate params"));
                let b = tape.param(store, self.gate_b.expect("gate params"));
                let logits = tape.matmul(joint, w);
                let logits = tape.add_row(logits, b);
                let gate = tape.sigmoid(logits);
                // g * h + (1 - g) * c, written as g * (h - c) + c
                let diff = tape.sub(states, cond_rows);
                let gated = tape.mul(gate, diff);
                tape.add(gated, cond_rows)
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some(cln) = &self.cln {
            ids.extend(cln.param_ids());
        }
        ids.extend(self.gate_w);
        ids.extend(self.gate_b);
        ids
    }
}

/// One multi-head scaled dot-product attention layer with residual connection
/// and layer normalization; optional position-wise feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    pub dim: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub ffn: Option<FeedForward>,
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl SelfAttentionBlock {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        with_ffn: bool,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        let lin = |store: &mut ParameterStore, suffix: &str, rng: &mut ChaCha8Rng| {
            store.add_linear(&format!("{prefix}.{suffix}"), dim, dim, group, rng)
        };
        let bias = |store: &mut ParameterStore, suffix: &str| {
            store.add_bias(&format!("{prefix}.{suffix}"), dim, group)
        };
        let ffn = with_ffn.then(|| {
            let hidden = dim * 2;
            FeedForward {
                w1: store.add_linear(&format!("{prefix}.ffn_w1"), dim, hidden, group, rng),
                b1: store.add_bias(&format!("{prefix}.ffn_b1"), hidden, group),
                w2: store.add_linear(&format!("{prefix}.ffn_w2"), hidden, dim, group, rng),
                b2: store.add_bias(&format!("{prefix}.ffn_b2"), dim, group),
                ln_gain: store.add_const_row(&format!("{prefix}.ffn_ln_gain"), dim, 1.0, group),
                ln_bias: store.add_bias(&format!("{prefix}.ffn_ln_bias"), dim, group),
            }
        });
        Ok(SelfAttentionBlock {
            dim,
            heads,
            wq: lin(store, "wq", rng),
            bq: bias(store, "bq"),
            wk: lin(store, "wk", rng),
            wv: lin(store, "wv", rng),
            bv: bias(store, "bv"),
            wo: lin(store, "wo", rng),
            bo: bias(store, "bo"),
            ln_gain: store.add_const_row(&format!("{prefix}.ln_gain"), dim, 1.0, group),
            ln_bias: store.add_bias(&format!("{prefix}.ln_bias"), dim, group),
            ffn,
        })
    }

    /// states: (n, dim) -> (n, dim)
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, states: Var) -> Var {
        let dh = self.dim / self.heads;
        let project = |tape: &mut Tape, w: ParamId, b: ParamId| {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let y = tape.matmul(states, wv);
            tape.add_row(y, bv)
        };
        let q = project(tape, self.wq, self.bq);
        // No key bias: a shared shift on every key moves all scores in a
        // softmax row equally, so it could never receive gradient.
        let k = {
            let wv = tape.param(store, self.wk);
            tape.matmul(states, wv)
        };
        let v = project(tape, self.wv, self.bv);

        let mut contexts = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.softmax_rows(scores);
            contexts.push(tape.matmul(attn, vh));
        }
        let ctx = if contexts.len() == 1 { contexts[0] } else { tape.concat_cols(&contexts) };
        let wo = tape.param(store, self.wo);
        let bo = tape.param(store, self.bo);
        let proj = tape.matmul(ctx, wo);
        let proj = tape.add_row(proj, bo);

        let residual = tape.add(states, proj);
        let mut out = layer_norm(tape, store, residual, self.ln_gain, self.ln_bias);

        if let Some(ffn) = &self.ffn {
            let w1 = tape.param(store, ffn.w1);
            let b1 = tape.param(store, ffn.b1);
            let w2 = tape.param(store, ffn.w2);
            let b2 = tape.param(store, ffn.b2);
            let hidden = tape.matmul(out, w1);
            let hidden = tape.add_row(hidden, b1);
            let hidden = tape.relu(hidden);
            let ff = tape.matmul(hidden, w2);
            let ff = tape.add_row(ff, b2);
            let residual = tape.add(out, ff);
            out = layer_norm(tape, store, residual, ffn.ln_gain, ffn.ln_bias);
        }
        out
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.wq, self.bq, self.wk, self.wv, self.bv, self.wo, self.bo,
            self.ln_gain, self.ln_bias,
        ];
        if let Some(f) = &self.ffn {
            ids.extend([f.w1, f.b1, f.w2, f.b2, f.ln_gain, f.ln_bias]);
        }
        ids
    }
}

/// Plain layer normalization with learned gain/bias rows.
pub fn layer_norm(
    tape: &mut Tape,
    store: &ParameterStore,
    states: Var,
    gain: ParamId,
    bias: ParamId,
) -> Var {
    let g = tape.param(store, gain);
    let b = tape.param(store, bias);
    let normed = tape.normalize_rows(states, LN_EPS);
    let scaled = tape.mul_row(normed, g);
    tape.add_row(scaled, b)
}

/// Inverted-dropout mask: entries are 0 with probability `rate`,
/// else 1/(1 - rate).
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    debug_assert!((0.0..1.0).contains(&rate));
    let keep = 1.0 - rate;
    Array2::from_shape_fn((rows, cols), |_| {
        if rng.gen_range(0.0..1.0) < rate { 0.0 } else { 1.0 / keep }
    })
}

/// Compare analytic gradients of a scalar-valued forward pass against
/// central finite differences over the listed parameters.
///
/// Returns the maximum over parameter elements of
/// |g_fd - g_an| / max(|g_fd|, |g_an|, 1e-6); 0 if `ids` is empty.
/// The floor absorbs finite-difference noise on structurally zero
/// gradients (e.g. a key bias, which softmax cancels).
pub fn grad_check<F>(
    store: &mut ParameterStore,
    ids: &[ParamId],
    eps: f64,
    forward: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterStore) -> Var,
{
    grad_check_inner(store, ids, eps, forward, false)
}

/// Same as [`grad_check`] but doubles one analytic gradient entry, so a
/// correct checker must report a large error. Used by the CLI self-test.
pub fn grad_check_corrupted<F>(
    store: &mut ParameterStore,
    ids: &[ParamId],
    eps: f64,
    forward: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterStore) -> Var,
{
    grad_check_inner(store, ids, eps, forward, true)
}

fn grad_check_inner<F>(
    store: &mut ParameterStore,
    ids: &[ParamId],
    eps: f64,
    forward: F,
    corrupt: bool,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterStore) -> Var,
{
    if ids.is_empty() {
        return Ok(0.0);
    }

    let eval = |store: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = forward(&mut tape, store);
        let value = tape.value(out);
        debug_assert_eq!(value.len(), 1);
        let loss = value[[0, 0]];
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss} in grad check")));
        }
        Ok(loss)
    };

    // Analytic pass.
    store.zero_grads();
    let mut tape = Tape::new();
    let out = forward(&mut tape, store);
    if !tape.value(out)[[0, 0]].is_finite() {
        return Err(Error::Numeric("non-finite loss in grad check".into()));
    }
    tape.backward(out, store);
    let mut analytic: Vec<Array2<f64>> =
        ids.iter().map(|&id| store.get(id).grad.clone()).collect();
    if corrupt {
        // Double the largest-magnitude entry; corrupting a near-zero
        // gradient would be invisible to the relative-error metric.
        let mut target: Option<(usize, usize, usize, f64)> = None;
        for (k, grad) in analytic.iter().enumerate() {
            for ((r, c), &v) in grad.indexed_iter() {
                if target.map_or(true, |(.., best)| v.abs() > best) {
                    target = Some((k, r, c, v.abs()));
                }
            }
        }
        if let Some((k, r, c, _)) = target {
            analytic[k][[r, c]] *= 2.0;
        }
    }

    let mut max_err = 0.0f64;
    for (k, &id) in ids.iter().enumerate() {
        let (rows, cols) = store.value(id).dim();
        for r in 0..rows {
            for c in 0..cols {
                let orig = store.get(id).value[[r, c]];
                store.get_mut(id).value[[r, c]] = orig + eps;
                let up = eval(store)?;
                store.get_mut(id).value[[r, c]] = orig - eps;
                let down = eval(store)?;
                store.get_mut(id).value[[r, c]] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = analytic[k][[r, c]];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                max_err = max_err.max(err);
            }
        }
    }
    Ok(max_err)
}
