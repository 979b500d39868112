//! Decoder 1: predict the set of event types in a sentence via
//! type-adaptive attention pooling and a learned similarity score.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParameterStore};

/// How the sentence representation is pooled before scoring a type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    /// Attention over tokens, adaptive to the candidate type.
    Adaptive,
    /// Elementwise max over token states (type-independent).
    MaxP,
    /// Mean over token states (type-independent).
    MeanP,
    /// State of the reserved leading sentence token.
    Cls,
}

impl PoolingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(PoolingMode::Adaptive),
            "maxp" => Ok(PoolingMode::MaxP),
            "meanp" => Ok(PoolingMode::MeanP),
            "cls" => Ok(PoolingMode::Cls),
            other => Err(Error::Config(format!("unknown pooling mode `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PoolingMode::Adaptive => "adaptive",
            PoolingMode::MaxP => "maxp",
            PoolingMode::MeanP => "meanp",
            PoolingMode::Cls => "cls",
        }
    }
}

/// Type embedding table plus the similarity parameters W (4d x 4d) and
/// v (4d x 1).
#[derive(Debug, Clone)]
pub struct TypeDetector {
    pub type_table: ParamId,
    pub w: ParamId,
    pub v: ParamId,
    pub pooling: PoolingMode,
    pub n_types: usize,
    pub dim: usize,
}

impl TypeDetector {
    pub fn new(
        store: &mut ParameterStore,
        n_types: usize,
        dim: usize,
        pooling: PoolingMode,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let type_table = store.add_embedding("td.type_table", n_types, dim, ParamGroup::Decoder, rng);
        let w = store.add_linear("td.w", 4 * dim, 4 * dim, ParamGroup::Decoder, rng);
        let v = store.add_linear("td.v", 4 * dim, 1, ParamGroup::Decoder, rng);
        TypeDetector { type_table, w, v, pooling, n_types, dim }
    }

    /// Embedding row for one type, shape (1, d).
    pub fn type_embedding(&self, tape: &mut Tape, store: &ParameterStore, type_idx: usize) -> Var {
        let table = tape.param(store, self.type_table);
        tape.gather_rows(table, &[type_idx])
    }

    /// Paired-row similarity: rows of `c` against rows of `h`, shape (m, 1).
    /// delta(c, h) = v^T tanh(W [c; h; |c - h|; c * h])
    pub fn similarity(&self, tape: &mut Tape, store: &ParameterStore, c: Var, h: Var) -> Var {
        let diff = tape.sub(c, h);
        let abs_diff = tape.abs(diff);
        let prod = tape.mul(c, h);
        let features = tape.concat_cols(&[c, h, abs_diff, prod]);
        let w = tape.param(store, self.w);
        let v = tape.param(store, self.v);
        let hidden = tape.matmul(features, w);
        let hidden = tape.tanh(hidden);
        tape.matmul(hidden, v)
    }

    /// Attention pooling adaptive to the type: returns (weights (1, n),
    /// pooled state (1, d)).
    pub fn attend_pool(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        type_emb: Var,
        states: Var,
    ) -> (Var, Var) {
        let n = tape.value(states).nrows();
        let cond = tape.broadcast_row(type_emb, n);
        let scores = self.similarity(tape, store, cond, states);
        let scores_row = tape.transpose(scores);
        let weights = tape.softmax_rows(scores_row);
        let pooled = tape.matmul(weights, states);
        (weights, pooled)
    }

    /// Per-type occurrence probabilities, shape (|C|, 1).
    ///
    /// `content` excludes any synthetic sentence token; `cls_state` supplies
    /// it for the CLS pooling variant.
    pub fn detect(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        content: Var,
        cls_state: Option<Var>,
    ) -> Result<Var> {
        let shared_pool = match self.pooling {
            PoolingMode::MaxP => Some(tape.max_rows(content)),
            PoolingMode::MeanP => Some(tape.mean_rows(content)),
            PoolingMode::Cls => Some(cls_state.ok_or_else(|| {
                Error::Config("cls pooling requires an encoder with a sentence token".into())
            })?),
            PoolingMode::Adaptive => None,
        };

        let mut logits = Vec::with_capacity(self.n_types);
        for k in 0..self.n_types {
            let c = self.type_embedding(tape, store, k);
            let pooled = match shared_pool {
                Some(p) => p,
                None => self.attend_pool(tape, store, c, content).1,
            };
            logits.push(self.similarity(tape, store, c, pooled));
        }
        let stacked = tape.concat_rows(&logits);
        Ok(tape.sigmoid(stacked))
    }

    /// Indices and probabilities of types strictly above the threshold.
    pub fn thresholded(probs: &[f64], threshold: f64) -> Vec<(usize, f64)> {
        probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > threshold)
            .map(|(i, &p)| (i, p))
            .collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.type_table, self.w, self.v]
    }
}
