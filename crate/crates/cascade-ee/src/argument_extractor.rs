//! Decoder 3: extract role-specific arguments conditioned on a type and a
//! trigger. Fuses the trigger embedding into the type-conditioned states,
//! refines, appends relative position embeddings and gates role-wise
//! taggers with a learned role-legality indicator.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParameterStore};
use crate::primitives::{Fusion, FusionMode, SelfAttentionBlock};
use crate::schema::Span;
use crate::span_decoder::{assemble_spans, SpanTagging};

/// Signed distances to the trigger span, clipped to +-l_max: 0 inside the
/// span, measured to the nearer boundary outside. Returned as table indices
/// (distance + l_max).
pub fn relative_positions(n: usize, trigger: Span, l_max: usize) -> Vec<usize> {
    let l = l_max as i64;
    (0..n)
        .map(|i| {
            let i = i as i64;
            let start = trigger.start as i64;
            let end = trigger.end as i64;
            let dist = if i < start {
                i - start
            } else if i > end {
                i - end
            } else {
                0
            };
            (dist.clamp(-l, l) + l) as usize
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ArgumentExtractor {
    pub fusion: Fusion,
    pub attention: Option<SelfAttentionBlock>,
    /// Relative position table of (2 * l_max + 1, d_p); None when ablated.
    pub position_table: Option<ParamId>,
    pub l_max: usize,
    pub d_p: usize,
    /// Role-head weights over (tagger_dim, |R|).
    pub w_start: ParamId,
    pub b_start: ParamId,
    pub w_end: ParamId,
    pub b_end: ParamId,
    /// Learned role-legality indicator over the type embedding; None when
    /// ablated (treated as constant 1).
    pub indicator_w: Option<ParamId>,
    pub indicator_b: Option<ParamId>,
    pub n_roles: usize,
    /// Dimension of the fused + refined states, before position concat.
    pub refined_dim: usize,
}

pub struct ArgumentExtractorConfig {
    pub state_dim: usize,
    pub type_dim: usize,
    pub n_roles: usize,
    pub fusion_mode: FusionMode,
    pub heads: usize,
    pub with_attention: bool,
    pub with_positions: bool,
    pub with_indicator: bool,
    pub l_max: usize,
    pub d_p: usize,
}

impl ArgumentExtractor {
    pub fn new(
        store: &mut ParameterStore,
        cfg: &ArgumentExtractorConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        // The trigger embedding lives in the same space as the fused states
        // it is averaged from.
        let fusion = Fusion::new(
            store,
            "ae.fusion",
            cfg.fusion_mode,
            cfg.state_dim,
            cfg.state_dim,
            ParamGroup::Decoder,
            rng,
        );
        let refined_dim = cfg.fusion_mode.output_dim(cfg.state_dim, cfg.state_dim);
        let attention = if cfg.with_attention {
            Some(SelfAttentionBlock::new(
                store,
                "ae.attn",
                refined_dim,
                cfg.heads,
                false,
                ParamGroup::Decoder,
                rng,
            )?)
        } else {
            None
        };
        let position_table = cfg.with_positions.then(|| {
            store.add_embedding(
                "ae.position_table",
                2 * cfg.l_max + 1,
                cfg.d_p,
                ParamGroup::Decoder,
                rng,
            )
        });
        let tagger_dim = refined_dim + if cfg.with_positions { cfg.d_p } else { 0 };
        let (indicator_w, indicator_b) = if cfg.with_indicator {
            (
                Some(store.add_linear("ae.indicator_w", cfg.type_dim, cfg.n_roles, ParamGroup::Decoder, rng)),
                Some(store.add_bias("ae.indicator_b", cfg.n_roles, ParamGroup::Decoder)),
            )
        } else {
            (None, None)
        };
        Ok(ArgumentExtractor {
            fusion,
            attention,
            position_table,
            l_max: cfg.l_max,
            d_p: cfg.d_p,
            w_start: store.add_linear("ae.w_start", tagger_dim, cfg.n_roles, ParamGroup::Decoder, rng),
            b_start: store.add_bias("ae.b_start", cfg.n_roles, ParamGroup::Decoder),
            w_end: store.add_linear("ae.w_end", tagger_dim, cfg.n_roles, ParamGroup::Decoder, rng),
            b_end: store.add_bias("ae.b_end", cfg.n_roles, ParamGroup::Decoder),
            indicator_w,
            indicator_b,
            n_roles: cfg.n_roles,
            refined_dim,
        })
    }

    /// Mean of the trigger's boundary token states, shape (1, d).
    pub fn trigger_embedding(
        &self,
        tape: &mut Tape,
        typed_states: Var,
        trigger: Span,
    ) -> Result<Var> {
        let n = tape.value(typed_states).nrows();
        if trigger.end >= n {
            return Err(Error::Argument(format!(
                "trigger span [{}, {}] out of bounds for {n} tokens",
                trigger.start, trigger.end
            )));
        }
        let boundary = tape.gather_rows(typed_states, &[trigger.start, trigger.end]);
        Ok(tape.mean_rows(boundary))
    }

    /// Fuse the trigger embedding into the typed states, refine and append
    /// relative position embeddings. Returns (n, refined_dim [+ d_p]).
    pub fn condition_on_trigger(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        typed_states: Var,
        trigger: Span,
    ) -> Result<Var> {
        let trig_emb = self.trigger_embedding(tape, typed_states, trigger)?;
        let fused = self.fusion.forward(tape, store, trig_emb, typed_states);
        let refined = match &self.attention {
            Some(block) => block.forward(tape, store, fused),
            None => fused,
        };
        match self.position_table {
            Some(table) => {
                let n = tape.value(refined).nrows();
                let indices = relative_positions(n, trigger, self.l_max);
                let table = tape.param(store, table);
                let pos = tape.gather_rows(table, &indices);
                Ok(tape.concat_cols(&[refined, pos]))
            }
            None => Ok(refined),
        }
    }

    /// Learned legality gate per role, shape (1, |R|); all ones when ablated.
    pub fn role_indicator(&self, tape: &mut Tape, store: &ParameterStore, type_emb: Var) -> Var {
        match (self.indicator_w, self.indicator_b) {
            (Some(w), Some(b)) => {
                let wv = tape.param(store, w);
                let bv = tape.param(store, b);
                let logits = tape.matmul(type_emb, wv);
                let logits = tape.add(logits, bv);
                tape.sigmoid(logits)
            }
            _ => tape.constant(ndarray::Array2::ones((1, self.n_roles))),
        }
    }

    /// Per-role boundary probabilities, each (n, |R|): the role head's
    /// logistic multiplied by the role indicator.
    pub fn tag(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        conditioned: Var,
        indicator: Var,
    ) -> (Var, Var) {
        let head = |tape: &mut Tape, w, b| {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let logits = tape.matmul(conditioned, wv);
            let logits = tape.add_row(logits, bv);
            let probs = tape.sigmoid(logits);
            tape.mul_row(probs, indicator)
        };
        (
            head(tape, self.w_start, self.b_start),
            head(tape, self.w_end, self.b_end),
        )
    }

    /// Decode spans for one role column under thresholds xi4/xi5.
    pub fn spans_for_role(
        start_probs: &[f64],
        end_probs: &[f64],
        xi4: f64,
        xi5: f64,
    ) -> Result<Vec<Span>> {
        let tagging = SpanTagging::new(start_probs.to_vec(), end_probs.to_vec(), xi4, xi5)?;
        Ok(assemble_spans(&tagging))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.fusion.param_ids();
        if let Some(a) = &self.attention {
            ids.extend(a.param_ids());
        }
        ids.extend(self.position_table);
        ids.extend([self.w_start, self.b_start, self.w_end, self.b_end]);
        ids.extend(self.indicator_w);
        ids.extend(self.indicator_b);
        ids
    }
}
