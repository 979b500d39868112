//! Decoder 2: extract triggers of a given type by fusing the type embedding
//! into token states, refining with self-attention and tagging start/end
//! boundaries per token.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamGroup, ParamId, ParameterStore};
use crate::primitives::{Fusion, FusionMode, SelfAttentionBlock};
use crate::schema::Span;
use crate::span_decoder::{assemble_spans, SpanTagging};

#[derive(Debug, Clone)]
pub struct TriggerExtractor {
    pub fusion: Fusion,
    /// None when the self-attention ablation is active.
    pub attention: Option<SelfAttentionBlock>,
    pub w_start: ParamId,
    pub b_start: ParamId,
    pub w_end: ParamId,
    pub b_end: ParamId,
    /// Dimension of fused (and refined) token states.
    pub fused_dim: usize,
}

impl TriggerExtractor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        hidden_dim: usize,
        fusion_mode: FusionMode,
        heads: usize,
        with_attention: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fusion = Fusion::new(
            store,
            "te.fusion",
            fusion_mode,
            hidden_dim,
            hidden_dim,
            ParamGroup::Decoder,
            rng,
        );
        let fused_dim = fusion_mode.output_dim(hidden_dim, hidden_dim);
        let attention = if with_attention {
            Some(SelfAttentionBlock::new(
                store,
                "te.attn",
                fused_dim,
                heads,
                false,
                ParamGroup::Decoder,
                rng,
            )?)
        } else {
            None
        };
        Ok(TriggerExtractor {
            fusion,
            attention,
            w_start: store.add_linear("te.w_start", fused_dim, 1, ParamGroup::Decoder, rng),
            b_start: store.add_bias("te.b_start", 1, ParamGroup::Decoder),
            w_end: store.add_linear("te.w_end", fused_dim, 1, ParamGroup::Decoder, rng),
            b_end: store.add_bias("te.b_end", 1, ParamGroup::Decoder),
            fused_dim,
        })
    }

    /// Fuse the type embedding into token states and refine.
    /// Returns (G^c, Z^c); G^c is reused by the argument decoder.
    pub fn condition_on_type(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        states: Var,
        type_emb: Var,
    ) -> (Var, Var) {
        let fused = self.fusion.forward(tape, store, type_emb, states);
        let refined = match &self.attention {
            Some(block) => block.forward(tape, store, fused),
            None => fused,
        };
        (fused, refined)
    }

    /// Per-token boundary probabilities, each (n, 1).
    pub fn tag(&self, tape: &mut Tape, store: &ParameterStore, refined: Var) -> (Var, Var) {
        let head = |tape: &mut Tape, w, b| {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let logits = tape.matmul(refined, wv);
            let logits = tape.add_row(logits, bv);
            tape.sigmoid(logits)
        };
        (
            head(tape, self.w_start, self.b_start),
            head(tape, self.w_end, self.b_end),
        )
    }

    /// Decode spans from probability columns under thresholds xi2/xi3.
    pub fn spans_from_probs(
        start_probs: &[f64],
        end_probs: &[f64],
        xi2: f64,
        xi3: f64,
    ) -> Result<Vec<Span>> {
        let tagging = SpanTagging::new(start_probs.to_vec(), end_probs.to_vec(), xi2, xi3)?;
        Ok(assemble_spans(&tagging))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.fusion.param_ids();
        if let Some(a) = &self.attention {
            ids.extend(a.param_ids());
        }
        ids.extend([self.w_start, self.b_start, self.w_end, self.b_end]);
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::grad_check;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn setup(mode: FusionMode) -> (ParameterStore, TriggerExtractor, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut store = ParameterStore::new();
        let te = TriggerExtractor::new(&mut store, 4, mode, 2, true, &mut rng).unwrap();
        (store, te, rng)
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn add_fusion_with_zero_condition_is_identity_before_attention() {
        let (store, te, mut rng) = setup(FusionMode::Add);
        let h = random(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let states = tape.constant(h.clone());
        let zero = tape.constant(Array2::zeros((1, 4)));
        let (fused, _) = te.condition_on_type(&mut tape, &store, states, zero);
        assert_eq!(tape.value(fused), &h);
    }

    #[test]
    fn distinct_conditions_give_distinct_refined_states() {
        let (store, te, mut rng) = setup(FusionMode::Cln);
        let h = random(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let states = tape.constant(h);
        let c1 = tape.constant(random(&mut rng, 1, 4));
        let c2 = tape.constant(random(&mut rng, 1, 4));
        let (_, z1) = te.condition_on_type(&mut tape, &store, states, c1);
        let (_, z2) = te.condition_on_type(&mut tape, &store, states, c2);
        let diff = (tape.value(z1) - tape.value(z2)).mapv(f64::abs);
        assert!(diff.iter().any(|&d| d > 1e-9));
    }

    #[test]
    fn zero_heads_give_half_probs_and_no_spans_at_default_threshold() {
        let (mut store, te, mut rng) = setup(FusionMode::Cln);
        store.get_mut(te.w_start).value.fill(0.0);
        store.get_mut(te.w_end).value.fill(0.0);
        let h = random(&mut rng, 4, 4);
        let mut tape = Tape::new();
        let states = tape.constant(h);
        let c = tape.constant(random(&mut rng, 1, 4));
        let (_, z) = te.condition_on_type(&mut tape, &store, states, c);
        let (sp, ep) = te.tag(&mut tape, &store, z);
        for &p in tape.value(sp).iter().chain(tape.value(ep).iter()) {
            assert!((p - 0.5).abs() < 1e-12);
        }
        let sv: Vec<f64> = tape.value(sp).iter().cloned().collect();
        let ev: Vec<f64> = tape.value(ep).iter().cloned().collect();
        assert!(TriggerExtractor::spans_from_probs(&sv, &ev, 0.5, 0.5).unwrap().is_empty());
    }

    #[test]
    fn forced_probs_give_single_token_span() {
        let spans = TriggerExtractor::spans_from_probs(
            &[0.9, 0.1, 0.1],
            &[0.9, 0.1, 0.1],
            0.5,
            0.5,
        )
        .unwrap();
        assert_eq!(spans, vec![Span::new(0, 0)]);
    }

    #[test]
    fn same_span_may_be_tagged_under_both_conditions() {
        // The tagger is condition-separated by construction: probabilities are
        // computed per condition, so nothing prevents a span appearing in both.
        let (mut store, te, mut rng) = setup(FusionMode::Cln);
        // Force strongly positive heads so all tokens tag under any condition.
        store.get_mut(te.b_start).value.fill(10.0);
        store.get_mut(te.b_end).value.fill(10.0);
        store.get_mut(te.w_start).value.fill(0.0);
        store.get_mut(te.w_end).value.fill(0.0);
        let h = random(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let states = tape.constant(h);
        let mut decode = |cond: Array2<f64>| {
            let c = tape.constant(cond);
            let (_, z) = te.condition_on_type(&mut tape, &store, states, c);
            let (sp, ep) = te.tag(&mut tape, &store, z);
            let sv: Vec<f64> = tape.value(sp).iter().cloned().collect();
            let ev: Vec<f64> = tape.value(ep).iter().cloned().collect();
            TriggerExtractor::spans_from_probs(&sv, &ev, 0.5, 0.5).unwrap()
        };
        let spans1 = decode(random(&mut rng, 1, 4));
        let spans2 = decode(random(&mut rng, 1, 4));
        assert!(spans1.contains(&Span::new(0, 0)));
        assert!(spans2.contains(&Span::new(0, 0)));
    }

    #[test]
    fn grad_check_full_conditioned_path() {
        for mode in [FusionMode::Cln, FusionMode::Gate, FusionMode::Add, FusionMode::Concat] {
            let (mut store, te, mut rng) = setup(mode);
            let h = random(&mut rng, 3, 4);
            let cond = random(&mut rng, 1, 4);
            let labels = Array2::from_shape_fn((3, 1), |_| {
                if rng.gen_range(0.0..1.0) < 0.5 { 1.0 } else { 0.0 }
            });
            let ids = te.param_ids();
            let err = grad_check(&mut store, &ids, 1e-5, |tape, store| {
                let states = tape.constant(h.clone());
                let c = tape.constant(cond.clone());
                let (_, z) = te.condition_on_type(tape, store, states, c);
                let (sp, ep) = te.tag(tape, store, z);
                let ls = tape.bce(sp, labels.clone(), 1e-9);
                let le = tape.bce(ep, labels.clone(), 1e-9);
                tape.add(ls, le)
            })
            .unwrap();
            assert!(err <= 1e-4, "trigger grad check failed for {mode:?}: {err}");
        }
    }
}
