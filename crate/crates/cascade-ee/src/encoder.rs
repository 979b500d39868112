//! Contextual token encoder: a small trainable transformer stand-in for a
//! pretrained model, behind a shape-stable interface. A pretrained encoder
//! can be plugged in by writing its weights into the same parameter names.

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParameterStore};
use crate::primitives::{dropout_mask, SelfAttentionBlock};
use crate::schema::Corpus;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const CLS_TOKEN: &str = "<cls>";

/// Token string <-> id mapping with reserved PAD/UNK/CLS entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Argument(format!("duplicate vocabulary token `{t}`")));
            }
        }
        for required in [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN] {
            if !index.contains_key(required) {
                return Err(Error::Argument(format!(
                    "vocabulary misses reserved token `{required}`"
                )));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Build from a corpus: reserved tokens first, then corpus tokens in
    /// first-seen order.
    pub fn build(corpus: &Corpus) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string(), CLS_TOKEN.to_string()];
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for sentence in &corpus.sentences {
            for token in &sentence.tokens {
                if !index.contains_key(token) {
                    index.insert(token.clone(), tokens.len());
                    tokens.push(token.clone());
                }
            }
        }
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        self.index[UNK_TOKEN]
    }

    pub fn cls_id(&self) -> usize {
        self.index[CLS_TOKEN]
    }

    /// Unknown tokens map to UNK; never fails.
    pub fn id_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or_else(|| self.unk_id())
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_of(t)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        Vocabulary::from_tokens(tokens)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub with_ffn: bool,
    /// Prepend a synthetic sentence token (used by the CLS pooling variant).
    pub prepend_cls: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden_dim: 64,
            layers: 2,
            heads: 4,
            max_len: 128,
            dropout: 0.3,
            with_ffn: false,
            prepend_cls: false,
        }
    }
}

/// Token + learned position embeddings followed by stacked self-attention
/// blocks; dropout on the output states during training.
#[derive(Debug, Clone)]
pub struct ToyTransformerEncoder {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub token_table: ParamId,
    pub position_table: ParamId,
    pub blocks: Vec<SelfAttentionBlock>,
}

impl ToyTransformerEncoder {
    pub fn new(
        store: &mut ParameterStore,
        config: EncoderConfig,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if config.hidden_dim % config.heads != 0 {
            return Err(Error::Config(format!(
                "hidden dim {} not divisible by {} heads",
                config.hidden_dim, config.heads
            )));
        }
        let token_table = store.add_embedding(
            "encoder.token_table",
            vocab_size,
            config.hidden_dim,
            ParamGroup::Encoder,
            rng,
        );
        let position_table = store.add_embedding(
            "encoder.position_table",
            config.max_len,
            config.hidden_dim,
            ParamGroup::Encoder,
            rng,
        );
        let blocks = (0..config.layers)
            .map(|l| {
                SelfAttentionBlock::new(
                    store,
                    &format!("encoder.block{l}"),
                    config.hidden_dim,
                    config.heads,
                    config.with_ffn,
                    ParamGroup::Encoder,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ToyTransformerEncoder { config, vocab_size, token_table, position_table, blocks })
    }

    /// Number of leading synthetic tokens in the encoded sequence.
    pub fn offset(&self) -> usize {
        usize::from(self.config.prepend_cls)
    }

    /// Encode token ids into (n [+1 if CLS], hidden_dim) states.
    /// `rng` enables output dropout; pass `None` in eval mode.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        token_ids: &[usize],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if token_ids.is_empty() {
            return Err(Error::Argument("cannot encode an empty sentence".into()));
        }
        let budget = self.config.max_len - self.offset();
        if token_ids.len() > budget {
            return Err(Error::Argument(format!(
                "sentence length {} exceeds maximum {budget}",
                token_ids.len()
            )));
        }
        let mut ids: Vec<usize> = Vec::with_capacity(token_ids.len() + 1);
        if self.config.prepend_cls {
            ids.push(2); // reserved CLS id
        }
        for &id in token_ids {
            ids.push(if id < self.vocab_size { id } else { 1 }); // clamp to UNK
        }
        let n = ids.len();

        let token_tab = tape.param(store, self.token_table);
        let pos_tab = tape.param(store, self.position_table);
        let tokens = tape.gather_rows(token_tab, &ids);
        let positions = tape.gather_rows(pos_tab, &(0..n).collect::<Vec<_>>());
        let mut states = tape.add(tokens, positions);
        for block in &self.blocks {
            states = block.forward(tape, store, states);
        }
        if let Some(rng) = rng {
            if self.config.dropout > 0.0 {
                let mask = dropout_mask(n, self.config.hidden_dim, self.config.dropout, rng);
                states = tape.dropout(states, mask);
            }
        }
        Ok(states)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_table, self.position_table];
        for b in &self.blocks {
            ids.extend(b.param_ids());
        }
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::grad_check;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn encoder(d: usize, layers: usize, max_len: usize) -> (ParameterStore, ToyTransformerEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::new();
        let config = EncoderConfig {
            hidden_dim: d,
            layers,
            heads: 2,
            max_len,
            dropout: 0.0,
            with_ffn: false,
            prepend_cls: false,
        };
        let enc = ToyTransformerEncoder::new(&mut store, config, 10, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn shape_contract() {
        let (store, enc) = encoder(8, 2, 16);
        let mut tape = Tape::new();
        let out = enc.encode(&mut tape, &store, &[3, 4, 5], None).unwrap();
        assert_eq!(tape.value(out).dim(), (3, 8));
    }

    #[test]
    fn position_table_breaks_permutation_equivariance() {
        let (store, enc) = encoder(8, 1, 16);
        let mut tape = Tape::new();
        let a = enc.encode(&mut tape, &store, &[3, 4, 5], None).unwrap();
        let b = enc.encode(&mut tape, &store, &[5, 4, 3], None).unwrap();
        // Middle token identical in both orders, but states differ.
        let diff = (tape.value(a).row(0).to_owned() - tape.value(b).row(2)).mapv(f64::abs);
        assert!(diff.iter().any(|&d| d > 1e-9));
    }

    #[test]
    fn unknown_id_maps_to_unk_and_overlength_errors() {
        let (store, enc) = encoder(8, 1, 4);
        let mut tape = Tape::new();
        let a = enc.encode(&mut tape, &store, &[99, 3], None).unwrap();
        let b = enc.encode(&mut tape, &store, &[1, 3], None).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert!(enc.encode(&mut tape, &store, &[1, 2, 3, 4, 5], None).is_err());
    }

    #[test]
    fn eval_mode_deterministic() {
        let (store, enc) = encoder(8, 2, 16);
        let mut tape = Tape::new();
        let a = enc.encode(&mut tape, &store, &[1, 2, 3, 4], None).unwrap();
        let b = enc.encode(&mut tape, &store, &[1, 2, 3, 4], None).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn grad_check_probe_loss_through_encoder() {
        let (mut store, enc) = encoder(8, 1, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels = Array2::from_shape_fn((3, 8), |_| {
            if rng.gen_range(0.0..1.0) < 0.5 { 1.0 } else { 0.0 }
        });
        let ids = enc.param_ids();
        let err = grad_check(&mut store, &ids, 1e-5, |tape, store| {
            let h = enc.encode(tape, store, &[3, 4, 5], None).unwrap();
            let probs = tape.sigmoid(h);
            tape.bce(probs, labels.clone(), 1e-9)
        })
        .unwrap();
        assert!(err <= 1e-4, "encoder grad check failed: {err}");
    }

    #[test]
    fn vocabulary_roundtrip_and_unk() {
        let dir = tempfile::tempdir().unwrap();
        let schema = crate::schema::EventSchema::new(
            vec!["T".into()],
            vec!["r".into()],
            [("T".to_string(), vec!["r".to_string()])].into_iter().collect(),
        )
        .unwrap();
        let corpus = crate::schema::Corpus::new(
            vec![crate::schema::AnnotatedSentence {
                id: "a".into(),
                tokens: vec!["x".into(), "y".into(), "x".into()],
                events: vec![],
            }],
            schema,
        )
        .unwrap();
        let vocab = Vocabulary::build(&corpus);
        assert_eq!(vocab.len(), 5);
        assert_eq!(vocab.id_of("x"), 3);
        assert_eq!(vocab.id_of("zzz"), vocab.unk_id());
        let path = dir.path().join("vocab.txt");
        vocab.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), vocab);
    }
}
