//! The full extraction model: shared encoder plus the three cascade
//! decoders, with checkpoint persistence.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::argument_extractor::{ArgumentExtractor, ArgumentExtractorConfig};
use crate::autodiff::{Tape, Var};
use crate::encoder::{EncoderConfig, ToyTransformerEncoder, Vocabulary};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParameterStore};
use crate::primitives::FusionMode;
use crate::schema::EventSchema;
use crate::trigger_extractor::TriggerExtractor;
use crate::type_detector::{PoolingMode, TypeDetector};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionMode,
    pub pooling: PoolingMode,
    pub decoder_heads: usize,
    pub with_self_attention: bool,
    pub with_positions: bool,
    pub with_indicator: bool,
    /// Train a separate type table for the argument-stage indicator instead
    /// of sharing the detector's table.
    pub split_type_table: bool,
    pub d_p: usize,
    pub l_max: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            fusion: FusionMode::Cln,
            pooling: PoolingMode::Adaptive,
            decoder_heads: 4,
            with_self_attention: true,
            with_positions: true,
            with_indicator: true,
            split_type_table: false,
            d_p: 16,
            l_max: 16,
        }
    }
}

pub struct CascadeModel {
    pub store: ParameterStore,
    pub config: ModelConfig,
    pub schema: EventSchema,
    pub vocab: Vocabulary,
    pub encoder: ToyTransformerEncoder,
    pub type_detector: TypeDetector,
    pub trigger_extractor: TriggerExtractor,
    pub argument_extractor: ArgumentExtractor,
    /// Present only with `split_type_table`.
    pub arg_type_table: Option<ParamId>,
}

impl CascadeModel {
    pub fn new(
        schema: EventSchema,
        vocab: Vocabulary,
        mut config: ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        config.encoder.prepend_cls = matches!(config.pooling, PoolingMode::Cls);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let d = config.encoder.hidden_dim;

        let encoder =
            ToyTransformerEncoder::new(&mut store, config.encoder.clone(), vocab.len(), &mut rng)?;
        let type_detector =
            TypeDetector::new(&mut store, schema.types.len(), d, config.pooling, &mut rng);
        let trigger_extractor = TriggerExtractor::new(
            &mut store,
            d,
            config.fusion,
            config.decoder_heads,
            config.with_self_attention,
            &mut rng,
        )?;
        let argument_extractor = ArgumentExtractor::new(
            &mut store,
            &ArgumentExtractorConfig {
                state_dim: trigger_extractor.fused_dim,
                type_dim: d,
                n_roles: schema.roles.len(),
                fusion_mode: config.fusion,
                heads: config.decoder_heads,
                with_attention: config.with_self_attention,
                with_positions: config.with_positions,
                with_indicator: config.with_indicator,
                l_max: config.l_max,
                d_p: config.d_p,
            },
            &mut rng,
        )?;
        let arg_type_table = config.split_type_table.then(|| {
            store.add_embedding("ae.type_table", schema.types.len(), d, ParamGroup::Decoder, &mut rng)
        });

        Ok(CascadeModel {
            store,
            config,
            schema,
            vocab,
            encoder,
            type_detector,
            trigger_extractor,
            argument_extractor,
            arg_type_table,
        })
    }

    /// Encode a tokenized sentence. Returns (content states (n, d), optional
    /// synthetic sentence-token state (1, d)).
    pub fn encode_tokens(
        &self,
        tape: &mut Tape,
        tokens: &[String],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Option<Var>)> {
        let ids = self.vocab.encode_tokens(tokens);
        let states = self.encoder.encode(tape, &self.store, &ids, rng)?;
        if self.encoder.offset() == 1 {
            let n = tokens.len();
            let cls = tape.gather_rows(states, &[0]);
            let content = tape.gather_rows(states, &(1..=n).collect::<Vec<_>>());
            Ok((content, Some(cls)))
        } else {
            Ok((states, None))
        }
    }

    /// Type embedding used for conditioning and detection.
    pub fn type_embedding(&self, tape: &mut Tape, type_idx: usize) -> Var {
        self.type_detector.type_embedding(tape, &self.store, type_idx)
    }

    /// Type embedding feeding the role indicator (split table when enabled).
    pub fn indicator_type_embedding(&self, tape: &mut Tape, type_idx: usize) -> Var {
        match self.arg_type_table {
            Some(table) => {
                let t = tape.param(&self.store, table);
                tape.gather_rows(t, &[type_idx])
            }
            None => self.type_embedding(tape, type_idx),
        }
    }

    pub fn all_param_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    pub fn save_checkpoint(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let params: Vec<SavedParam> = self
            .store
            .iter()
            .map(|p| SavedParam {
                name: p.name.clone(),
                rows: p.value.nrows(),
                cols: p.value.ncols(),
                group: p.group,
                decay: p.decay,
                data: p.value.iter().cloned().collect(),
            })
            .collect();
        let checkpoint = CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            schema_hash: self.schema.content_hash(),
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            run_config: extra,
            params,
        };
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &checkpoint)
            .map_err(|e| Error::Config(format!("cannot write checkpoint: {e}")))?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path, schema: &EventSchema) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let checkpoint: CheckpointFile =
            serde_json::from_reader(std::io::BufReader::new(file))
                .map_err(|e| Error::Config(format!("cannot read checkpoint: {e}")))?;
        if checkpoint.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format version {}",
                checkpoint.format_version
            )));
        }
        if checkpoint.schema_hash != schema.content_hash() {
            return Err(Error::Config(
                "checkpoint schema hash does not match the provided schema".into(),
            ));
        }
        let vocab = Vocabulary::from_tokens(checkpoint.vocab)?;
        let mut model = CascadeModel::new(schema.clone(), vocab, checkpoint.config, 0)?;
        for saved in checkpoint.params {
            let id = model.store.id_of(&saved.name).ok_or_else(|| {
                Error::Config(format!("checkpoint parameter `{}` not in model", saved.name))
            })?;
            let value = Array2::from_shape_vec((saved.rows, saved.cols), saved.data)
                .map_err(|e| Error::Config(format!("bad tensor for `{}`: {e}", saved.name)))?;
            if value.raw_dim() != model.store.value(id).raw_dim() {
                return Err(Error::Config(format!(
                    "checkpoint parameter `{}` has shape {:?}, expected {:?}",
                    saved.name,
                    value.dim(),
                    model.store.value(id).dim()
                )));
            }
            model.store.get_mut(id).value = value;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    schema_hash: String,
    config: ModelConfig,
    vocab: Vec<String>,
    /// Snapshot of the run configuration that produced the checkpoint.
    run_config: serde_json::Value,
    params: Vec<SavedParam>,
}

#[derive(Serialize, Deserialize)]
struct SavedParam {
    name: String,
    rows: usize,
    cols: usize,
    group: ParamGroup,
    decay: bool,
    data: Vec<f64>,
}
