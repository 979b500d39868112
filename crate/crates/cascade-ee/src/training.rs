//! Joint training: per-condition training instances, the summed binary
//! cross-entropy objective, AdamW with split learning rates and a linear
//! warmup/decay schedule.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::evaluation::{score, EvaluationReport};
use crate::inference::predict_corpus;
use crate::model::CascadeModel;
use crate::params::ParamGroup;
use crate::schema::{Corpus, Span};

pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub encoder_lr: f64,
    pub decoder_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Decoding thresholds xi1..xi5 used for validation metrics.
    pub thresholds: [f64; 5],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            encoder_lr: 2e-5,
            decoder_lr: 1e-4,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            seed: 42,
            thresholds: [0.5; 5],
        }
    }
}

/// One conditioned supervision unit. The cascade trains with teacher
/// forcing: trigger instances condition on gold types, argument instances
/// on gold (type, trigger) pairs.
#[derive(Debug, Clone)]
pub enum Task {
    /// Multi-label type targets, shape (|C|, 1).
    TypeDetection { labels: Array2<f64> },
    /// Boundary targets for all triggers of one type, each (n, 1).
    TriggerExtraction { type_idx: usize, start: Array2<f64>, end: Array2<f64> },
    /// Boundary targets per role for one (type, trigger) pair, each (n, |R|).
    /// Arguments of distinct events sharing the pair are merged.
    ArgumentExtraction { type_idx: usize, trigger: Span, start: Array2<f64>, end: Array2<f64> },
}

#[derive(Debug, Clone)]
pub struct TrainingInstance {
    pub sentence_idx: usize,
    pub task: Task,
}

/// Expand a corpus into per-condition instances: one type-detection
/// instance per sentence, one trigger instance per (sentence, gold type),
/// one argument instance per (sentence, gold type, gold trigger).
pub fn build_instances(corpus: &Corpus) -> Vec<TrainingInstance> {
    let schema = &corpus.schema;
    let n_types = schema.types.len();
    let n_roles = schema.roles.len();
    let mut instances = Vec::new();

    for (sentence_idx, sentence) in corpus.sentences.iter().enumerate() {
        let n = sentence.tokens.len();

        let mut type_labels = Array2::zeros((n_types, 1));
        for event in &sentence.events {
            let k = schema.type_index(&event.event_type).expect("validated corpus");
            type_labels[[k, 0]] = 1.0;
        }
        instances.push(TrainingInstance {
            sentence_idx,
            task: Task::TypeDetection { labels: type_labels },
        });

        // Group triggers by type, then arguments by (type, trigger).
        let mut triggers_by_type: BTreeMap<usize, Vec<Span>> = BTreeMap::new();
        let mut args_by_pair: BTreeMap<(usize, Span), Vec<(usize, Span)>> = BTreeMap::new();
        for event in &sentence.events {
            let k = schema.type_index(&event.event_type).expect("validated corpus");
            triggers_by_type.entry(k).or_default().push(event.trigger);
            let merged = args_by_pair.entry((k, event.trigger)).or_default();
            for (role, span) in &event.arguments {
                let r = schema.role_index(role).expect("validated corpus");
                if !merged.contains(&(r, *span)) {
                    merged.push((r, *span));
                }
            }
        }

        for (&type_idx, triggers) in &triggers_by_type {
            let mut start = Array2::zeros((n, 1));
            let mut end = Array2::zeros((n, 1));
            for t in triggers {
                start[[t.start, 0]] = 1.0;
                end[[t.end, 0]] = 1.0;
            }
            instances.push(TrainingInstance {
                sentence_idx,
                task: Task::TriggerExtraction { type_idx, start, end },
            });
        }

        for (&(type_idx, trigger), args) in &args_by_pair {
            let mut start = Array2::zeros((n, n_roles));
            let mut end = Array2::zeros((n, n_roles));
            for &(r, span) in args {
                start[[span.start, r]] = 1.0;
                end[[span.end, r]] = 1.0;
            }
            instances.push(TrainingInstance {
                sentence_idx,
                task: Task::ArgumentExtraction { type_idx, trigger, start, end },
            });
        }
    }
    instances
}

/// Summed binary cross-entropy of one instance, as a scalar tape node.
pub fn instance_loss(
    model: &CascadeModel,
    tape: &mut Tape,
    corpus: &Corpus,
    instance: &TrainingInstance,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let sentence = &corpus.sentences[instance.sentence_idx];
    let (content, cls) = model.encode_tokens(tape, &sentence.tokens, rng.as_deref_mut())?;

    match &instance.task {
        Task::TypeDetection { labels } => {
            let probs = model.type_detector.detect(tape, &model.store, content, cls)?;
            Ok(tape.bce(probs, labels.clone(), BCE_CLAMP))
        }
        Task::TriggerExtraction { type_idx, start, end } => {
            let c = model.type_embedding(tape, *type_idx);
            let (_, refined) =
                model.trigger_extractor.condition_on_type(tape, &model.store, content, c);
            let (sp, ep) = model.trigger_extractor.tag(tape, &model.store, refined);
            let ls = tape.bce(sp, start.clone(), BCE_CLAMP);
            let le = tape.bce(ep, end.clone(), BCE_CLAMP);
            Ok(tape.add(ls, le))
        }
        Task::ArgumentExtraction { type_idx, trigger, start, end } => {
            let c = model.type_embedding(tape, *type_idx);
            let (fused, _) =
                model.trigger_extractor.condition_on_type(tape, &model.store, content, c);
            let conditioned =
                model.argument_extractor.condition_on_trigger(tape, &model.store, fused, *trigger)?;
            let ind_emb = model.indicator_type_embedding(tape, *type_idx);
            let indicator = model.argument_extractor.role_indicator(tape, &model.store, ind_emb);
            let (sp, ep) = model.argument_extractor.tag(tape, &model.store, conditioned, indicator);
            let ls = tape.bce(sp, start.clone(), BCE_CLAMP);
            let le = tape.bce(ep, end.clone(), BCE_CLAMP);
            Ok(tape.add(ls, le))
        }
    }
}

/// Loss values of a set of instances, broken down by subtask. The total is
/// the exact sum of the three parts divided by the instance count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub type_detection: f64,
    pub trigger_extraction: f64,
    pub argument_extraction: f64,
    pub total: f64,
}

pub fn evaluate_loss(
    model: &CascadeModel,
    corpus: &Corpus,
    instances: &[TrainingInstance],
) -> Result<LossBreakdown> {
    if instances.is_empty() {
        return Err(Error::Argument("cannot evaluate loss on zero instances".into()));
    }
    let mut parts = [0.0; 3];
    for instance in instances {
        let mut tape = Tape::new();
        let loss = instance_loss(model, &mut tape, corpus, instance, None)?;
        let value = tape.value(loss)[[0, 0]];
        let slot = match instance.task {
            Task::TypeDetection { .. } => 0,
            Task::TriggerExtraction { .. } => 1,
            Task::ArgumentExtraction { .. } => 2,
        };
        parts[slot] += value;
    }
    let scale = 1.0 / instances.len() as f64;
    Ok(LossBreakdown {
        type_detection: parts[0] * scale,
        trigger_extraction: parts[1] * scale,
        argument_extraction: parts[2] * scale,
        total: (parts[0] + parts[1] + parts[2]) * scale,
    })
}

/// Linear warmup to 1, then linear decay to 0 over the remaining steps.
pub fn lr_scale(step: usize, total_steps: usize, warmup_fraction: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = ((total_steps as f64) * warmup_fraction).floor() as usize;
    if step < warmup {
        (step + 1) as f64 / warmup as f64
    } else if total_steps > warmup {
        (total_steps - step) as f64 / (total_steps - warmup) as f64
    } else {
        1.0
    }
}

/// AdamW with decoupled weight decay and per-group learning rates. Decay
/// skips parameters flagged `decay = false` (biases, normalization gains).
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    encoder_lr: f64,
    decoder_lr: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(model: &CascadeModel, cfg: &TrainConfig) -> Self {
        let m = model.store.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect();
        let v = model.store.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            encoder_lr: cfg.encoder_lr,
            decoder_lr: cfg.decoder_lr,
            m,
            v,
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut CascadeModel, scale: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in model.store.iter_mut().enumerate() {
            let lr = scale
                * match p.group {
                    ParamGroup::Encoder => self.encoder_lr,
                    ParamGroup::Decoder => self.decoder_lr,
                };
            self.m[i].zip_mut_with(&p.grad, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            self.v[i]
                .zip_mut_with(&p.grad, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            ndarray::Zip::from(&mut p.value)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|w, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *w -= lr * (m_hat / (v_hat.sqrt() + self.eps) + decay * *w);
                });
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: LossBreakdown,
    pub val_ti_f1: f64,
    pub val_tc_f1: f64,
    pub val_ai_f1: f64,
    pub val_ac_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// None when training ran for zero epochs.
    pub best_epoch: Option<usize>,
    pub best_val_ac_f1: f64,
    pub history: Vec<EpochRecord>,
}

/// Train the model in place, tracking the best epoch by validation AC F1.
/// The checkpoint written to `checkpoint_path` holds the best parameters;
/// on divergence the best parameters so far are restored and saved before
/// the error is returned.
pub fn train(
    model: &mut CascadeModel,
    train_corpus: &Corpus,
    val_corpus: &Corpus,
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
    history_path: Option<&Path>,
    run_config: serde_json::Value,
) -> Result<TrainOutcome> {
    let instances = build_instances(train_corpus);
    if instances.is_empty() {
        return Err(Error::Argument("training corpus produced no instances".into()));
    }
    let batches_per_epoch = instances.len().div_ceil(cfg.batch_size.max(1));
    let total_steps = batches_per_epoch * cfg.epochs;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = AdamW::new(model, cfg);
    let mut history = Vec::new();
    let mut best_epoch = None;
    let mut best_ac = f64::NEG_INFINITY;
    let mut best_values: Vec<Array2<f64>> = model.store.iter().map(|p| p.value.clone()).collect();

    let mut history_file = match history_path {
        Some(p) => Some(std::fs::File::create(p)?),
        None => None,
    };

    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut step = 0;
    let mut diverged = false;

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_parts = [0.0; 3];
        for batch in order.chunks(cfg.batch_size.max(1)) {
            model.store.zero_grads();
            let inv = 1.0 / batch.len() as f64;
            for &idx in batch {
                let instance = &instances[idx];
                let mut tape = Tape::new();
                let loss = instance_loss(model, &mut tape, train_corpus, instance, Some(&mut rng))?;
                let scaled = tape.scale(loss, inv);
                let value = tape.value(loss)[[0, 0]];
                if !value.is_finite() {
                    diverged = true;
                    break 'epochs;
                }
                let slot = match instance.task {
                    Task::TypeDetection { .. } => 0,
                    Task::TriggerExtraction { .. } => 1,
                    Task::ArgumentExtraction { .. } => 2,
                };
                epoch_parts[slot] += value;
                tape.backward(scaled, &mut model.store);
            }
            optimizer.step(model, lr_scale(step, total_steps, cfg.warmup_fraction));
            step += 1;
        }

        let scale = 1.0 / instances.len() as f64;
        let train_loss = LossBreakdown {
            type_detection: epoch_parts[0] * scale,
            trigger_extraction: epoch_parts[1] * scale,
            argument_extraction: epoch_parts[2] * scale,
            total: (epoch_parts[0] + epoch_parts[1] + epoch_parts[2]) * scale,
        };

        let report = validate(model, val_corpus, cfg.thresholds)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_ti_f1: report.all.ti.f1(),
            val_tc_f1: report.all.tc.f1(),
            val_ai_f1: report.all.ai.f1(),
            val_ac_f1: report.all.ac.f1(),
        };
        if let Some(f) = history_file.as_mut() {
            serde_json::to_writer(&mut *f, &record)
                .map_err(|e| Error::Config(format!("cannot write history: {e}")))?;
            writeln!(f)?;
        }
        if record.val_ac_f1 > best_ac {
            best_ac = record.val_ac_f1;
            best_epoch = Some(epoch);
            for (slot, p) in best_values.iter_mut().zip(model.store.iter()) {
                slot.clone_from(&p.value);
            }
        }
        history.push(record);
    }

    // Leave the model at its best parameters; with zero epochs these are
    // the initial ones.
    if best_epoch.is_some() || cfg.epochs == 0 || diverged {
        let ids: Vec<_> = model.store.ids().collect();
        for (id, value) in ids.into_iter().zip(best_values.into_iter()) {
            model.store.get_mut(id).value = value;
        }
    }
    if let Some(path) = checkpoint_path {
        model.save_checkpoint(path, run_config)?;
    }
    if diverged {
        return Err(Error::Numeric("training diverged; best checkpoint preserved".into()));
    }
    Ok(TrainOutcome {
        best_epoch,
        best_val_ac_f1: if best_ac.is_finite() { best_ac } else { 0.0 },
        history,
    })
}

/// Decode the validation corpus and score it against gold.
pub fn validate(
    model: &CascadeModel,
    corpus: &Corpus,
    thresholds: [f64; 5],
) -> Result<EvaluationReport> {
    let predictions = predict_corpus(model, corpus, thresholds, false)?;
    let by_id = crate::inference::predictions_as_events(&predictions);
    score(corpus, &by_id, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, Vocabulary};
    use crate::model::ModelConfig;
    use crate::schema::{AnnotatedSentence, EventRecord, EventSchema};

    fn schema() -> EventSchema {
        EventSchema::new(
            vec!["A".into(), "B".into()],
            vec!["r0".into(), "r1".into()],
            [
                ("A".to_string(), vec!["r0".to_string(), "r1".to_string()]),
                ("B".to_string(), vec!["r0".to_string(), "r1".to_string()]),
            ]
            .into_iter()
            .collect(),
        )
        .unwrap()
    }

    fn corpus() -> Corpus {
        let schema = schema();
        let sentences = vec![
            AnnotatedSentence {
                id: "s0".into(),
                tokens: vec!["a".into(), "b".into(), "c".into(), "d".into()],
                events: vec![
                    EventRecord {
                        event_type: "A".into(),
                        trigger: Span::new(0, 0),
                        arguments: vec![("r0".into(), Span::new(2, 2))],
                    },
                    EventRecord {
                        event_type: "B".into(),
                        trigger: Span::new(1, 1),
                        arguments: vec![("r0".into(), Span::new(2, 2))],
                    },
                ],
            },
            AnnotatedSentence {
                id: "s1".into(),
                tokens: vec!["e".into(), "f".into()],
                events: vec![],
            },
        ];
        Corpus::new(sentences, schema).unwrap()
    }

    fn model(corpus: &Corpus) -> CascadeModel {
        let config = ModelConfig {
            encoder: EncoderConfig {
                hidden_dim: 8,
                layers: 1,
                heads: 2,
                max_len: 16,
                dropout: 0.0,
                with_ffn: false,
                prepend_cls: false,
            },
            decoder_heads: 2,
            d_p: 4,
            l_max: 4,
            ..ModelConfig::default()
        };
        CascadeModel::new(corpus.schema.clone(), Vocabulary::build(corpus), config, 7).unwrap()
    }

    #[test]
    fn instances_cover_all_conditions() {
        let corpus = corpus();
        let instances = build_instances(&corpus);
        // s0: 1 type + 2 trigger (types A, B) + 2 argument; s1: 1 type.
        assert_eq!(instances.len(), 6);
        let type_count = instances
            .iter()
            .filter(|i| matches!(i.task, Task::TypeDetection { .. }))
            .count();
        assert_eq!(type_count, 2);
    }

    #[test]
    fn shared_pair_arguments_merge_into_one_instance() {
        let schema = schema();
        let sentence = AnnotatedSentence {
            id: "s".into(),
            tokens: vec!["a".into(), "b".into(), "c".into()],
            events: vec![
                EventRecord {
                    event_type: "A".into(),
                    trigger: Span::new(0, 0),
                    arguments: vec![("r0".into(), Span::new(1, 1))],
                },
                EventRecord {
                    event_type: "A".into(),
                    trigger: Span::new(0, 0),
                    arguments: vec![("r1".into(), Span::new(2, 2))],
                },
            ],
        };
        let corpus = Corpus::new(vec![sentence], schema).unwrap();
        let instances = build_instances(&corpus);
        let args: Vec<_> = instances
            .iter()
            .filter_map(|i| match &i.task {
                Task::ArgumentExtraction { start, .. } => Some(start),
                _ => None,
            })
            .collect();
        assert_eq!(args.len(), 1);
        assert_eq!(args[0][[1, 0]], 1.0);
        assert_eq!(args[0][[2, 1]], 1.0);
    }

    #[test]
    fn loss_decomposes_into_subtask_sums() {
        let corpus = corpus();
        let model = model(&corpus);
        let instances = build_instances(&corpus);
        let all = evaluate_loss(&model, &corpus, &instances).unwrap();
        let sum = all.type_detection + all.trigger_extraction + all.argument_extraction;
        assert!((all.total - sum).abs() < 1e-12);

        let per_task: f64 = instances
            .iter()
            .map(|i| {
                evaluate_loss(&model, &corpus, std::slice::from_ref(i)).unwrap().total
            })
            .sum::<f64>()
            / instances.len() as f64;
        assert!((all.total - per_task).abs() < 1e-9);
    }

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let total = 100;
        assert!(lr_scale(0, total, 0.1) > 0.0);
        assert!((lr_scale(9, total, 0.1) - 1.0).abs() < 1e-12);
        assert!(lr_scale(50, total, 0.1) < 1.0);
        assert!((lr_scale(99, total, 0.1) - 1.0 / 90.0).abs() < 1e-12);
        assert_eq!(lr_scale(0, 0, 0.1), 0.0);
    }

    #[test]
    fn adamw_decays_weights_but_not_biases() {
        let corpus = corpus();
        let mut model = model(&corpus);
        let cfg = TrainConfig { weight_decay: 0.5, decoder_lr: 1.0, encoder_lr: 1.0, ..TrainConfig::default() };
        let w = model.store.id_of("te.w_start").unwrap();
        let b = model.store.id_of("te.b_start").unwrap();
        model.store.get_mut(w).value.fill(1.0);
        model.store.get_mut(b).value.fill(1.0);
        // Zero grads: the update reduces to pure decoupled decay.
        let mut opt = AdamW::new(&model, &cfg);
        opt.step(&mut model, 1.0);
        assert!((model.store.value(w)[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((model.store.value(b)[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn short_training_reduces_loss_and_is_deterministic() {
        let corpus = corpus();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            encoder_lr: 1e-3,
            decoder_lr: 1e-2,
            seed: 11,
            ..TrainConfig::default()
        };
        let run = |seed: u64| {
            let mut m = model(&corpus);
            let instances = build_instances(&corpus);
            let before = evaluate_loss(&m, &corpus, &instances).unwrap().total;
            let mut probe = m.store.iter().map(|p| p.value.clone()).collect::<Vec<_>>();
            train(&mut m, &corpus, &corpus, &TrainConfig { seed, ..cfg.clone() }, None, None, serde_json::json!({}))
                .unwrap();
            for (slot, p) in probe.iter_mut().zip(m.store.iter()) {
                slot.clone_from(&p.value);
            }
            let after = evaluate_loss(&m, &corpus, &instances).unwrap().total;
            (before, after, probe)
        };
        let (before, after, w1) = run(11);
        assert!(after < before, "loss did not improve: {before} -> {after}");
        let (_, _, w2) = run(11);
        for (a, b) in w1.iter().zip(w2.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let corpus = corpus();
        let mut m = model(&corpus);
        let initial: Vec<_> = m.store.iter().map(|p| p.value.clone()).collect();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let outcome =
            train(&mut m, &corpus, &corpus, &cfg, None, None, serde_json::json!({})).unwrap();
        assert!(outcome.best_epoch.is_none());
        assert!(outcome.history.is_empty());
        for (a, p) in initial.iter().zip(m.store.iter()) {
            assert_eq!(a, &p.value);
        }
    }
}
