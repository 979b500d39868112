//! Cascade decoding: detected types condition trigger tagging, and each
//! (type, trigger) pair conditions role-specific argument tagging. Output
//! events carry per-stage confidences.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::CascadeModel;
use crate::schema::{Corpus, EventRecord, Span};
use crate::trigger_extractor::TriggerExtractor;
use crate::type_detector::TypeDetector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedArgument {
    pub role: String,
    pub span: Span,
    pub start_confidence: f64,
    pub end_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedEvent {
    #[serde(rename = "type")]
    pub event_type: String,
    pub trigger: Span,
    pub type_confidence: f64,
    pub trigger_start_confidence: f64,
    pub trigger_end_confidence: f64,
    pub arguments: Vec<PredictedArgument>,
}

impl PredictedEvent {
    /// Factorized event score: the product of all stage confidences.
    pub fn score(&self) -> f64 {
        let mut s =
            self.type_confidence * self.trigger_start_confidence * self.trigger_end_confidence;
        for a in &self.arguments {
            s *= a.start_confidence * a.end_confidence;
        }
        s
    }

    pub fn to_record(&self) -> EventRecord {
        EventRecord {
            event_type: self.event_type.clone(),
            trigger: self.trigger,
            arguments: self.arguments.iter().map(|a| (a.role.clone(), a.span)).collect(),
        }
    }
}

/// Run the full cascade on one tokenized sentence.
///
/// `thresholds` are xi1..xi5: type detection, trigger start/end, argument
/// start/end. With `strict_roles`, roles illegal for the event type are
/// suppressed regardless of the learned indicator.
pub fn extract_events(
    model: &CascadeModel,
    tokens: &[String],
    thresholds: [f64; 5],
    strict_roles: bool,
) -> Result<Vec<PredictedEvent>> {
    let schema = &model.schema;
    let mut tape = Tape::new();
    let (content, cls) = model.encode_tokens(&mut tape, tokens, None)?;

    let type_probs = model.type_detector.detect(&mut tape, &model.store, content, cls)?;
    let type_probs: Vec<f64> = tape.value(type_probs).iter().cloned().collect();
    let detected = TypeDetector::thresholded(&type_probs, thresholds[0]);

    let mut events = Vec::new();
    for (type_idx, type_confidence) in detected {
        let c = model.type_embedding(&mut tape, type_idx);
        let (fused, refined) =
            model.trigger_extractor.condition_on_type(&mut tape, &model.store, content, c);
        let (sp, ep) = model.trigger_extractor.tag(&mut tape, &model.store, refined);
        let start_probs: Vec<f64> = tape.value(sp).iter().cloned().collect();
        let end_probs: Vec<f64> = tape.value(ep).iter().cloned().collect();
        let triggers =
            TriggerExtractor::spans_from_probs(&start_probs, &end_probs, thresholds[1], thresholds[2])?;

        for trigger in triggers {
            let conditioned = model.argument_extractor.condition_on_trigger(
                &mut tape,
                &model.store,
                fused,
                trigger,
            )?;
            let ind_emb = model.indicator_type_embedding(&mut tape, type_idx);
            let indicator =
                model.argument_extractor.role_indicator(&mut tape, &model.store, ind_emb);
            let (asp, aep) =
                model.argument_extractor.tag(&mut tape, &model.store, conditioned, indicator);
            let asp = tape.value(asp).clone();
            let aep = tape.value(aep).clone();

            let mut arguments = Vec::new();
            for (r, role) in schema.roles.iter().enumerate() {
                if strict_roles && !schema.is_legal(&schema.types[type_idx], role) {
                    continue;
                }
                let col_start: Vec<f64> = asp.column(r).iter().cloned().collect();
                let col_end: Vec<f64> = aep.column(r).iter().cloned().collect();
                for span in crate::argument_extractor::ArgumentExtractor::spans_for_role(
                    &col_start,
                    &col_end,
                    thresholds[3],
                    thresholds[4],
                )? {
                    arguments.push(PredictedArgument {
                        role: role.clone(),
                        span,
                        start_confidence: col_start[span.start],
                        end_confidence: col_end[span.end],
                    });
                }
            }
            arguments.sort_by(|a, b| {
                let ra = schema.role_index(&a.role).unwrap_or(usize::MAX);
                let rb = schema.role_index(&b.role).unwrap_or(usize::MAX);
                ra.cmp(&rb).then(a.span.cmp(&b.span))
            });

            events.push(PredictedEvent {
                event_type: schema.types[type_idx].clone(),
                trigger,
                type_confidence,
                trigger_start_confidence: start_probs[trigger.start],
                trigger_end_confidence: end_probs[trigger.end],
                arguments,
            });
        }
    }
    // Canonical order: type index, then trigger position.
    events.sort_by(|a, b| {
        let ka = schema.type_index(&a.event_type).unwrap_or(usize::MAX);
        let kb = schema.type_index(&b.event_type).unwrap_or(usize::MAX);
        ka.cmp(&kb).then(a.trigger.cmp(&b.trigger))
    });
    Ok(events)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub tokens: Vec<String>,
    pub events: Vec<PredictedEvent>,
}

pub fn predict_corpus(
    model: &CascadeModel,
    corpus: &Corpus,
    thresholds: [f64; 5],
    strict_roles: bool,
) -> Result<Vec<Prediction>> {
    corpus
        .sentences
        .iter()
        .map(|s| {
            Ok(Prediction {
                id: s.id.clone(),
                tokens: s.tokens.clone(),
                events: extract_events(model, &s.tokens, thresholds, strict_roles)?,
            })
        })
        .collect()
}

/// Predicted events keyed by sentence id, as plain records for scoring.
pub fn predictions_as_events(predictions: &[Prediction]) -> HashMap<String, Vec<EventRecord>> {
    predictions
        .iter()
        .map(|p| (p.id.clone(), p.events.iter().map(PredictedEvent::to_record).collect()))
        .collect()
}

/// One JSON object per line, mirroring the corpus format plus confidences.
pub fn save_predictions(predictions: &[Prediction], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for p in predictions {
        serde_json::to_writer(&mut w, p)
            .map_err(|e| Error::Config(format!("cannot serialize prediction: {e}")))?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = std::fs::File::open(path)?;
    std::io::BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Ok(l) if l.trim().is_empty()))
        .map(|(i, line)| {
            let line = line?;
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("bad prediction line: {e}"),
            })
        })
        .collect()
}
