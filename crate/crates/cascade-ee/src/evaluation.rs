//! Tuple-set scoring of predicted events against gold, with overlap-aware
//! group decomposition.
//!
//! Four stages are scored: trigger identification (span), trigger
//! classification (type + span), argument identification (type + span) and
//! argument classification (type + span + role). Counts are kept as
//! integers; precision, recall and F1 derive from them exactly.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{classify_overlap, Corpus, EventRecord, Span};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        if self.predicted == 0 { 0.0 } else { self.correct as f64 / self.predicted as f64 }
    }

    pub fn recall(&self) -> f64 {
        if self.gold == 0 { 0.0 } else { self.correct as f64 / self.gold as f64 }
    }

    pub fn f1(&self) -> f64 {
        // Integer form: avoids compounding rounding through P and R.
        if self.gold + self.predicted == 0 {
            0.0
        } else {
            2.0 * self.correct as f64 / (self.gold + self.predicted) as f64
        }
    }

    fn absorb(&mut self, other: &Counts) {
        self.gold += other.gold;
        self.predicted += other.predicted;
        self.correct += other.correct;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub ti: Counts,
    pub tc: Counts,
    pub ai: Counts,
    pub ac: Counts,
}

impl StageCounts {
    fn absorb(&mut self, other: &StageCounts) {
        self.ti.absorb(&other.ti);
        self.tc.absorb(&other.tc);
        self.ai.absorb(&other.ai);
        self.ac.absorb(&other.ac);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeScore {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub all: StageCounts,
    /// Sentences exhibiting at least one overlap pattern.
    pub overlap: StageCounts,
    pub normal: StageCounts,
    /// Per-type trigger classification scores, for types present in gold.
    pub per_type: Vec<(String, TypeScore)>,
    pub macro_type_f1: f64,
    /// Whether argument tuples were additionally matched on the trigger.
    pub strict_arguments: bool,
}

type AiTuple = (usize, Option<Span>, Span);
type AcTuple = (usize, Option<Span>, Span, usize);

fn tuples(
    corpus: &Corpus,
    events: &[EventRecord],
    strict: bool,
) -> Result<(BTreeSet<Span>, BTreeSet<(usize, Span)>, BTreeSet<AiTuple>, BTreeSet<AcTuple>)> {
    let schema = &corpus.schema;
    let mut ti = BTreeSet::new();
    let mut tc = BTreeSet::new();
    let mut ai = BTreeSet::new();
    let mut ac = BTreeSet::new();
    for event in events {
        let k = schema
            .type_index(&event.event_type)
            .ok_or_else(|| Error::Argument(format!("unknown event type `{}`", event.event_type)))?;
        ti.insert(event.trigger);
        tc.insert((k, event.trigger));
        let anchor = strict.then_some(event.trigger);
        for (role, span) in &event.arguments {
            let r = schema
                .role_index(role)
                .ok_or_else(|| Error::Argument(format!("unknown role `{role}`")))?;
            ai.insert((k, anchor, *span));
            ac.insert((k, anchor, *span, r));
        }
    }
    Ok((ti, tc, ai, ac))
}

fn count<T: Ord>(gold: &BTreeSet<T>, pred: &BTreeSet<T>) -> Counts {
    Counts {
        gold: gold.len(),
        predicted: pred.len(),
        correct: gold.intersection(pred).count(),
    }
}

/// Score predictions (events keyed by sentence id) against a gold corpus.
///
/// Sentences without an entry count as empty predictions; ids absent from
/// the corpus are an error. With `strict_arguments`, argument tuples match
/// only when the predicted trigger span also matches.
pub fn score(
    gold: &Corpus,
    predictions: &HashMap<String, Vec<EventRecord>>,
    strict_arguments: bool,
) -> Result<EvaluationReport> {
    let known: BTreeSet<&String> = gold.sentences.iter().map(|s| &s.id).collect();
    if let Some(extra) = predictions.keys().find(|id| !known.contains(id)) {
        return Err(Error::Argument(format!("prediction for unknown sentence `{extra}`")));
    }

    let empty: Vec<EventRecord> = Vec::new();
    let mut all = StageCounts::default();
    let mut overlap = StageCounts::default();
    let mut normal = StageCounts::default();
    let mut per_type_counts: Vec<Counts> = vec![Counts::default(); gold.schema.types.len()];

    for sentence in &gold.sentences {
        let predicted = predictions.get(&sentence.id).unwrap_or(&empty);
        let (g_ti, g_tc, g_ai, g_ac) = tuples(gold, &sentence.events, strict_arguments)?;
        let (p_ti, p_tc, p_ai, p_ac) = tuples(gold, predicted, strict_arguments)?;
        let counts = StageCounts {
            ti: count(&g_ti, &p_ti),
            tc: count(&g_tc, &p_tc),
            ai: count(&g_ai, &p_ai),
            ac: count(&g_ac, &p_ac),
        };
        all.absorb(&counts);
        if classify_overlap(sentence).is_empty() {
            normal.absorb(&counts);
        } else {
            overlap.absorb(&counts);
        }
        for k in 0..gold.schema.types.len() {
            let g: BTreeSet<_> = g_tc.iter().filter(|(t, _)| *t == k).collect();
            let p: BTreeSet<_> = p_tc.iter().filter(|(t, _)| *t == k).collect();
            per_type_counts[k].absorb(&count(&g, &p));
        }
    }

    // Macro average over types that occur in gold.
    let mut per_type = Vec::new();
    let mut f1_sum = 0.0;
    for (k, counts) in per_type_counts.iter().enumerate() {
        if counts.gold == 0 {
            continue;
        }
        f1_sum += counts.f1();
        per_type.push((
            gold.schema.types[k].clone(),
            TypeScore {
                gold: counts.gold,
                predicted: counts.predicted,
                correct: counts.correct,
                precision: counts.precision(),
                recall: counts.recall(),
                f1: counts.f1(),
            },
        ));
    }
    let macro_type_f1 = if per_type.is_empty() { 0.0 } else { f1_sum / per_type.len() as f64 };

    Ok(EvaluationReport {
        all,
        overlap,
        normal,
        per_type,
        macro_type_f1,
        strict_arguments,
    })
}

impl EvaluationReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)
            .map_err(|e| Error::Config(format!("cannot write report: {e}")))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Config(format!("cannot read report: {e}")))
    }

    /// Fixed-width console table of the group/stage breakdown.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<8} {:<6} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8}",
            "group", "stage", "gold", "pred", "corr", "prec", "rec", "f1");
        for (name, counts) in
            [("all", &self.all), ("overlap", &self.overlap), ("normal", &self.normal)]
        {
            for (stage, c) in
                [("TI", counts.ti), ("TC", counts.tc), ("AI", counts.ai), ("AC", counts.ac)]
            {
                let _ = writeln!(
                    out,
                    "{:<8} {:<6} {:>6} {:>6} {:>6} {:>8.4} {:>8.4} {:>8.4}",
                    name, stage, c.gold, c.predicted, c.correct,
                    c.precision(), c.recall(), c.f1()
                );
            }
        }
        let _ = writeln!(out, "macro type classification f1: {:.4}", self.macro_type_f1);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{AnnotatedSentence, EventSchema};

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

    fn event(ty: &str, trig: (usize, usize), args: &[(&str, (usize, usize))]) -> EventRecord {
        EventRecord {
            event_type: ty.into(),
            trigger: Span::new(trig.0, trig.1),
            arguments: args
                .iter()
                .map(|(r, s)| (r.to_string(), Span::new(s.0, s.1)))
                .collect(),
        }
    }

    fn corpus() -> Corpus {
        // s0 is an overlapped sentence (shared trigger span across types);
        // s1 is normal.
        let sentences = vec![
            AnnotatedSentence {
                id: "s0".into(),
                tokens: (0..6).map(|i| format!("t{i}")).collect(),
                events: vec![
                    event("A", (1, 1), &[("r0", (3, 3))]),
                    event("B", (1, 1), &[("r1", (4, 5))]),
                ],
            },
            AnnotatedSentence {
                id: "s1".into(),
                tokens: (0..4).map(|i| format!("t{i}")).collect(),
                events: vec![event("A", (0, 0), &[("r0", (2, 3))])],
            },
        ];
        Corpus::new(sentences, schema()).unwrap()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let corpus = corpus();
        let predictions: HashMap<_, _> = corpus
            .sentences
            .iter()
            .map(|s| (s.id.clone(), s.events.clone()))
            .collect();
        let report = score(&corpus, &predictions, false).unwrap();
        for c in [report.all.ti, report.all.tc, report.all.ai, report.all.ac] {
            assert_eq!(c.gold, c.correct);
            assert_eq!(c.predicted, c.correct);
            assert_eq!(c.f1(), 1.0);
        }
        assert_eq!(report.macro_type_f1, 1.0);
        // s0 has two trigger-classification tuples but one trigger span.
        assert_eq!(report.overlap.ti.gold, 1);
        assert_eq!(report.overlap.tc.gold, 2);
        assert_eq!(report.normal.tc.gold, 1);
    }

    #[test]
    fn empty_predictions_have_zero_recall_and_zero_precision_convention() {
        let corpus = corpus();
        let report = score(&corpus, &HashMap::new(), false).unwrap();
        assert_eq!(report.all.tc.recall(), 0.0);
        assert_eq!(report.all.tc.precision(), 0.0);
        assert_eq!(report.all.tc.f1(), 0.0);
    }

    #[test]
    fn counts_are_exact_integers() {
        let corpus = corpus();
        // One correct TC tuple, one spurious prediction.
        let predictions: HashMap<_, _> = [(
            "s0".to_string(),
            vec![event("A", (1, 1), &[]), event("B", (2, 2), &[])],
        )]
        .into_iter()
        .collect();
        let report = score(&corpus, &predictions, false).unwrap();
        assert_eq!(report.all.tc, Counts { gold: 3, predicted: 2, correct: 1 });
        assert_eq!(report.all.tc.precision(), 0.5);
        assert_eq!(report.all.tc.recall(), 1.0 / 3.0);
        assert_eq!(report.all.tc.f1(), 2.0 / 5.0);
    }

    #[test]
    fn misclassified_type_hits_ti_but_not_tc() {
        let corpus = corpus();
        let predictions: HashMap<_, _> =
            [("s1".to_string(), vec![event("B", (0, 0), &[])])].into_iter().collect();
        let report = score(&corpus, &predictions, false).unwrap();
        assert_eq!(report.normal.ti.correct, 1);
        assert_eq!(report.normal.tc.correct, 0);
    }

    #[test]
    fn wrong_role_hits_ai_but_not_ac() {
        let corpus = corpus();
        let predictions: HashMap<_, _> = [(
            "s1".to_string(),
            vec![event("A", (0, 0), &[("r1", (2, 3))])],
        )]
        .into_iter()
        .collect();
        let report = score(&corpus, &predictions, false).unwrap();
        assert_eq!(report.all.ai.correct, 1);
        assert_eq!(report.all.ac.correct, 0);
    }

    #[test]
    fn strict_arguments_require_matching_trigger() {
        let corpus = corpus();
        // Right type and argument, wrong trigger span.
        let predictions: HashMap<_, _> = [(
            "s1".to_string(),
            vec![event("A", (1, 1), &[("r0", (2, 3))])],
        )]
        .into_iter()
        .collect();
        let lax = score(&corpus, &predictions, false).unwrap();
        let strict = score(&corpus, &predictions, true).unwrap();
        assert_eq!(lax.all.ac.correct, 1);
        assert_eq!(strict.all.ac.correct, 0);
        assert!(strict.strict_arguments);
    }

    #[test]
    fn duplicate_tuples_collapse() {
        let corpus = corpus();
        // The same argument span under both events of s0 with the same role
        // and type tuple must count once.
        let predictions: HashMap<_, _> = [(
            "s0".to_string(),
            vec![
                event("A", (1, 1), &[("r0", (3, 3))]),
                event("A", (1, 1), &[("r0", (3, 3))]),
            ],
        )]
        .into_iter()
        .collect();
        let report = score(&corpus, &predictions, false).unwrap();
        assert_eq!(report.all.tc.predicted, 1);
        assert_eq!(report.all.ac.predicted, 1);
    }

    #[test]
    fn unknown_prediction_id_is_an_error() {
        let corpus = corpus();
        let predictions: HashMap<_, _> =
            [("nope".to_string(), vec![])].into_iter().collect();
        assert!(score(&corpus, &predictions, false).is_err());
    }

    #[test]
    fn macro_average_ignores_types_absent_from_gold() {
        let schema = schema();
        let sentences = vec![AnnotatedSentence {
            id: "s".into(),
            tokens: (0..3).map(|i| format!("t{i}")).collect(),
            events: vec![event("A", (0, 0), &[])],
        }];
        let corpus = Corpus::new(sentences, schema).unwrap();
        let predictions: HashMap<_, _> =
            [("s".to_string(), vec![event("A", (0, 0), &[])])].into_iter().collect();
        let report = score(&corpus, &predictions, false).unwrap();
        assert_eq!(report.per_type.len(), 1);
        assert_eq!(report.per_type[0].0, "A");
        assert_eq!(report.macro_type_f1, 1.0);
    }

    #[test]
    fn report_roundtrip_and_table() {
        let corpus = corpus();
        let report = score(&corpus, &HashMap::new(), false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.save(&path).unwrap();
        assert_eq!(EvaluationReport::load(&path).unwrap(), report);
        let table = report.render_table();
        assert!(table.contains("overlap"));
        assert!(table.contains("TC"));
    }
}
