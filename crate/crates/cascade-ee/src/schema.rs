//! Event schema, corpus data model, corpus I/O, overlap-pattern taxonomy
//! and deterministic corpus splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Event type inventory, role inventory and the type -> legal roles map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSchema {
    pub types: Vec<String>,
    pub roles: Vec<String>,
    pub legal_roles: BTreeMap<String, Vec<String>>,
}

impl EventSchema {
    pub fn new(
        types: Vec<String>,
        roles: Vec<String>,
        legal_roles: BTreeMap<String, Vec<String>>,
    ) -> Result<Self> {
        let schema = EventSchema { types, roles, legal_roles };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let type_set: HashSet<_> = self.types.iter().collect();
        if type_set.len() != self.types.len() {
            return Err(Error::Argument("duplicate type names in schema".into()));
        }
        let role_set: HashSet<_> = self.roles.iter().collect();
        if role_set.len() != self.roles.len() {
            return Err(Error::Argument("duplicate role names in schema".into()));
        }
        for (ty, roles) in &self.legal_roles {
            if !type_set.contains(ty) {
                return Err(Error::Argument(format!("legal_roles names unknown type `{ty}`")));
            }
            if roles.is_empty() {
                return Err(Error::Argument(format!("legal_roles for `{ty}` is empty")));
            }
            for r in roles {
                if !role_set.contains(r) {
                    return Err(Error::Argument(format!(
                        "legal_roles for `{ty}` names unknown role `{r}`"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn type_index(&self, ty: &str) -> Option<usize> {
        self.types.iter().position(|t| t == ty)
    }

    pub fn role_index(&self, role: &str) -> Option<usize> {
        self.roles.iter().position(|r| r == role)
    }

    pub fn is_legal(&self, ty: &str, role: &str) -> bool {
        self.legal_roles
            .get(ty)
            .map(|rs| rs.iter().any(|r| r == role))
            .unwrap_or(false)
    }

    /// Stable hash of the schema contents, used to guard checkpoint loading.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("schema serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_string(&hasher.finalize())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let raw: SchemaFile = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { line: 1, message: format!("schema file: {e}") })?;
        let roles = match raw.roles {
            Some(roles) => roles,
            None => {
                // Derive a stable role inventory from the legality map.
                let set: BTreeSet<String> =
                    raw.legal_roles.values().flatten().cloned().collect();
                set.into_iter().collect()
            }
        };
        EventSchema::new(raw.types, roles, raw.legal_roles)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = SchemaFile {
            types: self.types.clone(),
            roles: Some(self.roles.clone()),
            legal_roles: self.legal_roles.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file).expect("serializes"))?;
        Ok(())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct SchemaFile {
    types: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    roles: Option<Vec<String>>,
    legal_roles: BTreeMap<String, Vec<String>>,
}

/// Inclusive token span, 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One gold or predicted event: a type, a trigger span and role-tagged arguments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    #[serde(rename = "type")]
    pub event_type: String,
    pub trigger: Span,
    pub arguments: Vec<(String, Span)>,
}

/// A tokenized sentence with its gold events.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedSentence {
    pub id: String,
    pub tokens: Vec<String>,
    pub events: Vec<EventRecord>,
}

impl AnnotatedSentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, schema: &EventSchema) -> Result<()> {
        let fail = |message: String| Error::Validation { sentence: self.id.clone(), message };
        if self.tokens.is_empty() {
            return Err(fail("sentence has no tokens".into()));
        }
        let n = self.tokens.len();
        let mut seen: HashSet<(String, Span, Vec<(String, Span)>)> = HashSet::new();
        for event in &self.events {
            if schema.type_index(&event.event_type).is_none() {
                return Err(fail(format!("unknown event type `{}`", event.event_type)));
            }
            let check_span = |span: &Span, what: &str| -> Result<()> {
                if span.start > span.end || span.end >= n {
                    return Err(Error::Validation {
                        sentence: self.id.clone(),
                        message: format!(
                            "{what} span [{}, {}] out of bounds for length {n}",
                            span.start, span.end
                        ),
                    });
                }
                Ok(())
            };
            check_span(&event.trigger, "trigger")?;
            let mut arg_seen = HashSet::new();
            for (role, span) in &event.arguments {
                check_span(span, "argument")?;
                if !schema.is_legal(&event.event_type, role) {
                    return Err(fail(format!(
                        "role `{role}` is not legal for type `{}`",
                        event.event_type
                    )));
                }
                if !arg_seen.insert((role.clone(), *span)) {
                    return Err(fail(format!(
                        "duplicate (role `{role}`, span [{}, {}]) pair",
                        span.start, span.end
                    )));
                }
            }
            let key = (
                event.event_type.clone(),
                event.trigger,
                event.arguments.clone(),
            );
            if !seen.insert(key) {
                return Err(fail("duplicate gold event".into()));
            }
        }
        Ok(())
    }
}

/// The three overlap patterns of gold annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OverlapPattern {
    /// One span triggers events of at least two distinct types.
    P1,
    /// One span serves as an argument in at least two events.
    P2,
    /// One span holds at least two roles within a single event.
    P3,
}

/// Classify which overlap patterns a sentence's gold events exhibit.
/// An empty set means the sentence is "normal".
pub fn classify_overlap(sentence: &AnnotatedSentence) -> BTreeSet<OverlapPattern> {
    let mut patterns = BTreeSet::new();

    let mut trigger_types: HashMap<Span, HashSet<&str>> = HashMap::new();
    for event in &sentence.events {
        trigger_types
            .entry(event.trigger)
            .or_default()
            .insert(event.event_type.as_str());
    }
    if trigger_types.values().any(|types| types.len() >= 2) {
        patterns.insert(OverlapPattern::P1);
    }

    let mut arg_event_count: HashMap<Span, usize> = HashMap::new();
    for event in &sentence.events {
        let spans: HashSet<Span> = event.arguments.iter().map(|(_, s)| *s).collect();
        for span in spans {
            *arg_event_count.entry(span).or_default() += 1;
        }
    }
    if arg_event_count.values().any(|&c| c >= 2) {
        patterns.insert(OverlapPattern::P2);
    }

    for event in &sentence.events {
        let mut roles_per_span: HashMap<Span, HashSet<&str>> = HashMap::new();
        for (role, span) in &event.arguments {
            roles_per_span.entry(*span).or_default().insert(role.as_str());
        }
        if roles_per_span.values().any(|roles| roles.len() >= 2) {
            patterns.insert(OverlapPattern::P3);
            break;
        }
    }

    patterns
}

/// A validated collection of sentences plus the schema they conform to.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<AnnotatedSentence>,
    pub schema: EventSchema,
}

impl Corpus {
    pub fn new(sentences: Vec<AnnotatedSentence>, schema: EventSchema) -> Result<Self> {
        let mut ids = HashSet::new();
        for s in &sentences {
            s.validate(&schema)?;
            if !ids.insert(s.id.clone()) {
                return Err(Error::Validation {
                    sentence: s.id.clone(),
                    message: "duplicate sentence id".into(),
                });
            }
        }
        Ok(Corpus { sentences, schema })
    }

    pub fn event_count(&self) -> usize {
        self.sentences.iter().map(|s| s.events.len()).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct SentenceLine {
    id: String,
    tokens: Vec<String>,
    events: Vec<EventLine>,
}

#[derive(Serialize, Deserialize)]
struct EventLine {
    #[serde(rename = "type")]
    event_type: String,
    trigger: TriggerLine,
    args: Vec<ArgLine>,
}

#[derive(Serialize, Deserialize)]
struct TriggerLine {
    span: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct ArgLine {
    role: String,
    span: [usize; 2],
}

fn sentence_from_line(line: SentenceLine) -> AnnotatedSentence {
    AnnotatedSentence {
        id: line.id,
        tokens: line.tokens,
        events: line
            .events
            .into_iter()
            .map(|e| EventRecord {
                event_type: e.event_type,
                trigger: Span::new(e.trigger.span[0], e.trigger.span[1]),
                arguments: e
                    .args
                    .into_iter()
                    .map(|a| (a.role, Span::new(a.span[0], a.span[1])))
                    .collect(),
            })
            .collect(),
    }
}

fn sentence_to_line(sentence: &AnnotatedSentence) -> SentenceLine {
    SentenceLine {
        id: sentence.id.clone(),
        tokens: sentence.tokens.clone(),
        events: sentence
            .events
            .iter()
            .map(|e| EventLine {
                event_type: e.event_type.clone(),
                trigger: TriggerLine { span: [e.trigger.start, e.trigger.end] },
                args: e
                    .arguments
                    .iter()
                    .map(|(role, span)| ArgLine {
                        role: role.clone(),
                        span: [span.start, span.end],
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Load a corpus from a file with one JSON record per line, validating every
/// record against the schema.
pub fn load_corpus(path: &Path, schema: &EventSchema) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut sentences = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SentenceLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        sentences.push(sentence_from_line(parsed));
    }
    Corpus::new(sentences, schema.clone())
}

/// Write a corpus in the line-per-record format read by [`load_corpus`].
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for sentence in &corpus.sentences {
        let line = serde_json::to_string(&sentence_to_line(sentence)).expect("serializes");
        writeln!(file, "{line}")?;
    }
    Ok(())
}

/// Deterministically split a corpus into train/validation/test parts.
///
/// Sizes use floored counts; the remainder goes to the splits with the
/// largest fractional parts (ties broken in split order).
pub fn split_corpus(
    corpus: &Corpus,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Corpus, Corpus, Corpus)> {
    let parts = [ratios.0, ratios.1, ratios.2];
    if parts.iter().any(|&r| r <= 0.0) {
        return Err(Error::Argument("split ratios must be positive".into()));
    }
    let sum: f64 = parts.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("split ratios must sum to 1, got {sum}")));
    }

    let n = corpus.sentences.len();
    let exact: Vec<f64> = parts.iter().map(|r| r * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let mut remainder = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if remainder == 0 {
            break;
        }
        sizes[i] += 1;
        remainder -= 1;
    }

    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let take = |range: std::ops::Range<usize>| -> Vec<AnnotatedSentence> {
        indices[range].iter().map(|&i| corpus.sentences[i].clone()).collect()
    };
    let train = take(0..sizes[0]);
    let val = take(sizes[0]..sizes[0] + sizes[1]);
    let test = take(sizes[0] + sizes[1]..n);

    Ok((
        Corpus { sentences: train, schema: corpus.schema.clone() },
        Corpus { sentences: val, schema: corpus.schema.clone() },
        Corpus { sentences: test, schema: corpus.schema.clone() },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_schema() -> EventSchema {
        let mut legal = BTreeMap::new();
        legal.insert("Investment".to_string(), vec!["subject".into(), "object".into()]);
        legal.insert(
            "ShareTransfer".to_string(),
            vec!["subject".into(), "object".into(), "target".into()],
        );
        EventSchema::new(
            vec!["Investment".into(), "ShareTransfer".into()],
            vec!["subject".into(), "object".into(), "target".into()],
            legal,
        )
        .unwrap()
    }

    fn sentence(id: &str, n: usize, events: Vec<EventRecord>) -> AnnotatedSentence {
        AnnotatedSentence {
            id: id.into(),
            tokens: (0..n).map(|i| format!("w{i}")).collect(),
            events,
        }
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

    #[test]
    fn schema_rejects_illegal_role() {
        let schema = toy_schema();
        let s = sentence("s1", 5, vec![event("Investment", (0, 0), &[("target", (1, 1))])]);
        assert!(matches!(s.validate(&schema), Err(Error::Validation { .. })));
    }

    #[test]
    fn schema_rejects_out_of_bounds_span() {
        let schema = toy_schema();
        let s = sentence("s1", 3, vec![event("Investment", (0, 3), &[])]);
        assert!(s.validate(&schema).is_err());
    }

    #[test]
    fn duplicate_events_rejected() {
        let schema = toy_schema();
        let e = event("Investment", (0, 0), &[("subject", (1, 1))]);
        let s = sentence("s1", 5, vec![e.clone(), e]);
        assert!(s.validate(&schema).is_err());
    }

    #[test]
    fn overlap_p1_p2() {
        // One span triggers both types; one span is an argument in both events.
        let s = sentence(
            "s1",
            8,
            vec![
                event("Investment", (2, 2), &[("object", (4, 5))]),
                event("ShareTransfer", (2, 2), &[("subject", (4, 5))]),
            ],
        );
        let got = classify_overlap(&s);
        let want: BTreeSet<_> = [OverlapPattern::P1, OverlapPattern::P2].into_iter().collect();
        assert_eq!(got, want);
    }

    #[test]
    fn overlap_p3() {
        let s = sentence(
            "s1",
            8,
            vec![event(
                "ShareTransfer",
                (0, 0),
                &[("subject", (3, 4)), ("target", (3, 4))],
            )],
        );
        let got = classify_overlap(&s);
        assert_eq!(got, [OverlapPattern::P3].into_iter().collect());
    }

    #[test]
    fn overlap_empty_for_disjoint_event() {
        let s = sentence("s1", 8, vec![event("Investment", (0, 0), &[("subject", (2, 3))])]);
        assert!(classify_overlap(&s).is_empty());
    }

    #[test]
    fn same_type_shared_trigger_is_not_p1() {
        let s = sentence(
            "s1",
            8,
            vec![
                event("Investment", (2, 2), &[("object", (4, 4))]),
                event("Investment", (2, 2), &[("subject", (5, 5))]),
            ],
        );
        assert!(!classify_overlap(&s).contains(&OverlapPattern::P1));
    }

    fn corpus_of(n: usize) -> Corpus {
        let schema = toy_schema();
        let sentences = (0..n).map(|i| sentence(&format!("s{i}"), 5, vec![])).collect();
        Corpus::new(sentences, schema).unwrap()
    }

    #[test]
    fn split_exact_division() {
        let corpus = corpus_of(10);
        let (tr, va, te) = split_corpus(&corpus, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((tr.sentences.len(), va.sentences.len(), te.sentences.len()), (8, 1, 1));
    }

    #[test]
    fn split_remainder_rule() {
        // floors (7, 0, 0), fractional parts (0.2, 0.9, 0.9): remainder of 2
        // goes to validation and test.
        let corpus = corpus_of(9);
        let (tr, va, te) = split_corpus(&corpus, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((tr.sentences.len(), va.sentences.len(), te.sentences.len()), (7, 1, 1));
    }

    #[test]
    fn split_deterministic_and_partitioning() {
        let corpus = corpus_of(23);
        let a = split_corpus(&corpus, (0.8, 0.1, 0.1), 42).unwrap();
        let b = split_corpus(&corpus, (0.8, 0.1, 0.1), 42).unwrap();
        assert_eq!(a.0.sentences, b.0.sentences);
        assert_eq!(a.1.sentences, b.1.sentences);
        assert_eq!(a.2.sentences, b.2.sentences);

        let mut ids: Vec<&str> = a
            .0
            .sentences
            .iter()
            .chain(&a.1.sentences)
            .chain(&a.2.sentences)
            .map(|s| s.id.as_str())
            .collect();
        ids.sort();
        let mut want: Vec<String> = (0..23).map(|i| format!("s{i}")).collect();
        want.sort();
        assert_eq!(ids, want.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let corpus = corpus_of(4);
        assert!(split_corpus(&corpus, (0.5, 0.2, 0.2), 1).is_err());
        assert!(split_corpus(&corpus, (1.2, -0.1, -0.1), 1).is_err());
    }

    #[test]
    fn corpus_roundtrip() {
        let schema = toy_schema();
        let sentences = vec![
            sentence("a", 6, vec![event("Investment", (1, 2), &[("subject", (3, 4))])]),
            sentence("b", 4, vec![]),
        ];
        let corpus = Corpus::new(sentences, schema.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        save_corpus(&corpus, &path).unwrap();
        let loaded = load_corpus(&path, &schema).unwrap();
        assert_eq!(loaded, corpus);
    }

    #[test]
    fn empty_file_loads_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let corpus = load_corpus(&path, &toy_schema()).unwrap();
        assert!(corpus.sentences.is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"id\": \"a\", \"tokens\": [\"x\"], \"events\": []}\nnot json\n")
            .unwrap();
        match load_corpus(&path, &toy_schema()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
