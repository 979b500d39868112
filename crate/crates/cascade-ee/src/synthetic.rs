//! Deterministic synthetic corpora with lexical cues, covering all three
//! overlap patterns in controlled proportions.
//!
//! Every content lexeme encodes its annotation: `trig{k}…` tokens trigger
//! type k, `ambig{a}x{b}` tokens trigger both types a and b, `arg{r}…`
//! tokens fill role r, and `dual{k}` tokens fill the first two legal roles
//! of type k at once. The mapping is exact, so a model that learns the
//! lexicon can extract perfectly.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::schema::{AnnotatedSentence, Corpus, EventRecord, EventSchema, Span};

pub const FILLER_COUNT: usize = 30;
/// Lexical variants per (role) argument value and per type trigger.
const ARG_VARIANTS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_sentences: usize,
    pub n_types: usize,
    pub n_roles: usize,
    /// Legal roles per type, assigned by rotation: type k gets roles
    /// k..k+roles_per_type (mod n_roles).
    pub roles_per_type: usize,
    pub p1_fraction: f64,
    pub p2_fraction: f64,
    pub p3_fraction: f64,
    /// Fraction of sentences with no events at all.
    pub negative_fraction: f64,
    /// Maximum filler tokens inserted around each content token.
    pub max_fillers: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_sentences: 1000,
            n_types: 4,
            n_roles: 6,
            roles_per_type: 3,
            p1_fraction: 0.15,
            p2_fraction: 0.15,
            p3_fraction: 0.15,
            negative_fraction: 0.10,
            max_fillers: 2,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sentences == 0 {
            return Err(Error::Config("need at least one sentence".into()));
        }
        if self.n_types < 2 {
            return Err(Error::Config("overlap patterns need at least two types".into()));
        }
        if self.roles_per_type < 2 {
            return Err(Error::Config("pattern 3 needs at least two roles per type".into()));
        }
        if self.n_roles < self.roles_per_type {
            return Err(Error::Config(format!(
                "{} roles cannot host {} roles per type",
                self.n_roles, self.roles_per_type
            )));
        }
        let fractions =
            [self.p1_fraction, self.p2_fraction, self.p3_fraction, self.negative_fraction];
        if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
            return Err(Error::Config("fractions must lie in [0, 1]".into()));
        }
        if fractions.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(Error::Config("pattern fractions sum to more than 1".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<EventSchema> {
        self.validate()?;
        let types: Vec<String> = (0..self.n_types).map(|k| format!("evt{k}")).collect();
        let roles: Vec<String> = (0..self.n_roles).map(|r| format!("role{r}")).collect();
        let mut legal: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for k in 0..self.n_types {
            legal.insert(
                types[k].clone(),
                (0..self.roles_per_type)
                    .map(|j| roles[(k + j) % self.n_roles].clone())
                    .collect(),
            );
        }
        EventSchema::new(types, roles, legal)
    }

    /// Role indices legal for type k, in rotation order.
    fn legal_role_indices(&self, k: usize) -> Vec<usize> {
        (0..self.roles_per_type).map(|j| (k + j) % self.n_roles).collect()
    }
}

struct SentenceBuilder<'a> {
    cfg: &'a GeneratorConfig,
    tokens: Vec<String>,
}

impl<'a> SentenceBuilder<'a> {
    fn new(cfg: &'a GeneratorConfig) -> Self {
        SentenceBuilder { cfg, tokens: Vec::new() }
    }

    fn fillers(&mut self, rng: &mut ChaCha8Rng) {
        let count = rng.gen_range(0..=self.cfg.max_fillers);
        for _ in 0..count {
            let j = rng.gen_range(0..FILLER_COUNT);
            self.tokens.push(format!("w{j}"));
        }
    }

    /// Push a single-token trigger lexeme for type k. Returns its span.
    fn trigger(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Span {
        let variant = if rng.gen_bool(0.5) { "a" } else { "b" };
        self.tokens.push(format!("trig{k}{variant}"));
        Span::new(self.tokens.len() - 1, self.tokens.len() - 1)
    }

    /// Push an ambiguous trigger lexeme for the type pair (a, b).
    fn ambiguous_trigger(&mut self, a: usize, b: usize) -> Span {
        self.tokens.push(format!("ambig{a}x{b}"));
        Span::new(self.tokens.len() - 1, self.tokens.len() - 1)
    }

    /// Push an argument for role r: one token, or two with a role-marked
    /// continuation so multi-token spans occur.
    fn argument(&mut self, r: usize, rng: &mut ChaCha8Rng) -> Span {
        let variant = rng.gen_range(0..ARG_VARIANTS);
        let start = self.tokens.len();
        self.tokens.push(format!("arg{r}v{variant}"));
        if rng.gen_bool(0.5) {
            self.tokens.push(format!("argcont{r}"));
        }
        Span::new(start, self.tokens.len() - 1)
    }

    /// Push a dual-role argument lexeme bound to type k.
    fn dual_argument(&mut self, k: usize) -> Span {
        self.tokens.push(format!("dual{k}"));
        Span::new(self.tokens.len() - 1, self.tokens.len() - 1)
    }
}

fn role_name(r: usize) -> String {
    format!("role{r}")
}

fn type_name(k: usize) -> String {
    format!("evt{k}")
}

fn normal_sentence(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<EventRecord>) {
    let k = rng.gen_range(0..cfg.n_types);
    let legal = cfg.legal_role_indices(k);
    let max_args = legal.len().min(2);
    let n_args = rng.gen_range(1..=max_args);
    let mut roles = legal;
    roles.shuffle(rng);
    roles.truncate(n_args);

    let mut b = SentenceBuilder::new(cfg);
    b.fillers(rng);
    let trigger = b.trigger(k, rng);
    let mut arguments = Vec::new();
    for r in roles {
        b.fillers(rng);
        arguments.push((role_name(r), b.argument(r, rng)));
    }
    b.fillers(rng);
    (b.tokens, vec![EventRecord { event_type: type_name(k), trigger, arguments }])
}

/// One span triggers two events of distinct types. Each event's argument
/// uses a role illegal for the other type, so attribution stays a pure
/// function of the lexicon.
fn p1_sentence(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<EventRecord>) {
    let a = rng.gen_range(0..cfg.n_types - 1);
    let b_ty = a + 1;

    let mut b = SentenceBuilder::new(cfg);
    b.fillers(rng);
    let trigger = b.ambiguous_trigger(a, b_ty);
    b.fillers(rng);
    // First legal role of a precedes b's rotation window; last legal role
    // of b follows a's window.
    let ra = cfg.legal_role_indices(a)[0];
    let arg_a = b.argument(ra, rng);
    b.fillers(rng);
    let rb = *cfg.legal_role_indices(b_ty).last().expect("roles_per_type >= 2");
    let arg_b = b.argument(rb, rng);
    b.fillers(rng);

    let events = vec![
        EventRecord {
            event_type: type_name(a),
            trigger,
            arguments: vec![(role_name(ra), arg_a)],
        },
        EventRecord {
            event_type: type_name(b_ty),
            trigger,
            arguments: vec![(role_name(rb), arg_b)],
        },
    ];
    (b.tokens, events)
}

/// Two events of distinct types share one argument span in a role legal
/// for both (the rotation guarantees an intersection).
fn p2_sentence(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<EventRecord>) {
    // Consecutive pairs share role a+1 by the rotation.
    let a = rng.gen_range(0..cfg.n_types - 1);
    let b_ty = a + 1;
    let shared_role = (a + 1) % cfg.n_roles;

    let mut b = SentenceBuilder::new(cfg);
    b.fillers(rng);
    let trig_a = b.trigger(a, rng);
    b.fillers(rng);
    let shared = b.argument(shared_role, rng);
    b.fillers(rng);
    let trig_b = b.trigger(b_ty, rng);
    b.fillers(rng);

    let events = vec![
        EventRecord {
            event_type: type_name(a),
            trigger: trig_a,
            arguments: vec![(role_name(shared_role), shared)],
        },
        EventRecord {
            event_type: type_name(b_ty),
            trigger: trig_b,
            arguments: vec![(role_name(shared_role), shared)],
        },
    ];
    (b.tokens, events)
}

/// One event whose argument span holds the type's first two legal roles.
fn p3_sentence(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<EventRecord>) {
    let k = rng.gen_range(0..cfg.n_types);
    let legal = cfg.legal_role_indices(k);

    let mut b = SentenceBuilder::new(cfg);
    b.fillers(rng);
    let trigger = b.trigger(k, rng);
    b.fillers(rng);
    let dual = b.dual_argument(k);
    b.fillers(rng);

    let events = vec![EventRecord {
        event_type: type_name(k),
        trigger,
        arguments: vec![(role_name(legal[0]), dual), (role_name(legal[1]), dual)],
    }];
    (b.tokens, events)
}

fn negative_sentence(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<EventRecord>) {
    let mut b = SentenceBuilder::new(cfg);
    // At least one token: sentences cannot be empty.
    let count = rng.gen_range(1..=(2 * cfg.max_fillers).max(1));
    for _ in 0..count {
        let j = rng.gen_range(0..FILLER_COUNT);
        b.tokens.push(format!("w{j}"));
    }
    (b.tokens, vec![])
}

/// Generate a corpus with exact pattern counts: floor(fraction * n) for
/// P1/P2/P3 and negatives, the remainder normal single-event sentences.
/// Identical configs generate identical corpora.
pub fn generate(cfg: &GeneratorConfig) -> Result<Corpus> {
    let schema = cfg.schema()?;
    let n = cfg.n_sentences;
    let n_p1 = (cfg.p1_fraction * n as f64).floor() as usize;
    let n_p2 = (cfg.p2_fraction * n as f64).floor() as usize;
    let n_p3 = (cfg.p3_fraction * n as f64).floor() as usize;
    let n_neg = (cfg.negative_fraction * n as f64).floor() as usize;
    let reserved = n_p1 + n_p2 + n_p3 + n_neg;
    if reserved > n {
        return Err(Error::Config("pattern counts exceed the sentence budget".into()));
    }

    let mut kinds = Vec::with_capacity(n);
    for (kind, count) in [(1u8, n_p1), (2, n_p2), (3, n_p3), (4, n_neg), (0, n - reserved)] {
        kinds.extend(std::iter::repeat(kind).take(count));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    kinds.shuffle(&mut rng);

    let mut sentences = Vec::with_capacity(n);
    for (i, kind) in kinds.into_iter().enumerate() {
        let (tokens, events) = match kind {
            1 => p1_sentence(cfg, &mut rng),
            2 => p2_sentence(cfg, &mut rng),
            3 => p3_sentence(cfg, &mut rng),
            4 => negative_sentence(cfg, &mut rng),
            _ => normal_sentence(cfg, &mut rng),
        };
        sentences.push(AnnotatedSentence { id: format!("syn{i:05}"), tokens, events });
    }
    Corpus::new(sentences, schema)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{classify_overlap, OverlapPattern};

    #[test]
    fn exact_pattern_counts() {
        let cfg = GeneratorConfig { n_sentences: 200, seed: 5, ..GeneratorConfig::default() };
        let corpus = generate(&cfg).unwrap();
        assert_eq!(corpus.sentences.len(), 200);
        let mut counts = BTreeMap::new();
        for s in &corpus.sentences {
            let patterns = classify_overlap(s);
            let key = if s.events.is_empty() {
                "neg"
            } else if patterns.contains(&OverlapPattern::P1) {
                "p1"
            } else if patterns.contains(&OverlapPattern::P2) {
                "p2"
            } else if patterns.contains(&OverlapPattern::P3) {
                "p3"
            } else {
                "normal"
            };
            *counts.entry(key).or_insert(0usize) += 1;
        }
        assert_eq!(counts["p1"], 30);
        assert_eq!(counts["p2"], 30);
        assert_eq!(counts["p3"], 30);
        assert_eq!(counts["neg"], 20);
        assert_eq!(counts["normal"], 90);
    }

    #[test]
    fn patterns_are_pure() {
        // Each overlapped sentence exhibits exactly the intended pattern.
        let cfg = GeneratorConfig { n_sentences: 300, seed: 1, ..GeneratorConfig::default() };
        let corpus = generate(&cfg).unwrap();
        for s in &corpus.sentences {
            let patterns = classify_overlap(s);
            assert!(patterns.len() <= 1, "mixed patterns in {}: {patterns:?}", s.id);
        }
    }

    #[test]
    fn deterministic_across_calls() {
        let cfg = GeneratorConfig { n_sentences: 50, seed: 9, ..GeneratorConfig::default() };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate(&GeneratorConfig { n_sentences: 50, seed: 1, ..GeneratorConfig::default() })
            .unwrap();
        let b = generate(&GeneratorConfig { n_sentences: 50, seed: 2, ..GeneratorConfig::default() })
            .unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn lexical_cues_match_annotations() {
        let cfg = GeneratorConfig { n_sentences: 300, seed: 3, ..GeneratorConfig::default() };
        let corpus = generate(&cfg).unwrap();
        for s in &corpus.sentences {
            for e in &s.events {
                let trigger_token = &s.tokens[e.trigger.start];
                assert!(
                    trigger_token.starts_with("trig") || trigger_token.starts_with("ambig"),
                    "trigger span points at `{trigger_token}`"
                );
                for (role, span) in &e.arguments {
                    let token = &s.tokens[span.start];
                    if let Some(rest) = token.strip_prefix("arg") {
                        let r: String =
                            rest.chars().take_while(|c| c.is_ascii_digit()).collect();
                        assert_eq!(role, &format!("role{r}"));
                    } else {
                        assert!(token.starts_with("dual"), "argument span at `{token}`");
                    }
                }
            }
        }
    }

    #[test]
    fn infeasible_configs_error() {
        assert!(generate(&GeneratorConfig { n_types: 1, ..GeneratorConfig::default() }).is_err());
        assert!(
            generate(&GeneratorConfig { roles_per_type: 1, ..GeneratorConfig::default() }).is_err()
        );
        assert!(generate(&GeneratorConfig {
            n_roles: 2,
            roles_per_type: 3,
            ..GeneratorConfig::default()
        })
        .is_err());
        assert!(generate(&GeneratorConfig {
            p1_fraction: 0.6,
            p2_fraction: 0.6,
            ..GeneratorConfig::default()
        })
        .is_err());
    }

    #[test]
    fn corpus_is_valid_and_roundtrips() {
        let cfg = GeneratorConfig { n_sentences: 40, seed: 7, ..GeneratorConfig::default() };
        let corpus = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        crate::schema::save_corpus(&corpus, &path).unwrap();
        let loaded = crate::schema::load_corpus(&path, &corpus.schema).unwrap();
        assert_eq!(loaded, corpus);
    }
}
