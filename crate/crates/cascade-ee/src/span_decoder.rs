//! Start/end probability vectors -> spans, by the nearest-following-end rule.

use crate::error::{Error, Result};
use crate::schema::Span;

/// Per-token boundary probabilities plus the thresholds that binarize them.
#[derive(Debug, Clone)]
pub struct SpanTagging {
    pub start_probs: Vec<f64>,
    pub end_probs: Vec<f64>,
    pub start_threshold: f64,
    pub end_threshold: f64,
}

impl SpanTagging {
    pub fn new(
        start_probs: Vec<f64>,
        end_probs: Vec<f64>,
        start_threshold: f64,
        end_threshold: f64,
    ) -> Result<Self> {
        if start_probs.len() != end_probs.len() {
            return Err(Error::Shape(format!(
                "start/end probability lengths differ: {} vs {}",
                start_probs.len(),
                end_probs.len()
            )));
        }
        for t in [start_threshold, end_threshold] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Argument(format!("threshold {t} outside [0, 1]")));
            }
        }
        Ok(SpanTagging { start_probs, end_probs, start_threshold, end_threshold })
    }
}

/// Decode spans: every token with start probability strictly above the start
/// threshold opens a span, closed at the nearest end-tagged position at or
/// after it. Starts without a following end are dropped; one end may close
/// several starts.
pub fn assemble_spans(tagging: &SpanTagging) -> Vec<Span> {
    let starts: Vec<usize> = tagging
        .start_probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > tagging.start_threshold)
        .map(|(i, _)| i)
        .collect();
    let ends: Vec<bool> = tagging.end_probs.iter().map(|&p| p > tagging.end_threshold).collect();

    let mut spans = Vec::new();
    for &start in &starts {
        if let Some(end) = (start..ends.len()).find(|&j| ends[j]) {
            spans.push(Span::new(start, end));
        }
    }
    spans.sort();
    spans
}

/// Decode directly from boolean start/end sets (used for label-vector checks).
pub fn assemble_spans_binary(starts: &[bool], ends: &[bool]) -> Vec<Span> {
    let tagging = SpanTagging {
        start_probs: starts.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        end_probs: ends.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        start_threshold: 0.5,
        end_threshold: 0.5,
    };
    assemble_spans(&tagging)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tag(starts: &[usize], ends: &[usize], n: usize) -> SpanTagging {
        let mut sp = vec![0.0; n];
        let mut ep = vec![0.0; n];
        for &i in starts {
            sp[i] = 1.0;
        }
        for &j in ends {
            ep[j] = 1.0;
        }
        SpanTagging::new(sp, ep, 0.5, 0.5).unwrap()
    }

    /// Independent brute-force oracle: for each start, scan right for the
    /// first end.
    pub(crate) fn oracle(starts: &[bool], ends: &[bool]) -> Vec<Span> {
        let n = starts.len();
        let mut out = Vec::new();
        for i in 0..n {
            if !starts[i] {
                continue;
            }
            for j in i..n {
                if ends[j] {
                    out.push(Span::new(i, j));
                    break;
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn direct_rule() {
        assert_eq!(assemble_spans(&tag(&[1], &[2], 5)), vec![Span::new(1, 2)]);
    }

    #[test]
    fn unmatched_start_dropped() {
        assert_eq!(assemble_spans(&tag(&[4], &[2], 5)), vec![]);
    }

    #[test]
    fn shared_end_allows_overlap() {
        assert_eq!(
            assemble_spans(&tag(&[1, 2], &[3], 5)),
            vec![Span::new(1, 3), Span::new(2, 3)]
        );
    }

    #[test]
    fn single_token_span() {
        assert_eq!(assemble_spans(&tag(&[2], &[2], 5)), vec![Span::new(2, 2)]);
    }

    #[test]
    fn exhaustive_small_patterns_match_oracle() {
        for n in 1..=6usize {
            for s_bits in 0..(1u32 << n) {
                for e_bits in 0..(1u32 << n) {
                    let starts: Vec<bool> = (0..n).map(|i| s_bits >> i & 1 == 1).collect();
                    let ends: Vec<bool> = (0..n).map(|i| e_bits >> i & 1 == 1).collect();
                    assert_eq!(assemble_spans_binary(&starts, &ends), oracle(&starts, &ends));
                }
            }
        }
    }

    #[test]
    fn threshold_monotonicity_in_span_count() {
        // Raising a threshold can re-pair a start with a later end, so span
        // identity is not monotone; the number of decoded spans is.
        let sp: Vec<f64> = vec![0.9, 0.3, 0.7, 0.1, 0.6];
        let ep: Vec<f64> = vec![0.2, 0.8, 0.4, 0.95, 0.5];
        let at = |ts: f64, te: f64| {
            assemble_spans(&SpanTagging::new(sp.clone(), ep.clone(), ts, te).unwrap())
        };
        let loose = at(0.25, 0.25);
        for (ts, te) in [(0.5, 0.25), (0.25, 0.5), (0.65, 0.75)] {
            assert!(at(ts, te).len() <= loose.len());
        }
        // Raising the start threshold alone only removes spans.
        let tight = at(0.65, 0.25);
        for span in &tight {
            assert!(loose.contains(span), "raising the start threshold added {span:?}");
        }
    }

    proptest! {
        #[test]
        fn random_patterns_match_oracle(
            starts in proptest::collection::vec(any::<bool>(), 1..40),
            ends_seed in proptest::collection::vec(any::<bool>(), 1..40),
        ) {
            let n = starts.len().min(ends_seed.len());
            let starts = &starts[..n];
            let ends = &ends_seed[..n];
            prop_assert_eq!(assemble_spans_binary(starts, ends), oracle(starts, ends));
        }

        #[test]
        fn emitted_spans_well_formed(
            starts in proptest::collection::vec(any::<bool>(), 1..30),
            ends in proptest::collection::vec(any::<bool>(), 1..30),
        ) {
            let n = starts.len().min(ends.len());
            let spans = assemble_spans_binary(&starts[..n], &ends[..n]);
            for s in spans {
                prop_assert!(s.start <= s.end);
                prop_assert!(starts[s.start]);
                prop_assert!(ends[s.end]);
            }
        }
    }
}
