//! Both directions of the ultrametric inequality for the shared-prefix metric
//! `d(s, s′) = −log2 P(lcp(s, s′))`, over every triple of short sequences.
//!
//! `lcp(s, s″) ≥ min(lcp(s, s′), lcp(s′, s″))` and `d` is non-decreasing in
//! the shared prefix, so `d(s, s″) ≥ min(d(s, s′), d(s′, s″))` always holds.
//! The upper form `d(s, s″) ≤ max(...)` does not, and is only counted.

use crate::enumerate::all_sequences;
use crate::error::{Error, Result};
use crate::index::bits;
use crate::model::{common_prefix_len, Model, Token};
use crate::report::Table;

/// Largest triple count the check will enumerate.
pub const MAX_TRIPLES: u64 = 50_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub max_len: usize,
    pub sequences: usize,
    pub triples: u64,
    /// Triples with `d(s, s″) < min(d(s, s′), d(s′, s″))`; expected 0.
    pub lower_violations: u64,
    /// Triples with `d(s, s″) > max(d(s, s′), d(s′, s″))`.
    pub upper_violations: u64,
    pub upper_example: Option<[Vec<Token>; 3]>,
}

impl MetricReport {
    pub fn lower_holds(&self) -> bool {
        self.lower_violations == 0
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(["inequality", "triples", "violations"]);
        t.push([
            "d(s,s'') >= min".to_string(),
            self.triples.to_string(),
            self.lower_violations.to_string(),
        ]);
        t.push([
            "d(s,s'') <= max".to_string(),
            self.triples.to_string(),
            self.upper_violations.to_string(),
        ]);
        t
    }
}

/// Checks every ordered triple of sequences of length `0..=max_len`.
pub fn verify_metric_inequalities(model: &Model, max_len: usize) -> Result<MetricReport> {
    let v = model.vocab_size();
    let seqs: Vec<Vec<Token>> = (0..=max_len).flat_map(|l| all_sequences(v, l)).collect();
    let n = seqs.len() as u64;
    if n.saturating_pow(3) > MAX_TRIPLES {
        return Err(Error::BudgetExceeded {
            needed: n.saturating_pow(3),
            budget: MAX_TRIPLES,
        });
    }
    // Every prefix of an enumerated sequence is enumerated too, so prefix
    // probabilities are looked up rather than recomputed per pair.
    let probs: std::collections::BTreeMap<&[Token], f64> = seqs
        .iter()
        .map(|s| Ok((s.as_slice(), model.sequence_prob(s)?)))
        .collect::<Result<_>>()?;
    let d = |a: &[Token], b: &[Token]| bits(probs[&a[..common_prefix_len(a, b)]]);
    let mut report = MetricReport {
        max_len,
        sequences: seqs.len(),
        triples: 0,
        lower_violations: 0,
        upper_violations: 0,
        upper_example: None,
    };
    for a in &seqs {
        for b in &seqs {
            let ab = d(a, b);
            for c in &seqs {
                let (bc, ac) = (d(b, c), d(a, c));
                report.triples += 1;
                report.lower_violations += u64::from(ac < ab.min(bc));
                if ac > ab.max(bc) {
                    report.upper_violations += 1;
                    report
                        .upper_example
                        .get_or_insert_with(|| [a.clone(), b.clone(), c.clone()]);
                }
            }
        }
    }
    Ok(report)
}
