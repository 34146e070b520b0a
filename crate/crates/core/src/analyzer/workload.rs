//! Synthetic multi-session workloads with a controlled clustered fraction and
//! tail ratio, plus the plain-text workload file format.
//!
//! `round(f·m)` sessions share one sampled prefix of length `n − round(r·n)`
//! and then continue independently. Let `c` be the most probable of them.
//! Every other group member is forced to differ from `c` at its first tail
//! token and to stay strictly less probable than `c`, so `c` is the cluster
//! centroid and every member diverges from it exactly where the tail starts.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::index::{bits, SessionId};
use crate::model::{common_prefix_len, DecodeState, Model, NextTokenDist, Token, TokenSeq};

/// How many times a conflicting group tail is redrawn before the
/// deterministic least-probable tail is used instead.
const MAX_REDRAWS: usize = 64;

/// Margin below the shared-prefix information used as the suggested
/// clustering threshold.
pub const THRESHOLD_MARGIN_BITS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    /// `m`.
    pub sessions: usize,
    /// `n`, the length of every session.
    pub length: usize,
    /// `f ∈ [0, 1]`.
    pub cluster_fraction: f64,
    /// `ℓ̄/n ∈ [0, 1]`.
    pub tail_ratio: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            sessions: 100,
            length: 8,
            cluster_fraction: 0.5,
            tail_ratio: 0.25,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self, model: &Model) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.sessions == 0 {
            return bad("workload needs at least one session".into());
        }
        if self.length == 0 || self.length > model.config().max_context {
            return bad(format!(
                "session length {} outside 1..={}",
                self.length,
                model.config().max_context
            ));
        }
        if !(0.0..=1.0).contains(&self.cluster_fraction) {
            return bad(format!(
                "cluster fraction {} outside [0, 1]",
                self.cluster_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.tail_ratio) {
            return bad(format!("tail ratio {} outside [0, 1]", self.tail_ratio));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        (self.cluster_fraction * self.sessions as f64).round() as usize
    }

    pub fn tail_len(&self) -> usize {
        (self.tail_ratio * self.length as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub sessions: BTreeMap<SessionId, TokenSeq>,
    /// Sessions built on the shared prefix; empty when fewer than two.
    pub group: Vec<SessionId>,
    /// The most probable group session.
    pub centroid: Option<SessionId>,
    pub shared_prefix_len: usize,
    /// `−log2 P(shared prefix)`.
    pub shared_information: f64,
    /// Group sessions over all sessions.
    pub achieved_fraction: f64,
    /// Mean `(n − divergence) / n` over non-centroid group members.
    pub achieved_tail_ratio: f64,
    /// A shared-information threshold that clusters exactly the group.
    pub suggested_threshold: f64,
}

fn sample(
    dist: &NextTokenDist,
    temperature: f64,
    exclude: Option<Token>,
    rng: &mut ChaCha8Rng,
) -> Token {
    let weights: Vec<f64> = dist
        .probs()
        .iter()
        .enumerate()
        .map(|(t, &p)| {
            if Some(t as Token) == exclude {
                0.0
            } else if temperature == 1.0 {
                p
            } else {
                p.powf(1.0 / temperature)
            }
        })
        .collect();
    match WeightedIndex::new(&weights) {
        Ok(w) => w.sample(rng) as Token,
        // Every allowed weight underflowed: take the most likely allowed token.
        Err(_) => least_or_most_likely(dist, exclude, false),
    }
}

fn least_or_most_likely(dist: &NextTokenDist, exclude: Option<Token>, least: bool) -> Token {
    let mut best: Option<(f64, Token)> = None;
    for (t, &p) in dist.probs().iter().enumerate() {
        let t = t as Token;
        if Some(t) == exclude {
            continue;
        }
        let better = match best {
            None => true,
            Some((b, _)) if least => p < b,
            Some((b, _)) => p > b,
        };
        if better {
            best = Some((p, t));
        }
    }
    best.expect("vocabulary has at least two tokens").1
}

/// Extends `state` by `len` sampled tokens; the first avoids `exclude`.
fn extend(
    model: &Model,
    state: &mut DecodeState,
    len: usize,
    temperature: f64,
    exclude: Option<Token>,
    rng: &mut ChaCha8Rng,
) {
    for i in 0..len {
        let t = sample(
            state.next_dist(),
            temperature,
            exclude.filter(|_| i == 0),
            rng,
        );
        model.push(state, t);
    }
}

fn extend_least_likely(model: &Model, state: &mut DecodeState, len: usize, exclude: Option<Token>) {
    for i in 0..len {
        let t = least_or_most_likely(state.next_dist(), exclude.filter(|_| i == 0), true);
        model.push(state, t);
    }
}

pub fn generate_workload(model: &Model, spec: &WorkloadSpec) -> Result<Workload> {
    spec.validate(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.length;
    let k = spec.group_size();
    let tail = spec.tail_len();
    let prefix_len = n - tail;

    let mut prefix_state = model.start();
    extend(
        model,
        &mut prefix_state,
        prefix_len,
        spec.temperature,
        None,
        &mut rng,
    );
    let shared_information = bits(model.sequence_prob(prefix_state.tokens())?);

    let mut sessions = BTreeMap::new();
    let mut group_states = Vec::with_capacity(k);
    for _ in 0..k {
        let mut s = prefix_state.clone();
        extend(model, &mut s, tail, spec.temperature, None, &mut rng);
        group_states.push(s);
    }
    let mut probs = group_states
        .iter()
        .map(|s| model.sequence_prob(s.tokens()))
        .collect::<Result<Vec<f64>>>()?;

    // Lowest index among the most probable: the centroid the index would pick.
    let centroid_idx = (0..k).fold(None, |best: Option<usize>, j| match best {
        Some(b) if probs[b] >= probs[j] => Some(b),
        _ => Some(j),
    });
    if let (Some(c), true) = (centroid_idx, tail > 0) {
        let c_first = group_states[c].tokens()[prefix_len];
        let p_c = probs[c];
        for j in (0..k).filter(|&j| j != c) {
            let conflicts = |s: &DecodeState, p: f64| s.tokens()[prefix_len] == c_first || p >= p_c;
            let mut redraws = 0;
            while conflicts(&group_states[j], probs[j]) {
                let mut s = prefix_state.clone();
                if redraws < MAX_REDRAWS {
                    extend(
                        model,
                        &mut s,
                        tail,
                        spec.temperature,
                        Some(c_first),
                        &mut rng,
                    );
                } else {
                    extend_least_likely(model, &mut s, tail, Some(c_first));
                }
                probs[j] = model.sequence_prob(s.tokens())?;
                group_states[j] = s;
                redraws += 1;
                if redraws > MAX_REDRAWS {
                    break;
                }
            }
            if conflicts(&group_states[j], probs[j]) {
                return Err(Error::InvalidArgument(format!(
                    "cannot draw a tail that diverges from the centroid for group session {j}"
                )));
            }
        }
    }

    for (j, s) in group_states.iter().enumerate() {
        sessions.insert(j as SessionId, TokenSeq(s.tokens().to_vec()));
    }
    for id in k..spec.sessions {
        let mut s = model.start();
        extend(model, &mut s, n, spec.temperature, None, &mut rng);
        sessions.insert(id as SessionId, TokenSeq(s.tokens().to_vec()));
    }

    let centroid = centroid_idx.map(|c| c as SessionId);
    let achieved_tail_ratio = match centroid {
        Some(c) if k >= 2 => {
            let c_tokens = &sessions[&c];
            let sum: f64 = (0..k as SessionId)
                .filter(|&j| j != c)
                .map(|j| (n - common_prefix_len(&sessions[&j], c_tokens)) as f64 / n as f64)
                .sum();
            sum / (k - 1) as f64
        }
        _ => spec.tail_ratio,
    };
    Ok(Workload {
        sessions,
        group: if k >= 2 {
            (0..k as SessionId).collect()
        } else {
            Vec::new()
        },
        centroid: centroid.filter(|_| k >= 2),
        shared_prefix_len: prefix_len,
        shared_information,
        achieved_fraction: if k >= 2 {
            k as f64 / spec.sessions as f64
        } else {
            0.0
        },
        achieved_tail_ratio,
        suggested_threshold: shared_information - THRESHOLD_MARGIN_BITS,
    })
}

/// Header line of a workload file.
pub fn workload_header(fingerprint: u64) -> String {
    format!("# seqkv workload fingerprint={fingerprint:016x}")
}

const THRESHOLD_KEY: &str = "# suggested_threshold=";

/// A parsed workload file.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadFile {
    pub fingerprint: u64,
    /// Clustering threshold recommended by the generator, if recorded.
    pub suggested_threshold: Option<f64>,
    pub sessions: BTreeMap<SessionId, TokenSeq>,
}

/// Writes one session per line as space-separated token ids, in id order,
/// after a header echoing the model fingerprint and an optional threshold
/// hint. The `i`-th session line holds session `i`.
pub fn write_workload<W: Write>(
    mut out: W,
    fingerprint: u64,
    suggested_threshold: Option<f64>,
    sessions: &BTreeMap<SessionId, TokenSeq>,
) -> Result<()> {
    writeln!(out, "{}", workload_header(fingerprint))?;
    if let Some(t) = suggested_threshold {
        writeln!(out, "{THRESHOLD_KEY}{t}")?;
    }
    for (expected, (&id, seq)) in sessions.iter().enumerate() {
        if id as usize != expected {
            return Err(Error::InvalidArgument(
                "workload files need session ids 0..m without gaps".into(),
            ));
        }
        let line: Vec<String> = seq.iter().map(Token::to_string).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Reads a workload file. Lines after the header that start with `#` are
/// metadata; unknown metadata is ignored.
pub fn read_workload<R: BufRead>(input: R) -> Result<WorkloadFile> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Corrupted("empty workload file".into()))??;
    let fingerprint = header
        .strip_prefix("# seqkv workload fingerprint=")
        .and_then(|h| u64::from_str_radix(h.trim(), 16).ok())
        .ok_or_else(|| Error::Corrupted(format!("bad workload header {header:?}")))?;
    let mut file = WorkloadFile {
        fingerprint,
        suggested_threshold: None,
        sessions: BTreeMap::new(),
    };
    for (i, line) in lines.enumerate() {
        let line = line?;
        let line_no = i + 2;
        if let Some(v) = line.strip_prefix(THRESHOLD_KEY) {
            file.suggested_threshold =
                Some(v.trim().parse().map_err(|_| {
                    Error::Corrupted(format!("line {line_no}: bad threshold {v:?}"))
                })?);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let tokens = line
            .split_whitespace()
            .map(|t| {
                t.parse::<Token>()
                    .map_err(|_| Error::Corrupted(format!("line {line_no}: bad token {t:?}")))
            })
            .collect::<Result<Vec<Token>>>()?;
        let id = file.sessions.len() as SessionId;
        file.sessions.insert(id, TokenSeq(tokens));
    }
    Ok(file)
}
