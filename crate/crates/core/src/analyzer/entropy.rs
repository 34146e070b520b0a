//! Exact conditional entropies of tokens and of KV vectors by enumeration.
//!
//! The KV side never looks at token ids: sequences are grouped by the bit
//! pattern of their KV prefix, and the entropy is taken over the distinct
//! bit patterns of the next KV vector within each group.

use fnv::FnvHashMap;

use crate::enumerate::check_budget;
use crate::error::Result;
use crate::model::{Model, Token};
use crate::report::Table;

#[derive(Debug, Clone, PartialEq)]
pub struct PositionEntropy {
    /// 1-based position.
    pub position: usize,
    /// `H(t_i | t_<i)` in bits.
    pub token_entropy: f64,
    /// `H(KV_i | KV_<i)` in bits.
    pub kv_entropy: f64,
}

impl PositionEntropy {
    pub fn gap(&self) -> f64 {
        self.kv_entropy - self.token_entropy
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnumerationReport {
    pub max_len: usize,
    pub positions: Vec<PositionEntropy>,
    /// Distinct-token pairs whose next KV vectors were bitwise equal.
    pub kv_collisions: u64,
    /// `E[-log2 P(s)] / n` over all sequences of length `max_len`.
    pub log2_perplexity: f64,
}

impl EnumerationReport {
    pub fn max_gap(&self) -> f64 {
        self.positions
            .iter()
            .map(|p| p.gap().abs())
            .fold(0.0, f64::max)
    }

    pub fn injective(&self) -> bool {
        self.kv_collisions == 0
    }

    pub fn mean_kv_entropy(&self) -> f64 {
        self.positions.iter().map(|p| p.kv_entropy).sum::<f64>() / self.positions.len() as f64
    }

    pub fn mean_token_entropy(&self) -> f64 {
        self.positions.iter().map(|p| p.token_entropy).sum::<f64>() / self.positions.len() as f64
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new([
            "position",
            "token_entropy_bits",
            "kv_entropy_bits",
            "gap_bits",
        ]);
        for p in &self.positions {
            t.push([
                p.position.to_string(),
                format!("{:.12}", p.token_entropy),
                format!("{:.12}", p.kv_entropy),
                format!("{:.3e}", p.gap()),
            ]);
        }
        t
    }
}

type Pattern = Vec<u64>;

#[derive(Default)]
struct Level {
    /// Interned KV-prefix classes: (parent class, next KV bits) -> class.
    classes: FnvHashMap<(u64, Pattern), u64>,
    /// Per parent class: probability of each next-KV pattern. FNV maps keep
    /// iteration, and so summation order, identical across runs.
    groups: FnvHashMap<u64, FnvHashMap<Pattern, f64>>,
    token_entropy: f64,
}

fn bits_of(v: &[f64]) -> Pattern {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Conditional entropies at positions `1..=max_len`.
pub fn verify_sequential_bound(model: &Model, max_len: usize) -> Result<EnumerationReport> {
    check_budget(model, max_len)?;
    let vocab = model.vocab_size() as Token;
    let mut levels: Vec<Level> = (0..max_len).map(|_| Level::default()).collect();
    let mut collisions = 0u64;
    let mut state = model.start();
    // (class of the current KV prefix, probability of the current prefix)
    let mut stack: Vec<(u64, f64)> = vec![(0, 1.0)];
    let mut sum_surprisal = 0.0;
    visit(
        model,
        &mut state,
        max_len,
        vocab,
        &mut stack,
        &mut levels,
        &mut collisions,
        &mut sum_surprisal,
    );

    let positions = levels
        .iter()
        .enumerate()
        .map(|(i, level)| {
            let mut h = 0.0;
            for patterns in level.groups.values() {
                let total: f64 = patterns.values().sum();
                for &p in patterns.values() {
                    if p > 0.0 {
                        h -= p * (p / total).log2();
                    }
                }
            }
            PositionEntropy {
                position: i + 1,
                token_entropy: level.token_entropy,
                kv_entropy: h,
            }
        })
        .collect();
    Ok(EnumerationReport {
        max_len,
        positions,
        kv_collisions: collisions,
        log2_perplexity: if max_len == 0 {
            0.0
        } else {
            sum_surprisal / max_len as f64
        },
    })
}

#[allow(clippy::too_many_arguments)]
fn visit(
    model: &Model,
    state: &mut crate::model::DecodeState,
    max_len: usize,
    vocab: Token,
    stack: &mut Vec<(u64, f64)>,
    levels: &mut [Level],
    collisions: &mut u64,
    sum_surprisal: &mut f64,
) {
    let depth = state.len();
    let (class, p_prefix) = *stack.last().expect("stack holds the root");
    if depth == max_len {
        if p_prefix > 0.0 {
            *sum_surprisal -= p_prefix * p_prefix.log2();
        }
        return;
    }
    let dist = state.next_dist().clone();
    let level = &mut levels[depth];
    level.token_entropy += p_prefix * dist.entropy();
    let mut children = Vec::with_capacity(vocab as usize);
    {
        let group = level.groups.entry(class).or_default();
        for t in 0..vocab {
            let kv = bits_of(&model.peek(state, t).kv);
            let p = p_prefix * dist.prob(t);
            match group.get_mut(&kv) {
                Some(acc) => {
                    *acc += p;
                    *collisions += 1;
                }
                None => {
                    group.insert(kv.clone(), p);
                }
            }
            children.push((kv, p));
        }
    }
    for (t, (kv, p)) in children.into_iter().enumerate() {
        let next_id = levels[depth].classes.len() as u64;
        let child_class = *levels[depth].classes.entry((class, kv)).or_insert(next_id);
        model.push(state, t as Token);
        stack.push((child_class, p));
        visit(
            model,
            state,
            max_len,
            vocab,
            stack,
            levels,
            collisions,
            sum_surprisal,
        );
        stack.pop();
        state.truncate(depth);
    }
}

/// Result of checking that every context's layer-1 next-position keys are
/// pairwise distinct.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectivityReport {
    pub contexts: u64,
    pub violation: Option<(Vec<Token>, Token, Token)>,
}

impl InjectivityReport {
    pub fn holds(&self) -> bool {
        self.violation.is_none()
    }
}

pub fn verify_injectivity(model: &Model, max_len: usize) -> Result<InjectivityReport> {
    let dim = model.config().model_dim();
    let vocab = model.vocab_size() as Token;
    let found = crate::enumerate::map_contexts(model, max_len, |state| {
        let keys: Vec<Pattern> = (0..vocab)
            .map(|t| bits_of(&model.peek(state, t).kv[..dim]))
            .collect();
        for a in 0..keys.len() {
            for b in a + 1..keys.len() {
                if keys[a] == keys[b] {
                    return Some((state.tokens().to_vec(), a as Token, b as Token));
                }
            }
        }
        None
    })?;
    let contexts = found.len() as u64;
    Ok(InjectivityReport {
        contexts,
        violation: found.into_iter().flatten().next(),
    })
}

/// `H(t_i | t_<i)` for `i = 1..=max_len`, averaged over contexts.
pub fn conditional_entropies(model: &Model, max_len: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; max_len];
    if max_len == 0 {
        return Ok(out);
    }
    let terms = crate::enumerate::map_contexts(model, max_len - 1, |state| {
        let p: f64 = (0..state.len())
            .map(|i| state.dist_after(i).prob(state.tokens()[i]))
            .product();
        (state.len(), p * state.next_dist().entropy())
    })?;
    // Summed in enumeration order, so the result is run-to-run identical.
    for (depth, term) in terms {
        out[depth] += term;
    }
    Ok(out)
}
