//! Exhaustive walks over every token context up to a length bound.
//!
//! Contexts are visited in depth-first pre-order (empty context first, then
//! token 0's subtree, then token 1's, ...). The parallel walk splits on the
//! first token and concatenates results in that same order, so reductions are
//! run-to-run identical.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{DecodeState, Model, Token};

/// Refuse enumerations that need more decoding steps than this.
pub const ENUMERATION_BUDGET: u64 = 10_000_000;

/// Number of contexts with length in `0..=max_len`.
pub fn context_count(vocab: usize, max_len: usize) -> u64 {
    let mut total: u64 = 0;
    let mut level: u64 = 1;
    for _ in 0..=max_len {
        total = total.saturating_add(level);
        level = level.saturating_mul(vocab as u64);
    }
    total
}

/// Fails if visiting every context up to `max_len` and peeking all of their
/// continuations exceeds [`ENUMERATION_BUDGET`].
pub fn check_budget(model: &Model, max_len: usize) -> Result<()> {
    if max_len > model.config().max_context {
        return Err(Error::InvalidArgument(format!(
            "enumeration length {max_len} exceeds max_context {}",
            model.config().max_context
        )));
    }
    let needed = context_count(model.vocab_size(), max_len);
    if needed > ENUMERATION_BUDGET {
        return Err(Error::BudgetExceeded {
            needed,
            budget: ENUMERATION_BUDGET,
        });
    }
    Ok(())
}

/// Calls `visit` on the decode state of every context of length `0..=max_len`.
pub fn for_each_context<F>(model: &Model, max_len: usize, mut visit: F) -> Result<()>
where
    F: FnMut(&DecodeState),
{
    check_budget(model, max_len)?;
    let mut state = model.start();
    walk(model, &mut state, max_len, &mut visit);
    Ok(())
}

fn walk<F: FnMut(&DecodeState)>(
    model: &Model,
    state: &mut DecodeState,
    max_len: usize,
    visit: &mut F,
) {
    visit(state);
    if state.len() == max_len {
        return;
    }
    let depth = state.len();
    for t in 0..model.vocab_size() as Token {
        model.push(state, t);
        walk(model, state, max_len, visit);
        state.truncate(depth);
    }
}

/// Maps every context of length `0..=max_len` in parallel, returning results
/// in depth-first pre-order.
pub fn map_contexts<T, F>(model: &Model, max_len: usize, map: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&DecodeState) -> T + Sync,
{
    check_budget(model, max_len)?;
    let start = model.start();
    let mut out = vec![map(&start)];
    if max_len == 0 {
        return Ok(out);
    }
    let subtrees: Vec<Vec<T>> = (0..model.vocab_size() as Token)
        .into_par_iter()
        .map(|t| {
            let mut state = start.clone();
            model.push(&mut state, t);
            let mut local = Vec::new();
            walk(model, &mut state, max_len, &mut |s| local.push(map(s)));
            local
        })
        .collect();
    out.extend(subtrees.into_iter().flatten());
    Ok(out)
}

/// Every token sequence of exactly `len` tokens, in lexicographic order.
pub fn all_sequences(vocab: usize, len: usize) -> impl Iterator<Item = Vec<Token>> {
    let total = (vocab as u64).pow(len as u32);
    (0..total).map(move |mut code| {
        let mut seq = vec![0; len];
        for slot in seq.iter_mut().rev() {
            *slot = (code % vocab as u64) as Token;
            code /= vocab as u64;
        }
        seq
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn counts_and_order() {
        assert_eq!(context_count(8, 5), 37_449);
        let model = Model::build(ModelConfig {
            vocab_size: 3,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut seen = Vec::new();
        for_each_context(&model, 2, |s| seen.push(s.tokens().to_vec())).unwrap();
        assert_eq!(seen.len(), 13);
        assert_eq!(seen[0], Vec::<Token>::new());
        assert_eq!(seen[1], vec![0]);
        assert_eq!(seen[2], vec![0, 0]);
        let par = map_contexts(&model, 2, |s| s.tokens().to_vec()).unwrap();
        assert_eq!(par, seen);
    }

    #[test]
    fn budget_guard() {
        let model = Model::build(ModelConfig {
            vocab_size: 64,
            max_context: 8,
            ..ModelConfig::default()
        })
        .unwrap();
        assert!(matches!(
            check_budget(&model, 5),
            Err(Error::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn sequences_lexicographic() {
        let all: Vec<_> = all_sequences(2, 2).collect();
        assert_eq!(all, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
    }
}
