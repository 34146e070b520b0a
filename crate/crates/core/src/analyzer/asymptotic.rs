//! Running averages of per-position conditional entropy.
//!
//! `H̄_n = (1/n) Σ_{i≤n} H_i`, accumulated as `m_n = m_{n−1} + (H_n − m_{n−1})/n`.
//! With that update a non-increasing input yields an exactly non-increasing
//! running mean in floating point: `H_n ≤ m_{n−1}` makes the increment `≤ 0`.

use crate::analyzer::entropy::conditional_entropies;
use crate::error::{Error, Result};
use crate::model::{entropy_bits, Model, Token};
use crate::report::Table;

/// A source of per-position conditional entropies `H_1, H_2, ...`.
pub trait EntropySource {
    fn name(&self) -> String;

    /// `H_i` for `i = 1..=n`, in bits.
    fn conditional_entropies(&self, n: usize) -> Result<Vec<f64>>;
}

/// A Markov chain over `states` symbols. At step `i` the chain moves from
/// `s` to `succ(s) = (s + 1) mod states` with probability `1 − λ_i` and to a
/// uniformly drawn symbol with probability `λ_i`. `λ_i` is non-increasing, so
/// every row's entropy is non-increasing in `i` and so is `H_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSource {
    pub states: usize,
    /// `λ_1`; later steps use `λ_1 · decay^(i−1)`.
    pub initial_mixing: f64,
    pub decay: f64,
}

impl Default for MarkovSource {
    fn default() -> Self {
        Self {
            states: 4,
            initial_mixing: 1.0,
            decay: 0.9,
        }
    }
}

impl MarkovSource {
    pub fn mixing(&self, i: usize) -> f64 {
        self.initial_mixing * self.decay.powi(i as i32 - 1)
    }

    /// Transition row out of state `s` at step `i` (1-based).
    pub fn row(&self, i: usize, s: usize) -> Vec<f64> {
        let lambda = self.mixing(i);
        let mut row = vec![lambda / self.states as f64; self.states];
        row[(s + 1) % self.states] += 1.0 - lambda;
        row
    }
}

impl EntropySource for MarkovSource {
    fn name(&self) -> String {
        format!(
            "markov(states={},mixing={},decay={})",
            self.states, self.initial_mixing, self.decay
        )
    }

    fn conditional_entropies(&self, n: usize) -> Result<Vec<f64>> {
        let valid = self.states >= 2
            && (0.0..=1.0).contains(&self.initial_mixing)
            && (0.0..=1.0).contains(&self.decay);
        if !valid {
            return Err(Error::InvalidArgument(format!(
                "invalid source {}",
                self.name()
            )));
        }
        // The chain starts in state 0; `dist` is the law of the current state.
        let mut dist = vec![0.0; self.states];
        dist[0] = 1.0;
        let mut out = Vec::with_capacity(n);
        for i in 1..=n {
            let mut h = 0.0;
            let mut next = vec![0.0; self.states];
            for (s, &ps) in dist.iter().enumerate() {
                if ps == 0.0 {
                    continue;
                }
                let row = self.row(i, s);
                h += ps * entropy_bits(&row);
                for (n, r) in next.iter_mut().zip(&row) {
                    *n += ps * r;
                }
            }
            out.push(h);
            dist = next;
        }
        Ok(out)
    }
}

/// A source whose `H_i` is given by a closure.
pub struct ExplicitSource {
    pub label: String,
    pub entropy_at: Box<dyn Fn(usize) -> f64 + Send + Sync>,
}

impl ExplicitSource {
    /// `H_i = max(0, start − slope · i)`.
    pub fn linear_decay(start: f64, slope: f64) -> Self {
        Self {
            label: format!("linear(start={start},slope={slope})"),
            entropy_at: Box::new(move |i| (start - slope * i as f64).max(0.0)),
        }
    }

    pub fn constant(h: f64) -> Self {
        Self {
            label: format!("constant({h})"),
            entropy_at: Box::new(move |_| h),
        }
    }
}

impl EntropySource for ExplicitSource {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn conditional_entropies(&self, n: usize) -> Result<Vec<f64>> {
        Ok((1..=n).map(|i| (self.entropy_at)(i)).collect())
    }
}

/// Exact `H_i` of the toy model by enumeration.
pub struct ModelSource<'a>(pub &'a Model);

impl EntropySource for ModelSource<'_> {
    fn name(&self) -> String {
        format!("toy_model({:016x})", self.0.fingerprint())
    }

    fn conditional_entropies(&self, n: usize) -> Result<Vec<f64>> {
        conditional_entropies(self.0, n)
    }
}

/// `m_n` for every prefix of `values`.
pub fn running_mean(values: &[f64]) -> Vec<f64> {
    let mut m = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            m += (h - m) / (i + 1) as f64;
            m
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticTrace {
    pub source: String,
    pub entropies: Vec<f64>,
    pub running_mean: Vec<f64>,
    /// Realized surprisal along the greedy path, when the source has one.
    pub surprisal: Option<Vec<f64>>,
    pub surprisal_running_mean: Option<Vec<f64>>,
}

impl AsymptoticTrace {
    pub fn non_increasing(&self) -> bool {
        self.running_mean.windows(2).all(|w| w[1] <= w[0])
    }

    pub fn strictly_decreasing(&self) -> bool {
        self.running_mean.windows(2).all(|w| w[1] < w[0])
    }

    /// Largest `m_{n+1} − m_n`; `≤ 0` exactly when the trace is non-increasing.
    pub fn max_increase(&self) -> f64 {
        self.running_mean
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new([
            "n",
            "entropy",
            "running_mean",
            "surprisal",
            "surprisal_running_mean",
        ]);
        for (i, (h, m)) in self.entropies.iter().zip(&self.running_mean).enumerate() {
            let opt = |v: &Option<Vec<f64>>| match v {
                Some(v) => format!("{:.12}", v[i]),
                None => "-".into(),
            };
            t.push([
                (i + 1).to_string(),
                format!("{h:.12}"),
                format!("{m:.12}"),
                opt(&self.surprisal),
                opt(&self.surprisal_running_mean),
            ]);
        }
        t
    }
}

pub fn verify_asymptotic(source: &dyn EntropySource, n: usize) -> Result<AsymptoticTrace> {
    let entropies = source.conditional_entropies(n)?;
    Ok(AsymptoticTrace {
        source: source.name(),
        running_mean: running_mean(&entropies),
        entropies,
        surprisal: None,
        surprisal_running_mean: None,
    })
}

/// Entropy trace of the toy model plus the realized surprisal of its greedy
/// continuation. Neither series is asserted to be monotone.
pub fn model_trace(model: &Model, n: usize) -> Result<AsymptoticTrace> {
    let mut trace = verify_asymptotic(&ModelSource(model), n)?;
    let mut state = model.start();
    let mut surprisal = Vec::with_capacity(n);
    for _ in 0..n {
        let dist = state.next_dist().clone();
        let t: Token = dist.argmax();
        surprisal.push(dist.surprisal(t));
        model.push(&mut state, t);
    }
    trace.surprisal_running_mean = Some(running_mean(&surprisal));
    trace.surprisal = Some(surprisal);
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_mean_matches_direct_average() {
        let v = [3.0, 1.0, 2.0, 0.5];
        let m = running_mean(&v);
        for n in 1..=v.len() {
            let direct: f64 = v[..n].iter().sum::<f64>() / n as f64;
            assert!((m[n - 1] - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn markov_rows_are_distributions() {
        let src = MarkovSource::default();
        for i in 1..10 {
            for s in 0..src.states {
                let sum: f64 = src.row(i, s).iter().sum();
                assert!((sum - 1.0).abs() < 1e-15);
            }
        }
        assert_eq!(src.conditional_entropies(1).unwrap(), vec![2.0]);
    }
}
