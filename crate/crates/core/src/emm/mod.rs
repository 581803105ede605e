//! Extensible Markov models over memory regions.
//!
//! A [`FrequencyMatrix`] is the trainable form of the model: a sparse matrix
//! of transition counts between memory regions that grows by one count per
//! observed jump. The probability form ([`MarkovChain`]) is derived from it on
//! demand by normalising each row.
//!
//! The collaborative operations live here as well: [`simple_merge`] adds
//! models together, [`combine`] adds them while dropping transitions that too
//! few contributors have observed, and [`distance`] / [`attest`] compare two
//! models for self-similarity.

mod codec;
mod params;
mod window;

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

pub use codec::{decode_model, encode_model, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use params::ModelParams;
pub use window::ScoreWindow;

/// A Markov state: the index of a `B`-byte memory region.
pub type State = u64;

/// Maps a program-counter address to the memory region that contains it.
pub fn state_of_address(addr: u64, region_size: u64) -> Result<State> {
    match region_size {
        0 => Err(Error::InvalidParameter("region size must be positive".into())),
        b if b.is_power_of_two() => Ok(addr >> b.trailing_zeros()),
        b => Ok(addr / b),
    }
}

/// Sparse transition-count matrix with per-row totals.
///
/// Zero counts are never stored, and `row_total(i)` is always the sum of
/// row `i`. Iteration order is sorted by `(row, column)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrequencyMatrix {
    counts: BTreeMap<(State, State), u64>,
    row_totals: BTreeMap<State, u64>,
    states: BTreeSet<State>,
}

impl FrequencyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a matrix from `(row, col, count)` triples. Repeated keys are summed.
    pub fn from_entries<I>(entries: I) -> Self
    where
        I: IntoIterator<Item = (State, State, u64)>,
    {
        let mut m = Self::new();
        for (i, j, c) in entries {
            m.add_count(i, j, c);
        }
        m
    }

    /// Records one observed transition `i -> j`.
    pub fn record_transition(&mut self, from: State, to: State) {
        self.add_count(from, to, 1);
    }

    /// Adds `count` observations of `i -> j`. A zero count is a no-op.
    pub fn add_count(&mut self, from: State, to: State, count: u64) {
        if count == 0 {
            return;
        }
        *self.counts.entry((from, to)).or_insert(0) += count;
        *self.row_totals.entry(from).or_insert(0) += count;
        self.states.insert(from);
        self.states.insert(to);
    }

    pub fn count(&self, from: State, to: State) -> u64 {
        self.counts.get(&(from, to)).copied().unwrap_or(0)
    }

    pub fn row_total(&self, from: State) -> u64 {
        self.row_totals.get(&from).copied().unwrap_or(0)
    }

    /// `n_ij / n_i`, or 0 when the row is empty or the entry absent.
    pub fn transition_prob(&self, from: State, to: State) -> f64 {
        match self.row_total(from) {
            0 => 0.0,
            total => self.count(from, to) as f64 / total as f64,
        }
    }

    pub fn states(&self) -> &BTreeSet<State> {
        &self.states
    }

    /// Nonzero entries in `(row, col)` order.
    pub fn entries(&self) -> impl Iterator<Item = (State, State, u64)> + '_ {
        self.counts.iter().map(|(&(i, j), &c)| (i, j, c))
    }

    /// Number of nonzero entries.
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Sum of all counts.
    pub fn total_count(&self) -> u64 {
        self.row_totals.values().sum()
    }

    pub fn to_markov(&self) -> MarkovChain {
        let probs = self
            .counts
            .iter()
            .map(|(&(i, j), &c)| ((i, j), c as f64 / self.row_totals[&i] as f64))
            .collect();
        MarkovChain {
            probs,
            states: self.states.clone(),
        }
    }

    /// Multiplies every count by `factor`.
    pub fn scaled(&self, factor: u64) -> Self {
        Self::from_entries(self.entries().map(|(i, j, c)| (i, j, c * factor)))
    }
}

/// Row-normalised transition probabilities derived from a [`FrequencyMatrix`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MarkovChain {
    probs: BTreeMap<(State, State), f64>,
    states: BTreeSet<State>,
}

impl MarkovChain {
    /// Builds a chain from explicit probabilities, checking that every
    /// nonempty row sums to 1.
    pub fn from_probs<I>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (State, State, f64)>,
    {
        let mut chain = MarkovChain::default();
        for (i, j, p) in entries {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return Err(Error::InvalidInput(format!(
                    "probability {p} out of range at ({i}, {j})"
                )));
            }
            if p == 0.0 {
                continue;
            }
            chain.probs.insert((i, j), p);
            chain.states.insert(i);
            chain.states.insert(j);
        }
        if let Some(row) = chain.rows_off_by(1e-9).next() {
            return Err(Error::InvalidInput(format!(
                "row {row} does not sum to 1"
            )));
        }
        Ok(chain)
    }

    pub fn prob(&self, from: State, to: State) -> f64 {
        self.probs.get(&(from, to)).copied().unwrap_or(0.0)
    }

    pub fn states(&self) -> &BTreeSet<State> {
        &self.states
    }

    pub fn entries(&self) -> impl Iterator<Item = (State, State, f64)> + '_ {
        self.probs.iter().map(|(&(i, j), &p)| (i, j, p))
    }

    /// Outgoing `(successor, probability)` pairs of one state.
    pub fn row(&self, from: State) -> impl Iterator<Item = (State, f64)> + '_ {
        self.probs
            .range((from, State::MIN)..=(from, State::MAX))
            .map(|(&(_, j), &p)| (j, p))
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Rows whose probabilities do not sum to 1 within `tol`.
    fn rows_off_by(&self, tol: f64) -> impl Iterator<Item = State> + '_ {
        let mut sums: BTreeMap<State, f64> = BTreeMap::new();
        for (&(i, _), &p) in &self.probs {
            *sums.entry(i).or_insert(0.0) += p;
        }
        sums.into_iter()
            .filter(move |(_, s)| (s - 1.0).abs() > tol)
            .map(|(i, _)| i)
    }

    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        self.rows_off_by(tol).next().is_none()
    }

    /// Probability of the whole trajectory: the product of its transitions.
    pub fn trajectory_prob(&self, trajectory: &[State]) -> Result<f64> {
        if trajectory.len() < 2 {
            return Err(Error::InvalidInput(
                "a trajectory needs at least two states".into(),
            ));
        }
        Ok(trajectory
            .windows(2)
            .map(|w| self.prob(w[0], w[1]))
            .product())
    }
}

/// Element-wise sum of a set of models.
pub fn simple_merge(models: &[FrequencyMatrix]) -> Result<FrequencyMatrix> {
    if models.is_empty() {
        return Err(Error::InvalidInput("cannot merge an empty model set".into()));
    }
    Ok(FrequencyMatrix::from_entries(
        models.iter().flat_map(FrequencyMatrix::entries),
    ))
}

/// Sums a set of models, keeping a transition only when the fraction of
/// models that observed it is strictly greater than `p_a`.
pub fn combine(models: &[FrequencyMatrix], p_a: f64) -> Result<FrequencyMatrix> {
    if models.is_empty() {
        return Err(Error::InvalidInput(
            "cannot combine an empty model set".into(),
        ));
    }
    if !(p_a > 0.0 && p_a < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "p_a must lie in (0, 1), got {p_a}"
        )));
    }
    let mut tally: BTreeMap<(State, State), (u64, usize)> = BTreeMap::new();
    for model in models {
        for (i, j, c) in model.entries() {
            let slot = tally.entry((i, j)).or_insert((0, 0));
            slot.0 += c;
            slot.1 += 1;
        }
    }
    let n = models.len() as f64;
    Ok(FrequencyMatrix::from_entries(tally.into_iter().filter_map(
        |((i, j), (sum, seen))| (seen as f64 / n > p_a).then_some((i, j, sum)),
    )))
}

/// Mean absolute difference between the two models' transition
/// probabilities over the union of their states.
///
/// Entries that are zero in both models contribute nothing, so only the
/// union of nonzero entries is visited. Two empty models are at distance 0.
pub fn distance(a: &FrequencyMatrix, b: &FrequencyMatrix) -> f64 {
    let dim = a.states().union(b.states()).count();
    if dim == 0 {
        return 0.0;
    }
    let keys: BTreeSet<(State, State)> = a
        .counts
        .keys()
        .chain(b.counts.keys())
        .copied()
        .collect();
    let total: f64 = keys
        .into_iter()
        .map(|(i, j)| (a.transition_prob(i, j) - b.transition_prob(i, j)).abs())
        .sum();
    total / (dim * dim) as f64
}

/// True when `other` is close enough to `local` to be trusted.
pub fn attest(local: &FrequencyMatrix, other: &FrequencyMatrix, alpha: f64) -> bool {
    distance(local, other) < alpha
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(entries: &[(State, State, u64)]) -> FrequencyMatrix {
        FrequencyMatrix::from_entries(entries.iter().copied())
    }

    #[test]
    fn address_mapping() {
        assert_eq!(state_of_address(0x200, 256).unwrap(), 2);
        assert_eq!(state_of_address(0, 256).unwrap(), 0);
        assert_eq!(state_of_address(0x1FF, 256).unwrap(), 1);
        assert_eq!(state_of_address(1000, 300).unwrap(), 3);
        assert!(matches!(
            state_of_address(5, 0),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn record_transition_updates_counts_and_totals() {
        let mut n = FrequencyMatrix::new();
        n.record_transition(0, 1);
        assert_eq!(n.count(0, 1), 1);
        assert_eq!(n.row_total(0), 1);

        let mut n = fm(&[(0, 1, 3)]);
        n.record_transition(0, 1);
        assert_eq!(n.count(0, 1), 4);

        let mut n = fm(&[(0, 1, 1)]);
        n.record_transition(1, 0);
        assert_eq!(n, fm(&[(0, 1, 1), (1, 0, 1)]));
        assert_eq!(n.states().len(), 2);
    }

    #[test]
    fn zero_counts_are_not_stored() {
        let n = fm(&[(0, 1, 0), (2, 3, 1)]);
        assert_eq!(n.len(), 1);
        assert!(!n.states().contains(&0));
    }

    #[test]
    fn to_markov_normalises_rows() {
        let m = fm(&[(0, 1, 3), (0, 2, 1)]).to_markov();
        assert_eq!(m.prob(0, 1), 0.75);
        assert_eq!(m.prob(0, 2), 0.25);

        let m = fm(&[(5, 5, 7)]).to_markov();
        assert_eq!(m.prob(5, 5), 1.0);

        assert!(FrequencyMatrix::new().to_markov().is_empty());
    }

    #[test]
    fn trajectory_probability() {
        let m = MarkovChain::from_probs([(0, 1, 0.75), (0, 2, 0.25), (1, 0, 1.0)]).unwrap();
        assert_eq!(m.trajectory_prob(&[0, 1, 0]).unwrap(), 0.75);
        assert_eq!(m.trajectory_prob(&[0, 1, 7]).unwrap(), 0.0);

        let m = MarkovChain::from_probs([(0, 0, 1.0)]).unwrap();
        assert_eq!(m.trajectory_prob(&[0, 0, 0, 0]).unwrap(), 1.0);
        assert!(matches!(
            m.trajectory_prob(&[0]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn from_probs_rejects_non_stochastic_rows() {
        assert!(MarkovChain::from_probs([(0, 1, 0.5)]).is_err());
        assert!(MarkovChain::from_probs([(0, 1, 1.5)]).is_err());
    }

    #[test]
    fn simple_merge_sums() {
        let merged = simple_merge(&[fm(&[(0, 1, 1)]), fm(&[(0, 1, 2)])]).unwrap();
        assert_eq!(merged, fm(&[(0, 1, 3)]));

        let n = fm(&[(0, 1, 4), (3, 2, 1)]);
        assert_eq!(simple_merge(&[n.clone(), FrequencyMatrix::new()]).unwrap(), n);

        let merged = simple_merge(&[fm(&[(0, 1, 1)]), fm(&[(2, 3, 1)])]).unwrap();
        assert_eq!(merged, fm(&[(0, 1, 1), (2, 3, 1)]));

        assert!(simple_merge(&[]).is_err());
    }

    #[test]
    fn combine_threshold_boundary_is_dropped() {
        let mut models = vec![FrequencyMatrix::new(); 4];
        models[0].record_transition(0, 1);
        for m in &mut models {
            m.record_transition(2, 3);
        }
        let out = combine(&models, 0.25).unwrap();
        assert_eq!(out.count(0, 1), 0);
        assert_eq!(out.count(2, 3), 4);
    }

    #[test]
    fn combine_unanimous_transition_is_summed() {
        let models = vec![fm(&[(0, 1, 2)]); 4];
        assert_eq!(combine(&models, 0.25).unwrap(), fm(&[(0, 1, 8)]));
    }

    #[test]
    fn combine_rejects_bad_input() {
        assert!(combine(&[], 0.25).is_err());
        assert!(combine(&[fm(&[(0, 1, 1)])], 0.0).is_err());
        assert!(combine(&[fm(&[(0, 1, 1)])], 1.0).is_err());
    }

    #[test]
    fn distance_examples() {
        let a = fm(&[(0, 1, 3), (1, 0, 2)]);
        assert_eq!(distance(&a, &a), 0.0);

        let a = fm(&[(0, 1, 1), (1, 0, 1)]);
        let b = fm(&[(0, 0, 1), (1, 1, 1)]);
        assert_eq!(distance(&a, &b), 1.0);
        assert_eq!(distance(&FrequencyMatrix::new(), &FrequencyMatrix::new()), 0.0);
    }

    #[test]
    fn attest_uses_strict_inequality() {
        let a = fm(&[(0, 1, 1), (1, 0, 1)]);
        let b = fm(&[(0, 0, 1), (1, 1, 1)]);
        assert!(attest(&a, &a, 0.05));
        assert!(!attest(&a, &b, 0.05));
        assert!(!attest(&a, &a, 0.0));
    }

    #[test]
    fn scaled_multiplies_counts() {
        let n = fm(&[(0, 1, 2), (1, 0, 3)]);
        assert_eq!(n.scaled(4), fm(&[(0, 1, 8), (1, 0, 12)]));
    }
}
