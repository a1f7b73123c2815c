//! Outcome distributions over party result tuples.

use crate::error::{Error, Result};

/// Probabilities `p(a_1..a_N | x)` for one fixed setting vector, indexed by
/// the mixed-radix outcome tuple with party 1 most significant.
#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeDistribution {
    alphabets: Vec<usize>,
    probs: Vec<f64>,
}

impl OutcomeDistribution {
    pub fn new(alphabets: Vec<usize>, probs: Vec<f64>) -> Self {
        let expect: usize = alphabets.iter().product();
        assert_eq!(expect, probs.len(), "probability table size mismatch");
        OutcomeDistribution { alphabets, probs }
    }

    pub fn zeros(alphabets: Vec<usize>) -> Self {
        let n: usize = alphabets.iter().product();
        OutcomeDistribution { alphabets, probs: vec![0.0; n] }
    }

    pub fn alphabets(&self) -> &[usize] {
        &self.alphabets
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn index_of(&self, outcomes: &[usize]) -> Result<usize> {
        if outcomes.len() != self.alphabets.len() {
            return Err(Error::OutcomeOutOfRange(format!(
                "tuple of length {} for {} parties",
                outcomes.len(),
                self.alphabets.len()
            )));
        }
        let mut idx = 0usize;
        for (a, &d) in outcomes.iter().zip(&self.alphabets) {
            if *a >= d {
                return Err(Error::OutcomeOutOfRange(format!(
                    "outcome {a} of alphabet {d}"
                )));
            }
            idx = idx * d + a;
        }
        Ok(idx)
    }

    pub fn prob(&self, outcomes: &[usize]) -> Result<f64> {
        Ok(self.probs[self.index_of(outcomes)?])
    }

    pub fn tuple_of(&self, mut index: usize) -> Vec<usize> {
        let mut tuple = vec![0usize; self.alphabets.len()];
        for (t, &d) in tuple.iter_mut().zip(&self.alphabets).rev() {
            *t = index % d;
            index /= d;
        }
        tuple
    }

    pub fn add_at(&mut self, index: usize, p: f64) {
        self.probs[index] += p;
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.alphabets, other.alphabets);
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Vec<usize>, f64)> + '_ {
        (0..self.probs.len()).map(|i| (self.tuple_of(i), self.probs[i]))
    }
}

/// A family `p(a | x)` over every setting vector of a protocol, flattened
/// setting-major: entry index is `x_joint * n_outcomes + a_joint` where both
/// joint indices are mixed-radix with party 1 most significant.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionFamily {
    alphabets: Vec<usize>,
    settings_sizes: Vec<usize>,
    values: Vec<f64>,
}

impl DistributionFamily {
    pub fn new(alphabets: Vec<usize>, settings_sizes: Vec<usize>, values: Vec<f64>) -> Self {
        let n_out: usize = alphabets.iter().product();
        let n_set: usize = settings_sizes.iter().product();
        assert_eq!(values.len(), n_out * n_set, "family table size mismatch");
        DistributionFamily { alphabets, settings_sizes, values }
    }

    /// Assemble from per-setting distributions listed in mixed-radix
    /// setting order.
    pub fn from_distributions(
        settings_sizes: Vec<usize>,
        dists: &[OutcomeDistribution],
    ) -> Self {
        assert!(!dists.is_empty());
        let alphabets = dists[0].alphabets().to_vec();
        let n_set: usize = settings_sizes.iter().product();
        assert_eq!(n_set, dists.len(), "one distribution per setting vector");
        let mut values = Vec::with_capacity(n_set * dists[0].len());
        for d in dists {
            assert_eq!(d.alphabets(), alphabets.as_slice());
            values.extend_from_slice(d.probs());
        }
        DistributionFamily { alphabets, settings_sizes, values }
    }

    pub fn alphabets(&self) -> &[usize] {
        &self.alphabets
    }

    pub fn settings_sizes(&self) -> &[usize] {
        &self.settings_sizes
    }

    pub fn n_outcomes(&self) -> usize {
        self.alphabets.iter().product()
    }

    pub fn n_settings(&self) -> usize {
        self.settings_sizes.iter().product()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, x_joint: usize, a_joint: usize) -> f64 {
        self.values[x_joint * self.n_outcomes() + a_joint]
    }

    pub fn distribution_at(&self, x_joint: usize) -> OutcomeDistribution {
        let n = self.n_outcomes();
        OutcomeDistribution::new(
            self.alphabets.clone(),
            self.values[x_joint * n..(x_joint + 1) * n].to_vec(),
        )
    }
}
