//! Causal-polytope membership for two parties: enumerate every
//! deterministic causal strategy, test distribution families for
//! membership in their convex hull by LP feasibility, and score linear
//! games against the causal bound.
//!
//! Enumeration is exhaustive only for two parties (order-adaptive
//! strategies explode combinatorially beyond that); the extraction pipeline
//! already certifies causality for any party count, so this module is the
//! independent cross-check on the two-party slice.

use std::collections::BTreeSet;

use crate::dist::DistributionFamily;
use crate::error::{Error, Result};
use crate::tol;

/// A deterministic two-party causal strategy: a fixed first mover, a
/// deterministic output function for it, and an output function for the
/// second mover that sees the full history (the first mover's setting and
/// outcome) plus its own setting.
#[derive(Clone, Debug)]
pub struct DeterministicStrategy {
    /// 1 or 2.
    pub first: usize,
    /// `[x_first] -> a_first`.
    pub first_outputs: Vec<usize>,
    /// `[x_first][a_first][x_second] -> a_second`.
    pub second_outputs: Vec<Vec<Vec<usize>>>,
}

impl DeterministicStrategy {
    /// The conditional family `p(a1 a2 | x1 x2)` of this strategy,
    /// flattened like [`DistributionFamily`].
    pub fn family(&self, alphabets: &[usize], settings_sizes: &[usize]) -> Vec<f64> {
        let n_out: usize = alphabets.iter().product();
        let n_set: usize = settings_sizes.iter().product();
        let mut values = vec![0.0; n_out * n_set];
        for x1 in 0..settings_sizes[0] {
            for x2 in 0..settings_sizes[1] {
                let (x_first, x_second) = if self.first == 1 { (x1, x2) } else { (x2, x1) };
                let a_first = self.first_outputs[x_first];
                let a_second = self.second_outputs[x_first][a_first][x_second];
                let (a1, a2) = if self.first == 1 {
                    (a_first, a_second)
                } else {
                    (a_second, a_first)
                };
                let xj = x1 * settings_sizes[1] + x2;
                let aj = a1 * alphabets[1] + a2;
                values[xj * n_out + aj] = 1.0;
            }
        }
        values
    }
}

fn counter_functions(domain: usize, codomain: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = codomain.checked_pow(domain as u32).expect("guarded");
    (0..total).map(move |mut code| {
        let mut f = vec![0usize; domain];
        for slot in f.iter_mut() {
            *slot = code % codomain;
            code /= codomain;
        }
        f
    })
}

fn check_two_parties(alphabets: &[usize], settings_sizes: &[usize]) -> Result<()> {
    if alphabets.len() != 2 || settings_sizes.len() != 2 {
        return Err(Error::UnsupportedSize(format!(
            "exhaustive strategy enumeration supports exactly 2 parties (got {}); \
             larger instances are certified via model extraction instead",
            alphabets.len()
        )));
    }
    let mut strategies = 0u128;
    for first in [0usize, 1] {
        let (af, asz) = (alphabets[first], alphabets[1 - first]);
        let (sf, ssz) = (settings_sizes[first], settings_sizes[1 - first]);
        let f_count = (af as u128).pow(sf as u32);
        let g_count = (asz as u128).pow((sf * af * ssz) as u32);
        strategies += f_count * g_count;
    }
    if strategies > 1_000_000 {
        return Err(Error::UnsupportedSize(format!(
            "{strategies} raw strategies exceed the enumeration budget"
        )));
    }
    Ok(())
}

/// Every deterministic two-party causal strategy (both first movers, all
/// output functions).
pub fn enumerate_strategies(
    alphabets: &[usize],
    settings_sizes: &[usize],
) -> Result<Vec<DeterministicStrategy>> {
    check_two_parties(alphabets, settings_sizes)?;
    let mut out = Vec::new();
    for first in [1usize, 2] {
        let a_first = alphabets[first - 1];
        let a_second = alphabets[2 - first];
        let s_first = settings_sizes[first - 1];
        let s_second = settings_sizes[2 - first];
        for f in counter_functions(s_first, a_first) {
            for g_flat in counter_functions(s_first * a_first * s_second, a_second) {
                let mut g = vec![vec![vec![0usize; s_second]; a_first]; s_first];
                for xf in 0..s_first {
                    for af in 0..a_first {
                        for xs in 0..s_second {
                            g[xf][af][xs] = g_flat[(xf * a_first + af) * s_second + xs];
                        }
                    }
                }
                out.push(DeterministicStrategy {
                    first,
                    first_outputs: f.clone(),
                    second_outputs: g,
                });
            }
        }
    }
    Ok(out)
}

/// The distinct conditional families of all deterministic strategies (the
/// polytope vertices), deduplicated and deterministically ordered.
pub fn enumerate_deterministic(
    alphabets: &[usize],
    settings_sizes: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let strategies = enumerate_strategies(alphabets, settings_sizes)?;
    let mut seen: BTreeSet<Vec<u8>> = BTreeSet::new();
    for s in &strategies {
        let fam = s.family(alphabets, settings_sizes);
        seen.insert(fam.iter().map(|&v| if v > 0.5 { 1u8 } else { 0u8 }).collect());
    }
    Ok(seen
        .into_iter()
        .map(|bits| bits.into_iter().map(f64::from).collect())
        .collect())
}

/// Outcome of a membership test.
#[derive(Clone, Debug)]
pub enum PolytopeCertificate {
    /// Convex weights over the vertex list reproducing the family.
    Inside {
        /// `(vertex index, weight)` for the non-zero weights.
        weights: Vec<(usize, f64)>,
        /// Largest reconstruction error of the weighted vertex sum.
        residual: f64,
    },
    /// A linear functional separating the family from every vertex.
    Outside {
        /// Coefficients over the flattened `(x, a)` entries.
        functional: Vec<f64>,
        /// Largest functional value over the vertices.
        vertex_bound: f64,
        /// Functional value on the tested family.
        value: f64,
        /// `value - vertex_bound`, strictly positive.
        margin: f64,
    },
}

/// Decide whether `family` lies in the convex hull of `vertices` by dense
/// phase-1 simplex feasibility. Inside yields reconstruction weights,
/// outside a separating functional recovered from the dual; a simplex that
/// hits its iteration cap reports indeterminate instead of guessing.
pub fn membership(
    family: &DistributionFamily,
    vertices: &[Vec<f64>],
) -> Result<PolytopeCertificate> {
    let p = family.values();
    if vertices.is_empty() {
        return Err(Error::Precondition("empty vertex list".into()));
    }
    if vertices.iter().any(|v| v.len() != p.len()) {
        return Err(Error::DimensionMismatch(
            "vertex and family tables must share the index space".into(),
        ));
    }
    // rows: one per table entry plus the weight-normalisation row
    let m = p.len() + 1;
    let n = vertices.len();
    let mut a = vec![vec![0.0f64; n]; m];
    let mut b = vec![0.0f64; m];
    for (i, &pi) in p.iter().enumerate() {
        b[i] = pi.max(0.0);
        for (j, v) in vertices.iter().enumerate() {
            a[i][j] = v[i];
        }
    }
    b[m - 1] = 1.0;
    for j in 0..n {
        a[m - 1][j] = 1.0;
    }
    match phase1_feasibility(&a, &b)? {
        Phase1::Feasible(lambda) => {
            let mut residual = 0.0f64;
            for (i, &pi) in p.iter().enumerate() {
                let recon: f64 = vertices
                    .iter()
                    .zip(&lambda)
                    .map(|(v, &l)| v[i] * l)
                    .sum();
                residual = residual.max((recon - pi).abs());
            }
            let mass: f64 = lambda.iter().sum();
            residual = residual.max((mass - 1.0).abs());
            if residual > tol::LP_FEASIBILITY {
                return Err(Error::Indeterminate(format!(
                    "feasible basis reconstructs the family only to {residual:.3e}"
                )));
            }
            let weights = lambda
                .into_iter()
                .enumerate()
                .filter(|(_, l)| *l > 1e-12)
                .collect();
            Ok(PolytopeCertificate::Inside { weights, residual })
        }
        Phase1::Infeasible(dual) => {
            // dual y: y . column <= 0 for every vertex, y . b > 0; the
            // first p.len() components separate in the table coordinates.
            let functional: Vec<f64> = dual[..p.len()].to_vec();
            let offset = dual[p.len()];
            let value: f64 =
                functional.iter().zip(p).map(|(c, v)| c * v).sum::<f64>() + offset;
            let vertex_bound = vertices
                .iter()
                .map(|v| {
                    functional.iter().zip(v).map(|(c, x)| c * x).sum::<f64>() + offset
                })
                .fold(f64::NEG_INFINITY, f64::max);
            let margin = value - vertex_bound;
            if margin <= 0.0 {
                return Err(Error::Indeterminate(format!(
                    "separating functional failed verification (margin {margin:.3e})"
                )));
            }
            Ok(PolytopeCertificate::Outside {
                functional,
                vertex_bound,
                value,
                margin,
            })
        }
    }
}

enum Phase1 {
    Feasible(Vec<f64>),
    Infeasible(Vec<f64>),
}

const PIVOT_TOL: f64 = 1e-11;

/// Phase-1 simplex for `A x = b, x >= 0` with `b >= 0`: minimise the sum of
/// artificial variables with Bland's rule (no cycling) and an iteration
/// cap.
fn phase1_feasibility(a: &[Vec<f64>], b: &[f64]) -> Result<Phase1> {
    let m = b.len();
    let n = a[0].len();
    let width = n + m + 1;
    let mut tab: Vec<Vec<f64>> = Vec::with_capacity(m);
    for i in 0..m {
        let mut row = vec![0.0f64; width];
        row[..n].copy_from_slice(&a[i]);
        row[n + i] = 1.0;
        row[width - 1] = b[i];
        tab.push(row);
    }
    // reduced-cost row: structural j gets -sum_i a_ij, artificials 0
    let mut cost = vec![0.0f64; width];
    for j in 0..n {
        cost[j] = -(0..m).map(|i| tab[i][j]).sum::<f64>();
    }
    cost[width - 1] = -b.iter().sum::<f64>(); // negative current objective
    let mut basis: Vec<usize> = (n..n + m).collect();

    let max_iter = 200 * (n + m);
    for _ in 0..max_iter {
        // Bland: smallest structural index with a negative reduced cost
        let entering = (0..n).find(|&j| cost[j] < -PIVOT_TOL);
        let Some(j) = entering else {
            let objective = -cost[width - 1];
            if objective <= tol::LP_FEASIBILITY {
                let mut x = vec![0.0f64; n];
                for (i, &bj) in basis.iter().enumerate() {
                    if bj < n {
                        x[bj] = tab[i][width - 1];
                    }
                }
                return Ok(Phase1::Feasible(x));
            }
            // dual from the artificial reduced costs: cost[n+i] = 1 - y_i
            // ... maintained as (c_j - z_j) with c_artificial = 1
            let y: Vec<f64> = (0..m).map(|i| -cost[n + i]).collect();
            return Ok(Phase1::Infeasible(y));
        };
        // ratio test, ties by smallest basis label
        let mut pivot_row: Option<usize> = None;
        let mut best = f64::INFINITY;
        for i in 0..m {
            if tab[i][j] > PIVOT_TOL {
                let ratio = tab[i][width - 1] / tab[i][j];
                let better = ratio < best - 1e-15
                    || ((ratio - best).abs() <= 1e-15
                        && pivot_row.is_some_and(|r| basis[i] < basis[r]));
                if better {
                    best = ratio;
                    pivot_row = Some(i);
                }
            }
        }
        let Some(r) = pivot_row else {
            return Err(Error::Indeterminate(
                "phase-1 column unbounded; tableau corrupted".into(),
            ));
        };
        let pivot = tab[r][j];
        for v in tab[r].iter_mut() {
            *v /= pivot;
        }
        for i in 0..m {
            if i != r && tab[i][j].abs() > 0.0 {
                let factor = tab[i][j];
                let (head, tail) = tab.split_at_mut(r.max(i));
                let (row_i, row_r) = if i < r {
                    (&mut head[i], &tail[0])
                } else {
                    (&mut tail[0], &head[r])
                };
                for (vi, vr) in row_i.iter_mut().zip(row_r.iter()) {
                    *vi -= factor * vr;
                }
            }
        }
        let factor = cost[j];
        if factor.abs() > 0.0 {
            for (c, vr) in cost.iter_mut().zip(tab[r].iter()) {
                *c -= factor * vr;
            }
        }
        basis[r] = j;
    }
    Err(Error::Indeterminate(format!(
        "phase-1 simplex exceeded {max_iter} iterations"
    )))
}

/// A linear game: coefficients over the flattened `(x, a)` table and
/// per-setting weights.
#[derive(Clone, Debug)]
pub struct Game {
    pub coefficients: Vec<f64>,
    pub setting_weights: Vec<f64>,
    pub alphabets: Vec<usize>,
    pub settings_sizes: Vec<usize>,
}

impl Game {
    fn check(&self, table_len: usize) -> Result<()> {
        let n_out: usize = self.alphabets.iter().product();
        let n_set: usize = self.settings_sizes.iter().product();
        if self.coefficients.len() != n_out * n_set
            || self.setting_weights.len() != n_set
            || table_len != n_out * n_set
        {
            return Err(Error::DimensionMismatch(
                "game tables must match the distribution index space".into(),
            ));
        }
        Ok(())
    }

    /// `sum_x w(x) sum_a c(a, x) p(a | x)` for a flattened family table.
    pub fn score_table(&self, table: &[f64]) -> Result<f64> {
        self.check(table.len())?;
        let n_out: usize = self.alphabets.iter().product();
        let mut score = 0.0;
        for (xj, w) in self.setting_weights.iter().enumerate() {
            for aj in 0..n_out {
                score += w * self.coefficients[xj * n_out + aj] * table[xj * n_out + aj];
            }
        }
        Ok(score)
    }
}

/// Score of a distribution family under a game.
pub fn game_score(family: &DistributionFamily, game: &Game) -> Result<f64> {
    game.score_table(family.values())
}

/// Largest score any deterministic causal strategy attains (two parties
/// only): the causal bound of the game.
pub fn causal_bound(game: &Game) -> Result<f64> {
    let vertices = enumerate_deterministic(&game.alphabets, &game.settings_sizes)?;
    let mut best = f64::NEG_INFINITY;
    for v in &vertices {
        best = best.max(game.score_table(v)?);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    /// Frozen by the first verified run of the enumeration itself: distinct
    /// deterministic causal families for binary inputs and outputs.
    const BINARY_VERTEX_COUNT: usize = 112;
    /// Frozen causal bound of the neighbour-guess game, attained by
    /// letting the second mover read the first's setting from the history.
    const NEIGHBOUR_GUESS_BOUND: f64 = 0.75;

    #[test]
    fn degenerate_alphabets_give_one_point() {
        let vs = enumerate_deterministic(&[1, 1], &[1, 1]).unwrap();
        assert_eq!(vs.len(), 1);
        assert_eq!(vs[0], vec![1.0]);
    }

    #[test]
    fn binary_vertices_are_deterministic_and_counted() {
        let vs = enumerate_deterministic(&[2, 2], &[2, 2]).unwrap();
        assert_eq!(vs.len(), BINARY_VERTEX_COUNT);
        for v in &vs {
            assert!(v.iter().all(|&p| p == 0.0 || p == 1.0));
            for xj in 0..4 {
                let col: f64 = v[xj * 4..(xj + 1) * 4].iter().sum();
                assert_eq!(col, 1.0);
            }
        }
        // raw strategy count before deduplication
        let raw = enumerate_strategies(&[2, 2], &[2, 2]).unwrap();
        assert_eq!(raw.len(), 2 * 4 * 256);
    }

    #[test]
    fn more_than_two_parties_is_refused() {
        assert!(matches!(
            enumerate_deterministic(&[2, 2, 2], &[2, 2, 2]),
            Err(Error::UnsupportedSize(_))
        ));
    }

    #[test]
    fn vertices_are_inside_with_point_mass() {
        let vs = enumerate_deterministic(&[2, 2], &[2, 2]).unwrap();
        for idx in [0usize, 17, 64, 111] {
            let family = DistributionFamily::new(vec![2, 2], vec![2, 2], vs[idx].clone());
            match membership(&family, &vs).unwrap() {
                PolytopeCertificate::Inside { weights, residual } => {
                    assert!(residual <= tol::LP_FEASIBILITY);
                    let mass: f64 = weights.iter().map(|(_, l)| l).sum();
                    assert!((mass - 1.0).abs() < 1e-9);
                }
                PolytopeCertificate::Outside { .. } => panic!("vertex {idx} outside"),
            }
        }
    }

    #[test]
    fn mixtures_are_inside_and_reconstructed() {
        let vs = enumerate_deterministic(&[2, 2], &[2, 2]).unwrap();
        let mixed: Vec<f64> = vs[3]
            .iter()
            .zip(&vs[90])
            .map(|(a, b)| 0.5 * a + 0.5 * b)
            .collect();
        let family = DistributionFamily::new(vec![2, 2], vec![2, 2], mixed.clone());
        match membership(&family, &vs).unwrap() {
            PolytopeCertificate::Inside { weights, residual } => {
                assert!(residual <= tol::LP_FEASIBILITY);
                // the recovered weights rebuild the family
                let mut recon = vec![0.0f64; 16];
                for (j, l) in &weights {
                    for (r, v) in recon.iter_mut().zip(&vs[*j]) {
                        *r += l * v;
                    }
                }
                for (r, m) in recon.iter().zip(&mixed) {
                    assert!((r - m).abs() <= tol::LP_FEASIBILITY);
                }
            }
            PolytopeCertificate::Outside { .. } => panic!("mixture outside"),
        }
    }

    #[test]
    fn signalling_family_is_outside_with_margin() {
        let vs = enumerate_deterministic(&[2, 2], &[2, 2]).unwrap();
        let family = fixtures::signalling_family();
        match membership(&family, &vs).unwrap() {
            PolytopeCertificate::Outside { margin, value, vertex_bound, .. } => {
                assert!(margin > 1e-6, "margin {margin}");
                assert!(value > vertex_bound);
            }
            PolytopeCertificate::Inside { .. } => panic!("signalling family inside"),
        }
    }

    #[test]
    fn neighbour_guess_scores() {
        let game = fixtures::neighbour_guess_game();
        // all-zero outputs, first mover 1: each guess matches half the
        // uniform setting pairs
        let strategy = DeterministicStrategy {
            first: 1,
            first_outputs: vec![0, 0],
            second_outputs: vec![vec![vec![0, 0]; 2]; 2],
        };
        let table = strategy.family(&[2, 2], &[2, 2]);
        assert!((game.score_table(&table).unwrap() - 0.5).abs() < 1e-12);

        let bound = causal_bound(&game).unwrap();
        assert!((bound - NEIGHBOUR_GUESS_BOUND).abs() < 1e-12, "bound {bound}");
        // the bound is attained by some vertex
        let vs = enumerate_deterministic(&[2, 2], &[2, 2]).unwrap();
        let attained = vs
            .iter()
            .any(|v| (game.score_table(v).unwrap() - bound).abs() < 1e-12);
        assert!(attained);
        // and the two-way signalling family beats it
        let cheat = game_score(&fixtures::signalling_family(), &game).unwrap();
        assert!((cheat - 1.0).abs() < 1e-12);
        assert!(cheat > bound + 1e-6);
    }

    #[test]
    fn extracted_quantum_family_is_inside() {
        use crate::dist::DistributionFamily;
        use crate::exec::quantum_distribution;
        let params =
            fixtures::RandomProtocolParams { n_parties: 2, system_dim: 2, t_steps: 3 };
        let spec = fixtures::random_protocol(&params, 55).unwrap();
        let dists: Vec<_> = spec
            .all_settings()
            .iter()
            .map(|x| quantum_distribution(&spec, x).unwrap())
            .collect();
        let family = DistributionFamily::from_distributions(vec![2, 2], &dists);
        let vs = enumerate_deterministic(&[2, 2], &[2, 2]).unwrap();
        match membership(&family, &vs).unwrap() {
            PolytopeCertificate::Inside { residual, .. } => {
                assert!(residual <= tol::LP_FEASIBILITY);
            }
            PolytopeCertificate::Outside { margin, .. } => {
                panic!("quantum family certified outside (margin {margin})");
            }
        }
    }
}
