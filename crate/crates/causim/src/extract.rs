//! Extraction of a classical causal model from a protocol, and the checks
//! built on top of it.
//!
//! The model assigns, to every history prefix, a next-party distribution
//! (which lab fires at the next stage) and per-party outcome distributions,
//! both read off ratios of history-projected state norms summed over time.
//! Chaining the tables over all orderings reproduces the protocol's outcome
//! statistics exactly; [`verify_theorem1`] checks that equality for every
//! setting vector.
//!
//! Ratios at histories the protocol never reaches are 0/0. Such branches
//! get uniform placeholder rows, flagged as placeholders; they only ever
//! enter the chained distribution with vanishing weight.

use std::collections::HashMap;

use crate::dist::OutcomeDistribution;
use crate::error::{Error, Result};
use crate::exec::{
    norm_tables, quantum_distribution, FiringRecord, History, HistoryEntry, NormTables,
    ProtocolRun,
};
use crate::par;
use crate::protocol::{
    apply_step, apply_v, flag_success_probability, initial_state, leak_for, ProtocolSpec,
    SettingVector,
};
use crate::tensor::CState;
use crate::tol;

/// Norm tables for one (protocol, settings) pair, exposing the two
/// conditional-probability kinds of the causal model.
pub struct Extractor<'a> {
    spec: &'a ProtocolSpec,
    x: SettingVector,
    tables: NormTables,
}

fn clamped_ratio(num: f64, denom: f64) -> (f64, f64) {
    let raw = num / denom;
    let clamped = raw.clamp(0.0, 1.0);
    (clamped, (raw - clamped).abs())
}

impl<'a> Extractor<'a> {
    pub fn new(spec: &'a ProtocolSpec, x: &SettingVector) -> Result<Self> {
        let run = ProtocolRun::new(spec, x)?;
        Ok(Extractor { spec, x: x.clone(), tables: norm_tables(&run) })
    }

    pub fn settings(&self) -> &SettingVector {
        &self.x
    }

    fn check_candidate(&self, history: &History, party: usize) -> Result<()> {
        history.validate(self.spec, &self.x)?;
        if party == 0 || party > self.spec.n_parties() {
            return Err(Error::Precondition(format!("party {party}")));
        }
        if history.contains_party(party) {
            return Err(Error::Precondition(format!(
                "party {party} has already acted in this history"
            )));
        }
        Ok(())
    }

    /// Probability that `party` acts next given the history.
    pub fn prob_next(&self, history: &History, party: usize) -> Result<f64> {
        Ok(self.prob_next_with_excess(history, party)?.0)
    }

    fn prob_next_with_excess(&self, history: &History, party: usize) -> Result<(f64, f64)> {
        self.check_candidate(history, party)?;
        let record = history.firing_record(self.spec.n_parties());
        let denom = self.tables.psi_denominator(&record);
        if denom <= tol::REACHABILITY {
            return Err(Error::UnreachableHistory(format!(
                "next-party denominator {denom:.3e} at {:?}",
                history.entries()
            )));
        }
        Ok(clamped_ratio(self.tables.psi_sum(party, &record), denom))
    }

    /// Probability that `party`, acting next under its setting from the
    /// evaluated vector, records `outcome`.
    pub fn prob_result(&self, history: &History, party: usize, outcome: usize) -> Result<f64> {
        Ok(self.prob_result_with_excess(history, party, outcome)?.0)
    }

    fn prob_result_with_excess(
        &self,
        history: &History,
        party: usize,
        outcome: usize,
    ) -> Result<(f64, f64)> {
        self.check_candidate(history, party)?;
        let alphabet = self.spec.layout().alphabet(party);
        if outcome >= alphabet {
            return Err(Error::OutcomeOutOfRange(format!(
                "outcome {outcome} for party {party}"
            )));
        }
        let record = history.firing_record(self.spec.n_parties());
        let denom = self.tables.phi_denominator(party, &record, alphabet);
        if denom <= tol::REACHABILITY {
            return Err(Error::UnreachableHistory(format!(
                "outcome denominator {denom:.3e} for party {party} at {:?}",
                history.entries()
            )));
        }
        Ok(clamped_ratio(
            self.tables.phi_sum(party, &record.with(party, outcome)),
            denom,
        ))
    }

    fn reachable(&self, history: &History) -> bool {
        let record = history.firing_record(self.spec.n_parties());
        self.tables.psi_denominator(&record) > tol::REACHABILITY
    }
}

/// Convenience wrapper building a one-shot [`Extractor`].
pub fn prob_next(
    spec: &ProtocolSpec,
    x: &SettingVector,
    history: &History,
    party: usize,
) -> Result<f64> {
    Extractor::new(spec, x)?.prob_next(history, party)
}

/// Convenience wrapper building a one-shot [`Extractor`].
pub fn prob_result(
    spec: &ProtocolSpec,
    x: &SettingVector,
    history: &History,
    party: usize,
    outcome: usize,
) -> Result<f64> {
    Extractor::new(spec, x)?.prob_result(history, party, outcome)
}

/// Outcome row of one candidate party at one node.
#[derive(Clone, Debug)]
pub struct ResultRow {
    pub party: usize,
    pub setting: usize,
    pub probs: Vec<f64>,
    pub placeholder: bool,
}

/// Tables at one history prefix.
#[derive(Clone, Debug)]
pub struct ModelNode {
    pub history: History,
    pub reachable: bool,
    /// `(candidate party, probability to act next)`, parties ascending.
    pub next: Vec<(usize, f64)>,
    pub next_placeholder: bool,
    pub results: Vec<ResultRow>,
}

/// The extracted causal model for one setting vector: next-party and
/// outcome tables at every reachable history prefix (depth-first, parties
/// and outcomes ascending), with unreachable frontier nodes kept as flagged
/// uniform placeholders.
#[derive(Clone, Debug)]
pub struct CausalModel {
    n_parties: usize,
    alphabets: Vec<usize>,
    x: Vec<usize>,
    nodes: Vec<ModelNode>,
    index: HashMap<Vec<HistoryEntry>, usize>,
    pub max_clamp_excess: f64,
    pub warnings: Vec<String>,
}

impl CausalModel {
    pub fn n_parties(&self) -> usize {
        self.n_parties
    }

    pub fn alphabets(&self) -> &[usize] {
        &self.alphabets
    }

    pub fn settings(&self) -> &[usize] {
        &self.x
    }

    pub fn nodes(&self) -> &[ModelNode] {
        &self.nodes
    }

    pub fn node(&self, history: &History) -> Option<&ModelNode> {
        self.index.get(history.entries()).map(|&i| &self.nodes[i])
    }

    pub fn is_reachable(&self, history: &History) -> bool {
        self.node(history).is_some_and(|n| n.reachable)
    }

    pub fn next_prob(&self, history: &History, party: usize) -> Option<f64> {
        self.node(history)?
            .next
            .iter()
            .find(|(l, _)| *l == party)
            .map(|(_, p)| *p)
    }

    pub fn result_prob(&self, history: &History, party: usize, outcome: usize) -> Option<f64> {
        self.node(history)?
            .results
            .iter()
            .find(|r| r.party == party)
            .and_then(|r| r.probs.get(outcome).copied())
    }
}

/// Build the causal model for one setting vector. The protocol must be
/// valid at `x` (flag leakage within tolerance).
pub fn extract_causal_model(spec: &ProtocolSpec, x: &SettingVector) -> Result<CausalModel> {
    let leak = leak_for(spec, x)?;
    if leak > tol::DISTRIBUTION {
        return Err(Error::InvalidProtocol {
            leak,
            tol: tol::DISTRIBUTION,
            detail: format!("settings {:?}", x.values()),
        });
    }
    let extractor = Extractor::new(spec, x)?;
    let n = spec.n_parties();
    let mut model = CausalModel {
        n_parties: n,
        alphabets: spec.layout().alphabets().to_vec(),
        x: x.values().to_vec(),
        nodes: Vec::new(),
        index: HashMap::new(),
        max_clamp_excess: 0.0,
        warnings: Vec::new(),
    };
    build_nodes(spec, &extractor, &History::empty(), &mut model)?;
    if model.max_clamp_excess > tol::CLAMP_WARNING {
        model.warnings.push(format!(
            "probability clamping exceeded {:.1e} (worst {:.3e})",
            tol::CLAMP_WARNING,
            model.max_clamp_excess
        ));
    }
    Ok(model)
}

fn build_nodes(
    spec: &ProtocolSpec,
    extractor: &Extractor,
    history: &History,
    model: &mut CausalModel,
) -> Result<()> {
    let n = spec.n_parties();
    if history.len() == n {
        return Ok(());
    }
    let candidates: Vec<usize> =
        (1..=n).filter(|l| !history.contains_party(*l)).collect();
    let reachable = extractor.reachable(history);
    let mut next = Vec::with_capacity(candidates.len());
    let mut results = Vec::with_capacity(candidates.len());
    for &l in &candidates {
        let alphabet = spec.layout().alphabet(l);
        if reachable {
            let (p, excess) = extractor.prob_next_with_excess(history, l)?;
            model.max_clamp_excess = model.max_clamp_excess.max(excess);
            next.push((l, p));
            match extractor.prob_result_with_excess(history, l, 0) {
                Ok(_) => {
                    let mut probs = Vec::with_capacity(alphabet);
                    for a in 0..alphabet {
                        let (p, excess) = extractor.prob_result_with_excess(history, l, a)?;
                        model.max_clamp_excess = model.max_clamp_excess.max(excess);
                        probs.push(p);
                    }
                    results.push(ResultRow {
                        party: l,
                        setting: extractor.settings().of(l),
                        probs,
                        placeholder: false,
                    });
                }
                Err(Error::UnreachableHistory(_)) => {
                    results.push(ResultRow {
                        party: l,
                        setting: extractor.settings().of(l),
                        probs: vec![1.0 / alphabet as f64; alphabet],
                        placeholder: true,
                    });
                }
                Err(e) => return Err(e),
            }
        } else {
            next.push((l, 1.0 / candidates.len() as f64));
            results.push(ResultRow {
                party: l,
                setting: extractor.settings().of(l),
                probs: vec![1.0 / alphabet as f64; alphabet],
                placeholder: true,
            });
        }
    }
    let node = ModelNode {
        history: history.clone(),
        reachable,
        next,
        next_placeholder: !reachable,
        results,
    };
    model.index.insert(history.entries().to_vec(), model.nodes.len());
    model.nodes.push(node);
    if !reachable {
        // placeholder frontier: the subtree only ever carries zero weight
        return Ok(());
    }
    for &l in &candidates {
        for a in 0..spec.layout().alphabet(l) {
            let child = history.extended(HistoryEntry::new(
                l,
                a,
                extractor.settings().of(l),
            ))?;
            build_nodes(spec, extractor, &child, model)?;
        }
    }
    Ok(())
}

/// Chain the model tables over every ordering (the causal-model sum) into
/// an outcome distribution.
pub fn causal_distribution(model: &CausalModel) -> OutcomeDistribution {
    let mut dist = OutcomeDistribution::zeros(model.alphabets.to_vec());
    let record = FiringRecord::empty(model.n_parties);
    walk_model(model, &History::empty(), &record, 1.0, &mut dist);
    dist
}

fn walk_model(
    model: &CausalModel,
    history: &History,
    record: &FiringRecord,
    weight: f64,
    dist: &mut OutcomeDistribution,
) {
    if weight == 0.0 {
        return;
    }
    if history.len() == model.n_parties {
        let outcomes: Vec<usize> =
            (1..=model.n_parties).map(|l| record.fired(l).unwrap()).collect();
        let idx = dist.index_of(&outcomes).expect("complete record");
        dist.add_at(idx, weight);
        return;
    }
    match model.node(history) {
        Some(node) => {
            for &(l, p_next) in &node.next {
                let row = node
                    .results
                    .iter()
                    .find(|r| r.party == l)
                    .expect("row per candidate");
                for (a, &p_out) in row.probs.iter().enumerate() {
                    let child = history
                        .extended(HistoryEntry::new(l, a, row.setting))
                        .expect("candidate not in history");
                    walk_model(
                        model,
                        &child,
                        &record.with(l, a),
                        weight * p_next * p_out,
                        dist,
                    );
                }
            }
        }
        None => {
            // below a placeholder frontier: complete uniformly
            let candidates: Vec<usize> = (1..=model.n_parties)
                .filter(|l| !history.contains_party(*l))
                .collect();
            let p_next = 1.0 / candidates.len() as f64;
            for l in candidates {
                let alphabet = model.alphabets[l - 1];
                let p_out = 1.0 / alphabet as f64;
                for a in 0..alphabet {
                    let child = history
                        .extended(HistoryEntry::new(l, a, model.x[l - 1]))
                        .expect("candidate not in history");
                    walk_model(model, &child, &record.with(l, a), weight * p_next * p_out, dist);
                }
            }
        }
    }
}

/// Per-setting outcome of the equality check.
#[derive(Clone, Debug)]
pub struct SettingDeviation {
    pub x: Vec<usize>,
    pub max_deviation: f64,
}

/// Result of checking that the extracted model reproduces the protocol's
/// statistics at every setting vector.
#[derive(Clone, Debug)]
pub struct TheoremReport {
    pub per_setting: Vec<SettingDeviation>,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Settings-domain size above which [`verify_theorem1`] asks for the
/// explicit unbounded call.
pub const MAX_SETTINGS_SWEEP: usize = 4096;

/// Extract a model per setting vector and compare its chained distribution
/// against the protocol's, reporting the worst deviation.
pub fn verify_theorem1(spec: &ProtocolSpec) -> Result<TheoremReport> {
    if spec.settings_count() > MAX_SETTINGS_SWEEP {
        return Err(Error::UnsupportedSize(format!(
            "{} joint settings exceed the sweep guard of {MAX_SETTINGS_SWEEP}; \
             call verify_theorem1_unbounded to override",
            spec.settings_count()
        )));
    }
    verify_theorem1_unbounded(spec)
}

/// [`verify_theorem1`] without the settings-domain size guard.
pub fn verify_theorem1_unbounded(spec: &ProtocolSpec) -> Result<TheoremReport> {
    let all = spec.all_settings();
    let deviations = par::map_slice(&all, |x| -> Result<SettingDeviation> {
        let model = extract_causal_model(spec, x)?;
        let causal = causal_distribution(&model);
        let quantum = quantum_distribution(spec, x)?;
        Ok(SettingDeviation {
            x: x.values().to_vec(),
            max_deviation: causal.max_abs_diff(&quantum),
        })
    });
    let mut per_setting = Vec::with_capacity(all.len());
    let mut max_deviation = 0.0f64;
    for d in deviations {
        let d = d?;
        max_deviation = max_deviation.max(d.max_deviation);
        per_setting.push(d);
    }
    Ok(TheoremReport {
        per_setting,
        max_deviation,
        tolerance: tol::DISTRIBUTION,
        pass: max_deviation <= tol::DISTRIBUTION,
    })
}

/// Compare next-party and outcome probabilities at `history` under two
/// setting vectors that agree on every party inside the history. Outcome
/// probabilities are compared with the candidate party's own setting pinned
/// to its value under `x`, so any deviation signals dependence on a setting
/// outside the causal past.
pub fn check_history_locality(
    spec: &ProtocolSpec,
    x: &SettingVector,
    x_alt: &SettingVector,
    history: &History,
) -> Result<f64> {
    for e in history.entries() {
        if x.of(e.party) != x_alt.of(e.party) {
            return Err(Error::Precondition(format!(
                "setting vectors disagree on party {} inside the history",
                e.party
            )));
        }
    }
    history.validate(spec, x)?;
    let base = Extractor::new(spec, x)?;
    let alt = Extractor::new(spec, x_alt)?;
    locality_deviation(spec, &base, &alt, history)
}

fn locality_deviation(
    spec: &ProtocolSpec,
    base: &Extractor,
    alt: &Extractor,
    history: &History,
) -> Result<f64> {
    let n = spec.n_parties();
    let mut worst = 0.0f64;
    let alt_history = remap_history(history, alt.settings());
    for l in (1..=n).filter(|l| !history.contains_party(*l)) {
        let a_next = base.prob_next(history, l);
        let b_next = alt.prob_next(&alt_history, l);
        worst = worst.max(compare_probs(a_next, b_next));
        // outcome rows under the candidate's own setting pinned to x's value
        let pinned = alt.settings().with(spec, l, base.settings().of(l))?;
        let pinned_extractor = Extractor::new(spec, &pinned)?;
        let pinned_history = remap_history(history, &pinned);
        for a in 0..spec.layout().alphabet(l) {
            let pa = base.prob_result(history, l, a);
            let pb = pinned_extractor.prob_result(&pinned_history, l, a);
            worst = worst.max(compare_probs(pa, pb));
        }
    }
    Ok(worst)
}

/// Same recorded parties and outcomes, settings re-read from `x` (they
/// agree on history parties by precondition).
fn remap_history(history: &History, x: &SettingVector) -> History {
    History::new(
        history
            .entries()
            .iter()
            .map(|e| HistoryEntry::new(e.party, e.outcome, x.of(e.party)))
            .collect(),
    )
    .expect("history stays well-formed")
}

fn compare_probs(a: Result<f64>, b: Result<f64>) -> f64 {
    match (a, b) {
        (Ok(pa), Ok(pb)) => (pa - pb).abs(),
        (Err(Error::UnreachableHistory(_)), Err(Error::UnreachableHistory(_))) => 0.0,
        // reachability itself depended on an outside setting
        _ => 1.0,
    }
}

/// Exhaustive locality sweep: every reachable history prefix of every
/// setting vector against every admissible alternative vector. Returns the
/// worst deviation.
pub fn history_locality_sweep(spec: &ProtocolSpec) -> Result<f64> {
    let all = spec.all_settings();
    let mut extractors: HashMap<Vec<usize>, Extractor> = HashMap::new();
    for x in &all {
        extractors.insert(x.values().to_vec(), Extractor::new(spec, x)?);
    }
    let mut worst = 0.0f64;
    for x in &all {
        let model = extract_causal_model(spec, x)?;
        for node in model.nodes() {
            if !node.reachable {
                continue;
            }
            let history = &node.history;
            for x_alt in &all {
                if history.entries().iter().any(|e| x.of(e.party) != x_alt.of(e.party)) {
                    continue;
                }
                let base = &extractors[&x.values().to_vec()];
                let alt = &extractors[&x_alt.values().to_vec()];
                let alt_history = remap_history(history, alt.settings());
                let n = spec.n_parties();
                for l in (1..=n).filter(|l| !history.contains_party(*l)) {
                    let d = compare_probs(
                        base.prob_next(history, l),
                        alt.prob_next(&alt_history, l),
                    );
                    worst = worst.max(d);
                    let pinned = x_alt.with(spec, l, x.of(l))?;
                    let pinned_extractor = extractors
                        .get(&pinned.values().to_vec())
                        .expect("full settings domain");
                    let pinned_history = remap_history(history, &pinned);
                    for a in 0..spec.layout().alphabet(l) {
                        let d = compare_probs(
                            base.prob_result(history, l, a),
                            pinned_extractor.prob_result(&pinned_history, l, a),
                        );
                        worst = worst.max(d);
                    }
                }
            }
        }
    }
    Ok(worst)
}

/// Guard against pathological branch growth in the dephased evolution.
const MAX_DEPHASED_BRANCHES: usize = 4096;

/// The distribution obtained when the control is fully dephased after every
/// step unitary: a classical mixture over control readings, with no
/// interference between causal orders. For order-superposing protocols this
/// differs from the coherent statistics.
pub fn naive_mixture_distribution(
    spec: &ProtocolSpec,
    x: &SettingVector,
) -> Result<OutcomeDistribution> {
    let leak = leak_for(spec, x)?;
    if leak > tol::DISTRIBUTION {
        return Err(Error::InvalidProtocol {
            leak,
            tol: tol::DISTRIBUTION,
            detail: format!("settings {:?}", x.values()),
        });
    }
    let layout = spec.layout();
    let mut branches: Vec<CState> = vec![initial_state(layout)];
    for t in 1..=spec.t_steps() {
        let mut next: Vec<CState> = Vec::with_capacity(branches.len());
        for b in &branches {
            let stepped = apply_step(spec, t, b)?;
            for lvl in 0..layout.control_dim() {
                let comp = crate::exec::project_control(layout, lvl, &stepped);
                if comp.norm_sqr() > 1e-24 {
                    next.push(comp);
                }
            }
        }
        if next.len() > MAX_DEPHASED_BRANCHES {
            return Err(Error::CapacityExceeded(format!(
                "dephased evolution grew to {} branches",
                next.len()
            )));
        }
        branches = next
            .iter()
            .map(|b| apply_v(spec, x, b))
            .collect::<Result<Vec<_>>>()?;
    }
    let mut dist = OutcomeDistribution::zeros(layout.alphabets().to_vec());
    for b in &branches {
        let part = crate::exec::distribution_of_state(layout, b);
        for (i, p) in part.probs().iter().enumerate() {
            dist.add_at(i, *p);
        }
    }
    Ok(dist)
}

/// Success probability of the flag requirement under the dephased
/// evolution (used by tests; trace preservation keeps the distribution
/// normalised regardless).
pub fn naive_mixture_flag_success(spec: &ProtocolSpec, x: &SettingVector) -> Result<f64> {
    let layout = spec.layout();
    let mut branches: Vec<CState> = vec![initial_state(layout)];
    for t in 1..=spec.t_steps() {
        let mut next: Vec<CState> = Vec::new();
        for b in &branches {
            let stepped = apply_step(spec, t, b)?;
            for lvl in 0..layout.control_dim() {
                let comp = crate::exec::project_control(layout, lvl, &stepped);
                if comp.norm_sqr() > 1e-24 {
                    next.push(comp);
                }
            }
        }
        branches = next
            .iter()
            .map(|b| apply_v(spec, x, b))
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(branches
        .iter()
        .map(|b| flag_success_probability(layout, b))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn switch() -> (ProtocolSpec, SettingVector) {
        let spec = fixtures::switch_protocol();
        let x = SettingVector::new(&spec, vec![0, 1, 1]).unwrap();
        (spec, x)
    }

    fn h(entries: &[(usize, usize, usize)]) -> History {
        History::new(
            entries
                .iter()
                .map(|&(l, a, s)| HistoryEntry::new(l, a, s))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn switch_next_party_probabilities() {
        let (spec, x) = switch();
        let ex = Extractor::new(&spec, &x).unwrap();
        let h0 = History::empty();
        assert!((ex.prob_next(&h0, 1).unwrap() - 0.5).abs() < 1e-10);
        assert!((ex.prob_next(&h0, 2).unwrap() - 0.5).abs() < 1e-10);
        assert!(ex.prob_next(&h0, 3).unwrap() < 1e-12);
        assert!((ex.prob_next(&h(&[(1, 0, 0)]), 2).unwrap() - 1.0).abs() < 1e-10);
        assert!((ex.prob_next(&h(&[(2, 0, 1)]), 1).unwrap() - 1.0).abs() < 1e-10);
        assert!(
            (ex.prob_next(&h(&[(1, 0, 0), (2, 0, 1)]), 3).unwrap() - 1.0).abs() < 1e-10
        );
        assert!(
            (ex.prob_next(&h(&[(2, 0, 1), (1, 0, 0)]), 3).unwrap() - 1.0).abs() < 1e-10
        );
    }

    #[test]
    fn switch_outcome_probabilities() {
        let (spec, x) = switch();
        let ex = Extractor::new(&spec, &x).unwrap();
        let h0 = History::empty();
        assert!((ex.prob_result(&h0, 1, 0).unwrap() - 1.0).abs() < 1e-10);
        assert!((ex.prob_result(&h0, 2, 0).unwrap() - 0.5).abs() < 1e-10);
        assert!((ex.prob_result(&h(&[(1, 0, 0)]), 2, 0).unwrap() - 0.5).abs() < 1e-10);
        assert!((ex.prob_result(&h(&[(2, 0, 1)]), 1, 0).unwrap() - 0.5).abs() < 1e-10);
        let one_way = ex.prob_result(&h(&[(1, 0, 0), (2, 0, 1)]), 3, 0).unwrap();
        let other_way = ex.prob_result(&h(&[(2, 0, 1), (1, 0, 0)]), 3, 0).unwrap();
        assert!((one_way - 5.0 / 6.0).abs() < 1e-10);
        assert!((other_way - 5.0 / 6.0).abs() < 1e-10);
        // ordering of the conditioning history cannot matter
        assert!((one_way - other_way).abs() < 1e-12);
    }

    #[test]
    fn row_sums_are_one_on_reachable_branches() {
        let (spec, x) = switch();
        let ex = Extractor::new(&spec, &x).unwrap();
        let h0 = History::empty();
        let next_sum: f64 = (1..=3).map(|l| ex.prob_next(&h0, l).unwrap()).sum();
        assert!((next_sum - 1.0).abs() < 1e-10);
        let out_sum: f64 = (0..2).map(|a| ex.prob_result(&h0, 2, a).unwrap()).sum();
        assert!((out_sum - 1.0).abs() < 1e-10);
    }

    #[test]
    fn unreachable_branches_signal_rather_than_divide() {
        let (spec, x) = switch();
        let ex = Extractor::new(&spec, &x).unwrap();
        // Charlie never acts first
        let bad = h(&[(3, 0, 1)]);
        assert!(matches!(
            ex.prob_next(&bad, 1),
            Err(Error::UnreachableHistory(_))
        ));
        assert!(matches!(
            ex.prob_result(&bad, 1, 0),
            Err(Error::UnreachableHistory(_))
        ));
    }

    #[test]
    fn extractor_rejects_bad_candidates() {
        let (spec, x) = switch();
        let ex = Extractor::new(&spec, &x).unwrap();
        let h1 = h(&[(1, 0, 0)]);
        assert!(matches!(ex.prob_next(&h1, 1), Err(Error::Precondition(_))));
        assert!(matches!(ex.prob_next(&h1, 0), Err(Error::Precondition(_))));
        assert!(matches!(
            ex.prob_result(&History::empty(), 1, 9),
            Err(Error::OutcomeOutOfRange(_))
        ));
    }

    #[test]
    fn switch_model_contains_the_reference_tables() {
        let (spec, x) = switch();
        let model = extract_causal_model(&spec, &x).unwrap();
        for r in fixtures::switch_reference_values() {
            let history = h(&r.history);
            let got = match r.outcome {
                None => model.next_prob(&history, r.party),
                Some(a) => model.result_prob(&history, r.party, a),
            }
            .expect("reference node present");
            assert!(
                (got - r.expected).abs() < 1e-10,
                "history {:?} party {} outcome {:?}: got {got}, expected {}",
                r.history,
                r.party,
                r.outcome,
                r.expected
            );
        }
        assert!(model.warnings.is_empty());
    }

    #[test]
    fn single_party_model_is_the_party_statistics() {
        let spec = fixtures::trivial_single_party();
        for (setting, expect0) in [(0usize, 1.0f64), (1, 0.5)] {
            let x = SettingVector::new(&spec, vec![setting]).unwrap();
            let model = extract_causal_model(&spec, &x).unwrap();
            let h0 = History::empty();
            assert!((model.next_prob(&h0, 1).unwrap() - 1.0).abs() < 1e-12);
            assert!((model.result_prob(&h0, 1, 0).unwrap() - expect0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_model_rows_normalise() {
        let spec = fixtures::random_protocol(
            &fixtures::RandomProtocolParams { n_parties: 2, system_dim: 3, t_steps: 3 },
            31,
        )
        .unwrap();
        let x = SettingVector::new(&spec, vec![1, 0]).unwrap();
        let model = extract_causal_model(&spec, &x).unwrap();
        for node in model.nodes() {
            let next_sum: f64 = node.next.iter().map(|(_, p)| p).sum();
            assert!((next_sum - 1.0).abs() < tol::TABLE_ROW, "node {:?}", node.history);
            for row in &node.results {
                let s: f64 = row.probs.iter().sum();
                assert!((s - 1.0).abs() < tol::TABLE_ROW);
                assert!(row.probs.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }

    #[test]
    fn switch_causal_distribution_reproduces_quantum() {
        let (spec, x) = switch();
        let model = extract_causal_model(&spec, &x).unwrap();
        let causal = causal_distribution(&model);
        assert!((causal.prob(&[0, 0, 0]).unwrap() - 5.0 / 16.0).abs() < 1e-10);
        assert!((causal.total() - 1.0).abs() < 1e-9);
        let quantum = quantum_distribution(&spec, &x).unwrap();
        assert!(causal.max_abs_diff(&quantum) < 1e-10);
    }

    #[test]
    fn chained_product_structure_matches_hand_computation() {
        // two orderings contribute to p(0,0,0):
        //   1/2 * 1 * 1 * 1/2 * 1 * 5/6  +  1/2 * 1/2 * 1 * 1/2 * 1 * 5/6
        let (spec, x) = switch();
        let model = extract_causal_model(&spec, &x).unwrap();
        let h0 = History::empty();
        let h1a = h(&[(1, 0, 0)]);
        let h1b = h(&[(2, 0, 1)]);
        let h2a = h(&[(1, 0, 0), (2, 0, 1)]);
        let h2b = h(&[(2, 0, 1), (1, 0, 0)]);
        let path_a = model.next_prob(&h0, 1).unwrap()
            * model.result_prob(&h0, 1, 0).unwrap()
            * model.next_prob(&h1a, 2).unwrap()
            * model.result_prob(&h1a, 2, 0).unwrap()
            * model.next_prob(&h2a, 3).unwrap()
            * model.result_prob(&h2a, 3, 0).unwrap();
        let path_b = model.next_prob(&h0, 2).unwrap()
            * model.result_prob(&h0, 2, 0).unwrap()
            * model.next_prob(&h1b, 1).unwrap()
            * model.result_prob(&h1b, 1, 0).unwrap()
            * model.next_prob(&h2b, 3).unwrap()
            * model.result_prob(&h2b, 3, 0).unwrap();
        assert!((path_a + path_b - 5.0 / 16.0).abs() < 1e-10);
    }

    #[test]
    fn deterministic_model_gives_point_distribution() {
        let spec = fixtures::trivial_single_party();
        let x = SettingVector::new(&spec, vec![0]).unwrap();
        let model = extract_causal_model(&spec, &x).unwrap();
        let dist = causal_distribution(&model);
        assert!((dist.prob(&[0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(dist.prob(&[1]).unwrap() < 1e-12);
    }

    #[test]
    fn theorem_equality_on_switch_and_trivial_specs() {
        let report = verify_theorem1(&fixtures::switch_protocol()).unwrap();
        assert!(report.pass);
        assert!(report.max_deviation <= 1e-10, "dev {}", report.max_deviation);
        assert_eq!(report.per_setting.len(), 8);

        let report = verify_theorem1(&fixtures::trivial_single_party()).unwrap();
        assert!(report.max_deviation <= 1e-12);
    }

    #[test]
    fn theorem_equality_on_random_specs() {
        for seed in [2u64, 9] {
            let spec = fixtures::random_protocol(
                &fixtures::RandomProtocolParams { n_parties: 3, system_dim: 2, t_steps: 5 },
                seed,
            )
            .unwrap();
            let report = verify_theorem1(&spec).unwrap();
            assert!(report.pass, "seed {seed}: {}", report.max_deviation);
        }
    }

    #[test]
    fn locality_on_the_switch() {
        let (spec, x) = switch();
        let x_alt = SettingVector::new(&spec, vec![1, 0, 0]).unwrap();
        let dev = check_history_locality(&spec, &x, &x_alt, &History::empty()).unwrap();
        assert!(dev <= 1e-10, "deviation {dev}");
        // full history: nothing varies
        let full = h(&[(1, 0, 0), (2, 0, 1), (3, 0, 1)]);
        let same = SettingVector::new(&spec, vec![0, 1, 1]).unwrap();
        let dev = check_history_locality(&spec, &x, &same, &full).unwrap();
        assert_eq!(dev, 0.0);
        // disagreement inside the history is a precondition error
        let bad = SettingVector::new(&spec, vec![1, 1, 1]).unwrap();
        assert!(matches!(
            check_history_locality(&spec, &x, &bad, &h(&[(1, 0, 0)])),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn locality_sweep_on_a_random_spec() {
        let spec = fixtures::random_protocol(
            &fixtures::RandomProtocolParams { n_parties: 2, system_dim: 2, t_steps: 3 },
            41,
        )
        .unwrap();
        let dev = history_locality_sweep(&spec).unwrap();
        assert!(dev <= 1e-10, "deviation {dev}");
    }

    #[test]
    fn naive_mixture_on_the_switch() {
        let (spec, x) = switch();
        let nc = naive_mixture_distribution(&spec, &x).unwrap();
        assert!((nc.prob(&[0, 0, 0]).unwrap() - 3.0 / 16.0).abs() < 1e-10);
        assert!((nc.total() - 1.0).abs() < 1e-9);
        let quantum = quantum_distribution(&spec, &x).unwrap();
        let gap = quantum.prob(&[0, 0, 0]).unwrap() - nc.prob(&[0, 0, 0]).unwrap();
        assert!((gap - 2.0 / 16.0).abs() < 1e-10);
        assert!((naive_mixture_flag_success(&spec, &x).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn naive_mixture_is_idle_without_control_superpositions() {
        let spec = fixtures::random_sequential_protocol(
            &fixtures::RandomProtocolParams { n_parties: 3, system_dim: 2, t_steps: 4 },
            13,
        )
        .unwrap();
        for x in spec.all_settings() {
            let nc = naive_mixture_distribution(&spec, &x).unwrap();
            let q = quantum_distribution(&spec, &x).unwrap();
            assert!(nc.max_abs_diff(&q) < 1e-10);
        }
    }
}
