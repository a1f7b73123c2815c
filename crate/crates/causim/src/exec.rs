//! Protocol execution: the total evolution, outcome distributions, and the
//! history-projected intermediate states that drive the causal extraction.
//!
//! A [`ProtocolRun`] performs one forward sweep for a fixed setting vector
//! and caches the state after every step unitary (`pre`, about to be
//! measured) and after every activation (`post`, just measured). All
//! history-projected states are projections of these cached states, and
//! their squared norms for *every* history at once are collected by a
//! single classification pass per step ([`NormTables`]).

use std::collections::HashMap;

use crate::dist::OutcomeDistribution;
use crate::error::{Error, Result};
use crate::protocol::{
    apply_step, apply_v, build_v, evolve, flag_success_probability, initial_state,
    ProtocolSpec, SettingVector, SpaceLayout,
};
use crate::tensor::{embed, kron_all, COperator, CState, ONE, ZERO};
use crate::tol;

/// One measured step of a history: who acted, what they saw, and under
/// which setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct HistoryEntry {
    pub party: usize,
    pub outcome: usize,
    pub setting: usize,
}

impl HistoryEntry {
    pub fn new(party: usize, outcome: usize, setting: usize) -> Self {
        HistoryEntry { party, outcome, setting }
    }
}

/// An ordered list of measurement records; each party appears at most once.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct History {
    entries: Vec<HistoryEntry>,
}

impl History {
    pub fn empty() -> Self {
        History { entries: Vec::new() }
    }

    pub fn new(entries: Vec<HistoryEntry>) -> Result<Self> {
        let mut seen = Vec::new();
        for e in &entries {
            if e.party == 0 {
                return Err(Error::InvalidHistory("party labels are 1-based".into()));
            }
            if seen.contains(&e.party) {
                return Err(Error::InvalidHistory(format!(
                    "party {} appears twice",
                    e.party
                )));
            }
            seen.push(e.party);
        }
        Ok(History { entries })
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains_party(&self, party: usize) -> bool {
        self.entries.iter().any(|e| e.party == party)
    }

    /// Parties that have acted, in action order.
    pub fn acted(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.party)
    }

    pub fn extended(&self, entry: HistoryEntry) -> Result<Self> {
        let mut entries = self.entries.clone();
        entries.push(entry);
        History::new(entries)
    }

    /// Split off the last entry.
    pub fn parent(&self) -> Option<(History, HistoryEntry)> {
        let mut entries = self.entries.clone();
        let last = entries.pop()?;
        Some((History { entries }, last))
    }

    /// Per-party record of what has fired, forgetting the order.
    pub fn firing_record(&self, n_parties: usize) -> FiringRecord {
        let mut rec = FiringRecord::empty(n_parties);
        for e in &self.entries {
            rec.0[e.party - 1] = Some(e.outcome);
        }
        rec
    }

    /// Check parties, outcomes and settings against a spec (settings must
    /// also agree with the given setting vector, since the projected
    /// states are evaluated under it).
    pub fn validate(&self, spec: &ProtocolSpec, x: &SettingVector) -> Result<()> {
        let n = spec.n_parties();
        if self.len() > n {
            return Err(Error::InvalidHistory(format!(
                "history of length {} for {n} parties",
                self.len()
            )));
        }
        for e in &self.entries {
            if e.party > n {
                return Err(Error::InvalidHistory(format!("party {} of {n}", e.party)));
            }
            if e.outcome >= spec.layout().alphabet(e.party) {
                return Err(Error::OutcomeOutOfRange(format!(
                    "outcome {} for party {}",
                    e.outcome, e.party
                )));
            }
            if e.setting != x.of(e.party) {
                return Err(Error::InvalidHistory(format!(
                    "history setting {} for party {} disagrees with the evaluated settings",
                    e.setting, e.party
                )));
            }
        }
        Ok(())
    }
}

/// The order-free content of a history: for each party, the outcome it has
/// recorded, or `None` if it has not fired. Projected-state norms depend on
/// histories only through this record.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FiringRecord(Vec<Option<usize>>);

impl FiringRecord {
    pub fn empty(n_parties: usize) -> Self {
        FiringRecord(vec![None; n_parties])
    }

    /// Classify a basis index: `None` if any flag sits outside {0, 1}.
    pub fn of_index(layout: &SpaceLayout, index: usize) -> Option<Self> {
        let n = layout.n_parties();
        let mut rec = FiringRecord::empty(n);
        for l in 1..=n {
            match layout.flag_value(index, l) {
                0 => {}
                1 => rec.0[l - 1] = Some(layout.result_value(index, l)),
                _ => return None,
            }
        }
        Some(rec)
    }

    pub fn n_parties(&self) -> usize {
        self.0.len()
    }

    pub fn fired(&self, party: usize) -> Option<usize> {
        self.0[party - 1]
    }

    pub fn with(&self, party: usize, outcome: usize) -> Self {
        let mut rec = self.clone();
        rec.0[party - 1] = Some(outcome);
        rec
    }

    pub fn without(&self, party: usize) -> Self {
        let mut rec = self.clone();
        rec.0[party - 1] = None;
        rec
    }

    pub fn fired_parties(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.map(|_| i + 1))
    }

    pub fn unfired_parties(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, o)| if o.is_none() { Some(i + 1) } else { None })
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|o| o.is_some()).count()
    }

    /// A canonical ordered history carrying this content: fired parties in
    /// ascending order, with `last` (if given) moved to the end.
    pub fn canonical_history(&self, x: &SettingVector, last: Option<usize>) -> History {
        let mut entries: Vec<HistoryEntry> = self
            .fired_parties()
            .filter(|&l| Some(l) != last)
            .map(|l| HistoryEntry::new(l, self.fired(l).unwrap(), x.of(l)))
            .collect();
        if let Some(l) = last {
            entries.push(HistoryEntry::new(l, self.fired(l).unwrap(), x.of(l)));
        }
        History { entries }
    }
}

/// Every firing record over the given alphabets (all subsets of parties
/// with all outcome assignments), in a deterministic order.
pub fn all_firing_records(alphabets: &[usize]) -> Vec<FiringRecord> {
    let mut out = vec![FiringRecord::empty(alphabets.len())];
    for (l0, &a) in alphabets.iter().enumerate() {
        let mut next = Vec::with_capacity(out.len() * (a + 1));
        for rec in &out {
            next.push(rec.clone());
            for outcome in 0..a {
                next.push(rec.with(l0 + 1, outcome));
            }
        }
        out = next;
    }
    out
}

/// A forward sweep of one protocol at fixed settings, caching the state
/// before and after every activation step.
pub struct ProtocolRun<'a> {
    spec: &'a ProtocolSpec,
    x: SettingVector,
    pre: Vec<CState>,
    post: Vec<CState>,
}

impl<'a> ProtocolRun<'a> {
    pub fn new(spec: &'a ProtocolSpec, x: &SettingVector) -> Result<Self> {
        let mut pre = Vec::with_capacity(spec.t_steps());
        let mut post = Vec::with_capacity(spec.t_steps());
        let mut state = initial_state(spec.layout());
        for t in 1..=spec.t_steps() {
            state = apply_step(spec, t, &state)?;
            pre.push(state.clone());
            state = apply_v(spec, x, &state)?;
            post.push(state.clone());
        }
        Ok(ProtocolRun { spec, x: x.clone(), pre, post })
    }

    pub fn spec(&self) -> &ProtocolSpec {
        self.spec
    }

    pub fn settings(&self) -> &SettingVector {
        &self.x
    }

    pub fn t_steps(&self) -> usize {
        self.spec.t_steps()
    }

    /// State after the step unitary of step `t`, before its activation.
    pub fn pre_measurement(&self, t: usize) -> &CState {
        &self.pre[t - 1]
    }

    /// State after the activation of step `t`.
    pub fn post_measurement(&self, t: usize) -> &CState {
        &self.post[t - 1]
    }

    pub fn final_state(&self) -> &CState {
        &self.post[self.post.len() - 1]
    }

    pub fn leak(&self) -> f64 {
        1.0 - flag_success_probability(self.spec.layout(), self.final_state())
    }

    /// Apply the remaining evolution after a pre-measurement state at step
    /// `t`: the step-`t` activation, then every later step.
    fn tail_after_pre(&self, t: usize, state: &CState) -> Result<CState> {
        let mut s = apply_v(self.spec, &self.x, state)?;
        for tau in (t + 1)..=self.t_steps() {
            s = apply_step(self.spec, tau, &s)?;
            s = apply_v(self.spec, &self.x, &s)?;
        }
        Ok(s)
    }

    /// Apply the remaining evolution after a post-measurement state at
    /// step `t`.
    fn tail_after_post(&self, t: usize, state: &CState) -> Result<CState> {
        let mut s = state.clone();
        for tau in (t + 1)..=self.t_steps() {
            s = apply_step(self.spec, tau, &s)?;
            s = apply_v(self.spec, &self.x, &s)?;
        }
        Ok(s)
    }
}

/// Which stage of its life a projected state is in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateKind {
    /// About to be measured (projected after a step unitary).
    Psi,
    /// Just measured (projected after an activation).
    Phi,
    /// A `Psi` state evolved to the end of the protocol.
    PsiBar,
    /// A `Phi` state evolved to the end of the protocol.
    PhiBar,
}

/// An (un-normalised) history-projected state with its bookkeeping tag.
#[derive(Clone, Debug)]
pub struct ProjectedState {
    pub state: CState,
    pub party: usize,
    pub time: usize,
    pub history: History,
    pub kind: StateKind,
}

fn check_time(run: &ProtocolRun, t: usize) -> Result<()> {
    if t == 0 || t > run.t_steps() {
        return Err(Error::Precondition(format!(
            "time {t} outside 1..={}",
            run.t_steps()
        )));
    }
    Ok(())
}

/// Projector onto the result/flag sectors consistent with a history, as an
/// index predicate on the full space.
fn index_matches_history(layout: &SpaceLayout, record: &FiringRecord, index: usize) -> bool {
    for l in 1..=layout.n_parties() {
        match record.fired(l) {
            Some(a) => {
                if layout.flag_value(index, l) != 1 || layout.result_value(index, l) != a {
                    return false;
                }
            }
            None => {
                if layout.flag_value(index, l) != 0 {
                    return false;
                }
            }
        }
    }
    true
}

/// Zero out every amplitude inconsistent with the history record.
pub fn project_history(layout: &SpaceLayout, history: &History, state: &CState) -> CState {
    let record = history.firing_record(layout.n_parties());
    project_record(layout, &record, state)
}

fn project_record(layout: &SpaceLayout, record: &FiringRecord, state: &CState) -> CState {
    let mut out = state.clone();
    for (i, a) in out.amps_mut().iter_mut().enumerate() {
        if !index_matches_history(layout, record, i) {
            *a = ZERO;
        }
    }
    out
}

/// Zero out every amplitude whose control level differs from `level`.
pub fn project_control(layout: &SpaceLayout, level: usize, state: &CState) -> CState {
    let mut out = state.clone();
    for (i, a) in out.amps_mut().iter_mut().enumerate() {
        if layout.control_level(i) != level {
            *a = ZERO;
        }
    }
    out
}

/// Dense projector onto the result (x) flag space selecting the sectors
/// consistent with `history`: recorded parties are pinned to their outcome
/// with flag one, the rest keep a free result with flag zero.
pub fn history_projector(layout: &SpaceLayout, history: &History) -> Result<COperator> {
    let n = layout.n_parties();
    for e in history.entries() {
        if e.party == 0 || e.party > n {
            return Err(Error::InvalidHistory(format!("party {}", e.party)));
        }
        if e.outcome >= layout.alphabet(e.party) {
            return Err(Error::OutcomeOutOfRange(format!(
                "outcome {} for party {}",
                e.outcome, e.party
            )));
        }
    }
    let record = history.firing_record(n);
    let mut result_parts = Vec::with_capacity(n);
    let mut flag_parts = Vec::with_capacity(n);
    for l in 1..=n {
        let a_dim = layout.alphabet(l);
        let f_dim = layout.flag_dim();
        match record.fired(l) {
            Some(a) => {
                let mut p = COperator::zeros(a_dim, a_dim);
                p.set(a, a, ONE);
                result_parts.push(p);
                let mut f = COperator::zeros(f_dim, f_dim);
                f.set(1, 1, ONE);
                flag_parts.push(f);
            }
            None => {
                result_parts.push(COperator::identity(a_dim));
                let mut f = COperator::zeros(f_dim, f_dim);
                f.set(0, 0, ONE);
                flag_parts.push(f);
            }
        }
    }
    let parts: Vec<&COperator> = result_parts.iter().chain(flag_parts.iter()).collect();
    kron_all(&parts)
}

/// The pre-measurement state at time `t` with control set to trigger party
/// `l` (0 for the do-nothing branch) and result/flag sectors projected onto
/// the history. Un-normalised.
pub fn psi_state(
    run: &ProtocolRun,
    l: usize,
    t: usize,
    history: &History,
) -> Result<ProjectedState> {
    check_time(run, t)?;
    history.validate(run.spec(), run.settings())?;
    let layout = run.spec().layout();
    if l > run.spec().n_parties() {
        return Err(Error::Precondition(format!("party {l}")));
    }
    if l != 0 && history.contains_party(l) {
        return Err(Error::Precondition(format!(
            "party {l} has already acted in this history"
        )));
    }
    let projected = project_history(layout, history, run.pre_measurement(t));
    Ok(ProjectedState {
        state: project_control(layout, l, &projected),
        party: l,
        time: t,
        history: history.clone(),
        kind: StateKind::Psi,
    })
}

/// The just-measured state at time `t` for the last entry of `history`
/// (which must name party `l`); for `l = 0`, the do-nothing branch pushed
/// through one activation.
pub fn phi_state(
    run: &ProtocolRun,
    l: usize,
    t: usize,
    history: &History,
) -> Result<ProjectedState> {
    check_time(run, t)?;
    let spec = run.spec();
    if l == 0 {
        let psi = psi_state(run, 0, t, history)?;
        let state = apply_v(spec, run.settings(), &psi.state)?;
        return Ok(ProjectedState {
            state,
            party: 0,
            time: t,
            history: history.clone(),
            kind: StateKind::Phi,
        });
    }
    let (parent, last) = history
        .parent()
        .ok_or_else(|| Error::InvalidHistory("empty history has no last entry".into()))?;
    if last.party != l {
        return Err(Error::InvalidHistory(format!(
            "last history entry names party {}, not {l}",
            last.party
        )));
    }
    history.validate(spec, run.settings())?;
    let psi = psi_state(run, l, t, &parent)?;
    let layout = spec.layout();
    let after_v = apply_v(spec, run.settings(), &psi.state)?;
    let mut state = after_v;
    for (i, a) in state.amps_mut().iter_mut().enumerate() {
        if layout.result_value(i, l) != last.outcome {
            *a = ZERO;
        }
    }
    Ok(ProjectedState {
        state,
        party: l,
        time: t,
        history: history.clone(),
        kind: StateKind::Phi,
    })
}

/// Evolve a projected state to the end of the protocol (norm preserved).
pub fn evolve_to_end(run: &ProtocolRun, ps: &ProjectedState) -> Result<ProjectedState> {
    let (state, kind) = match ps.kind {
        StateKind::Psi => (run.tail_after_pre(ps.time, &ps.state)?, StateKind::PsiBar),
        StateKind::Phi => (run.tail_after_post(ps.time, &ps.state)?, StateKind::PhiBar),
        _ => {
            return Err(Error::Precondition(
                "state has already been evolved to the end".into(),
            ))
        }
    };
    Ok(ProjectedState {
        state,
        party: ps.party,
        time: ps.time,
        history: ps.history.clone(),
        kind,
    })
}

/// Dense total protocol unitary (capacity-guarded; large layouts should
/// evolve states instead).
pub fn total_unitary(spec: &ProtocolSpec, x: &SettingVector) -> Result<COperator> {
    let layout = spec.layout();
    let total = layout.total_dim();
    if total
        .checked_mul(total)
        .is_none_or(|n| n > crate::tensor::DENSE_ENTRY_CAPACITY)
    {
        return Err(Error::CapacityExceeded(format!(
            "dense total unitary at dimension {total}"
        )));
    }
    let v = build_v(spec, x)?;
    let mut acc = COperator::identity(total);
    for t in 1..=spec.t_steps() {
        let u = embed(
            spec.step_unitary(t),
            layout.dims(),
            &[layout.system_factor(), layout.control_factor()],
        )?;
        acc = v.mul(&u.mul(&acc)?)?;
    }
    Ok(acc)
}

/// Outcome distribution of the protocol at settings `x`; refuses protocols
/// whose flag leakage at `x` exceeds the validity tolerance.
pub fn quantum_distribution(
    spec: &ProtocolSpec,
    x: &SettingVector,
) -> Result<OutcomeDistribution> {
    let final_state = evolve(spec, x)?;
    let layout = spec.layout();
    let leak = 1.0 - flag_success_probability(layout, &final_state);
    if leak > tol::DISTRIBUTION {
        return Err(Error::InvalidProtocol {
            leak,
            tol: tol::DISTRIBUTION,
            detail: format!("settings {:?}", x.values()),
        });
    }
    Ok(distribution_of_state(layout, &final_state))
}

/// Marginal distribution of the result registers of a full-space state.
pub fn distribution_of_state(layout: &SpaceLayout, state: &CState) -> OutcomeDistribution {
    let n = layout.n_parties();
    let mut dist = OutcomeDistribution::zeros(layout.alphabets().to_vec());
    for (i, a) in state.amps().iter().enumerate() {
        let p = a.norm_sqr();
        if p == 0.0 {
            continue;
        }
        let mut joint = 0usize;
        for l in 1..=n {
            joint = joint * layout.alphabet(l) + layout.result_value(i, l);
        }
        dist.add_at(joint, p);
    }
    dist
}

/// Squared norms of every history-projected state, summed over time,
/// collected in one classification pass per cached step state.
///
/// `psi` keys are `(control level, record)` where the record does not
/// contain the level's party; `phi` keys are `(party, record)` where the
/// record contains the party's just-recorded outcome.
pub struct NormTables {
    psi: HashMap<(usize, FiringRecord), f64>,
    phi: HashMap<(usize, FiringRecord), f64>,
}

impl NormTables {
    pub fn psi_sum(&self, l: usize, record: &FiringRecord) -> f64 {
        *self.psi.get(&(l, record.clone())).unwrap_or(&0.0)
    }

    pub fn phi_sum(&self, l: usize, record_with_l: &FiringRecord) -> f64 {
        *self.phi.get(&(l, record_with_l.clone())).unwrap_or(&0.0)
    }

    /// Denominator of the next-party probabilities at a history record.
    pub fn psi_denominator(&self, record: &FiringRecord) -> f64 {
        record
            .unfired_parties()
            .map(|l| self.psi_sum(l, record))
            .sum()
    }

    /// Denominator of the outcome probabilities: party `l` summed over all
    /// its possible outcomes on top of `record` (which must not contain
    /// `l`).
    pub fn phi_denominator(&self, l: usize, record: &FiringRecord, alphabet: usize) -> f64 {
        (0..alphabet)
            .map(|a| self.phi_sum(l, &record.with(l, a)))
            .sum()
    }
}

/// Run the classification sweep for a finished [`ProtocolRun`].
pub fn norm_tables(run: &ProtocolRun) -> NormTables {
    let layout = run.spec().layout();
    let mut psi: HashMap<(usize, FiringRecord), f64> = HashMap::new();
    let mut phi: HashMap<(usize, FiringRecord), f64> = HashMap::new();
    for t in 1..=run.t_steps() {
        for (i, a) in run.pre_measurement(t).amps().iter().enumerate() {
            let p = a.norm_sqr();
            if p == 0.0 {
                continue;
            }
            let Some(record) = FiringRecord::of_index(layout, i) else {
                continue;
            };
            let l = layout.control_level(i);
            if l >= 1 && record.fired(l).is_some() {
                // A fired party under its own control level matches no
                // admissible pre-measurement projection.
                continue;
            }
            *psi.entry((l, record)).or_insert(0.0) += p;
        }
        for (i, a) in run.post_measurement(t).amps().iter().enumerate() {
            let p = a.norm_sqr();
            if p == 0.0 {
                continue;
            }
            let l = layout.control_level(i);
            if l == 0 {
                continue;
            }
            let Some(record) = FiringRecord::of_index(layout, i) else {
                continue;
            };
            if record.fired(l).is_none() {
                continue;
            }
            *phi.entry((l, record)).or_insert(0.0) += p;
        }
    }
    NormTables { psi, phi }
}

/// Numerical check of the orthogonality and telescoping identities that
/// underpin the extraction: maxima of the deviations, per kind.
#[derive(Clone, Debug)]
pub struct IdentityReport {
    /// Settings used for the (expensive) end-evolved orthogonality checks.
    pub orthogonality_settings: Vec<Vec<usize>>,
    /// max |<psi-bar | psi-bar>| over distinct (party, time) pairs.
    pub psi_orthogonality: f64,
    /// max |<phi-bar | phi-bar>| over distinct (party, time) pairs.
    pub phi_orthogonality: f64,
    /// Next-numerator vs outcome-denominator cancellation, per branch.
    pub branch_cancellation: f64,
    /// |first-stage denominator - 1|, per settings.
    pub first_denominator: f64,
    /// Final-stage numerators vs the quantum distribution, per full record.
    pub final_numerator: f64,
    /// Post-measurement vs next-stage pre-measurement mass, per stage.
    pub stage_handoff: f64,
    /// Whether the history set was subsampled for the orthogonality checks.
    pub sampled: bool,
    pub seed: u64,
}

impl IdentityReport {
    pub fn passes(&self) -> bool {
        self.psi_orthogonality <= tol::ORTHOGONALITY
            && self.phi_orthogonality <= tol::ORTHOGONALITY
            && self.branch_cancellation <= tol::TABLE_ROW
            && self.first_denominator <= tol::DISTRIBUTION
            && self.final_numerator <= tol::DISTRIBUTION
            && self.stage_handoff <= tol::DISTRIBUTION
    }
}

/// Cap on the history count before the orthogonality checks subsample.
pub const HISTORY_SAMPLE_CAP: usize = 10_000;

/// Verify the proof identities numerically on one protocol.
///
/// The cheap table identities run over every setting vector; the
/// end-evolved orthogonality checks run on `orthogonality_settings` many
/// seeded-sampled settings (they cost a full tail evolution per state).
pub fn identity_report(
    spec: &ProtocolSpec,
    seed: u64,
    orthogonality_settings: usize,
) -> Result<IdentityReport> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let all = spec.all_settings();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<SettingVector> = all.clone();
    chosen.shuffle(&mut rng);
    chosen.truncate(orthogonality_settings.max(1).min(all.len()));
    chosen.sort();

    let records = all_firing_records(spec.layout().alphabets());
    let sampled = records.len() > HISTORY_SAMPLE_CAP;
    let mut ortho_records = records.clone();
    if sampled {
        ortho_records.shuffle(&mut rng);
        ortho_records.truncate(HISTORY_SAMPLE_CAP);
    }

    let mut report = IdentityReport {
        orthogonality_settings: chosen.iter().map(|x| x.values().to_vec()).collect(),
        psi_orthogonality: 0.0,
        phi_orthogonality: 0.0,
        branch_cancellation: 0.0,
        first_denominator: 0.0,
        final_numerator: 0.0,
        stage_handoff: 0.0,
        sampled,
        seed,
    };

    let n = spec.n_parties();
    for x in &all {
        let run = ProtocolRun::new(spec, x)?;
        let tables = norm_tables(&run);
        let dist = quantum_distribution(spec, x)?;
        let empty = FiringRecord::empty(n);
        report.first_denominator = report
            .first_denominator
            .max((tables.psi_denominator(&empty) - 1.0).abs());
        for record in &records {
            let k = record.count();
            for l in record.unfired_parties() {
                let lhs = tables.psi_sum(l, record);
                let rhs = tables.phi_denominator(l, record, spec.layout().alphabet(l));
                report.branch_cancellation =
                    report.branch_cancellation.max((lhs - rhs).abs());
            }
            if k == n {
                let phi_mass: f64 = record
                    .fired_parties()
                    .map(|l| tables.phi_sum(l, record))
                    .sum();
                let outcomes: Vec<usize> =
                    (1..=n).map(|l| record.fired(l).unwrap()).collect();
                let p = dist.prob(&outcomes)?;
                report.final_numerator = report.final_numerator.max((phi_mass - p).abs());
            } else if k >= 1 {
                let phi_mass: f64 = record
                    .fired_parties()
                    .map(|l| tables.phi_sum(l, record))
                    .sum();
                let psi_mass = tables.psi_denominator(record);
                report.stage_handoff = report.stage_handoff.max((phi_mass - psi_mass).abs());
            }
        }
    }

    for x in &chosen {
        let run = ProtocolRun::new(spec, x)?;
        let (psi_max, phi_max) = orthogonality_deviation(&run, &ortho_records)?;
        report.psi_orthogonality = report.psi_orthogonality.max(psi_max);
        report.phi_orthogonality = report.phi_orthogonality.max(phi_max);
    }
    Ok(report)
}

/// Largest overlap between end-evolved projected states at distinct
/// (party, time) tags, over the given history records.
fn orthogonality_deviation(
    run: &ProtocolRun,
    records: &[FiringRecord],
) -> Result<(f64, f64)> {
    let t_max = run.t_steps();
    let x = run.settings();
    let deviations = crate::par::map_slice(records, |record| -> Result<(f64, f64)> {
        let mut psi_bars: Vec<CState> = Vec::new();
        let history = record.canonical_history(x, None);
        for l in record.unfired_parties() {
            for t in 1..=t_max {
                let psi = psi_state(run, l, t, &history)?;
                if psi.state.norm_sqr() == 0.0 {
                    // zero states are orthogonal to everything
                    continue;
                }
                psi_bars.push(evolve_to_end(run, &psi)?.state);
            }
        }
        let mut psi_max = 0.0f64;
        for i in 0..psi_bars.len() {
            for j in (i + 1)..psi_bars.len() {
                psi_max = psi_max.max(
                    crate::tensor::inner(&psi_bars[i], &psi_bars[j])?.norm(),
                );
            }
        }
        let mut phi_bars: Vec<CState> = Vec::new();
        for l in record.fired_parties() {
            let history = record.canonical_history(x, Some(l));
            for t in 1..=t_max {
                let phi = phi_state(run, l, t, &history)?;
                if phi.state.norm_sqr() == 0.0 {
                    continue;
                }
                phi_bars.push(evolve_to_end(run, &phi)?.state);
            }
        }
        let mut phi_max = 0.0f64;
        for i in 0..phi_bars.len() {
            for j in (i + 1)..phi_bars.len() {
                phi_max = phi_max.max(
                    crate::tensor::inner(&phi_bars[i], &phi_bars[j])?.norm(),
                );
            }
        }
        Ok((psi_max, phi_max))
    });
    let mut psi_max = 0.0f64;
    let mut phi_max = 0.0f64;
    for d in deviations {
        let (p, q) = d?;
        psi_max = psi_max.max(p);
        phi_max = phi_max.max(q);
    }
    Ok((psi_max, phi_max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::tensor::C64;
    use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

    fn switch_settings() -> (ProtocolSpec, SettingVector) {
        let spec = fixtures::switch_protocol();
        let x = SettingVector::new(&spec, vec![0, 1, 1]).unwrap();
        (spec, x)
    }

    #[test]
    fn total_unitary_is_unitary_on_small_specs() {
        let spec = fixtures::trivial_single_party();
        let x = SettingVector::new(&spec, vec![1]).unwrap();
        let u = total_unitary(&spec, &x).unwrap();
        assert!(u.unitarity_defect() <= 1e-11);
        // final state from the dense product agrees with the sweep
        let dense = u.apply(&initial_state(spec.layout())).unwrap();
        let swept = evolve(&spec, &x).unwrap();
        assert!(dense.max_abs_diff(&swept) < 1e-13);
    }

    #[test]
    fn total_unitary_respects_capacity() {
        let (spec, x) = switch_settings();
        assert!(matches!(
            total_unitary(&spec, &x),
            Err(Error::CapacityExceeded(_))
        ));
    }

    /// The closed-form final state of the switch at settings (0, 1, 1),
    /// assembled term by term from its known branch amplitudes.
    fn switch_expected_final_state() -> CState {
        let layout = fixtures::switch_layout();
        let h = FRAC_1_SQRT_2;
        let plus = [h, h];
        let minus = [h, -h];
        let q = 1.0 / (2.0 * SQRT_2);
        // (s1 amplitudes, s2 amplitudes, result digits (a, b, c))
        let lin = |c1: f64, v1: [f64; 2], c0: f64| -> [f64; 2] {
            [c1 * v1[0] + c0, c1 * v1[1]]
        };
        let branches: Vec<([f64; 2], [f64; 2], [usize; 3])> = vec![
            (plus, lin(q, plus, 0.25), [0, 0, 0]),
            (minus, lin(-q, plus, 0.25), [0, 0, 1]),
            (plus, lin(q, minus, 0.25), [0, 1, 0]),
            (minus, lin(-q, minus, 0.25), [0, 1, 1]),
            (plus, [0.0, 0.25], [1, 0, 0]),
            (minus, [0.0, 0.25], [1, 0, 1]),
            (plus, [0.0, -0.25], [1, 1, 0]),
            (minus, [0.0, -0.25], [1, 1, 1]),
        ];
        let mut state = CState::zero(layout.total_dim());
        for (s1, s2, r) in branches {
            for (i1, a1) in s1.iter().enumerate() {
                for (i2, a2) in s2.iter().enumerate() {
                    let idx = layout.index_of(2 * i1 + i2, 3, &r, &[1, 1, 1]);
                    let amp = state.amp(idx) + C64::new(a1 * a2, 0.0);
                    state.amps_mut()[idx] = amp;
                }
            }
        }
        state
    }

    #[test]
    fn switch_final_state_matches_closed_form() {
        let (spec, x) = switch_settings();
        let final_state = evolve(&spec, &x).unwrap();
        assert!((final_state.norm_sqr() - 1.0).abs() < 1e-12);
        let expected = switch_expected_final_state();
        assert!((expected.norm_sqr() - 1.0).abs() < 1e-12);
        assert!(
            final_state.max_abs_diff(&expected) < 1e-12,
            "deviation {}",
            final_state.max_abs_diff(&expected)
        );
    }

    #[test]
    fn switch_distribution_values() {
        let (spec, x) = switch_settings();
        let dist = quantum_distribution(&spec, &x).unwrap();
        assert!((dist.prob(&[0, 0, 0]).unwrap() - 5.0 / 16.0).abs() < 1e-10);
        assert!((dist.prob(&[0, 1, 0]).unwrap() - 5.0 / 16.0).abs() < 1e-10);
        for outcomes in [[0, 0, 1], [0, 1, 1], [1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1]] {
            assert!((dist.prob(&outcomes).unwrap() - 1.0 / 16.0).abs() < 1e-10);
        }
        assert!((dist.total() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn quantum_distribution_refuses_invalid_protocols() {
        let spec = fixtures::all_identity_protocol();
        let x = SettingVector::new(&spec, vec![0, 0]).unwrap();
        assert!(matches!(
            quantum_distribution(&spec, &x),
            Err(Error::InvalidProtocol { .. })
        ));
    }

    #[test]
    fn history_projector_shapes() {
        let layout = fixtures::switch_layout();
        let empty = history_projector(&layout, &History::empty()).unwrap();
        assert!(empty.projector_defect() < 1e-14);
        // rank = product of unconstrained result registers
        assert!((empty.trace().re - 8.0).abs() < 1e-12);
        let full = History::new(vec![
            HistoryEntry::new(1, 0, 0),
            HistoryEntry::new(2, 0, 1),
            HistoryEntry::new(3, 0, 1),
        ])
        .unwrap();
        let p = history_projector(&layout, &full).unwrap();
        assert!(p.projector_defect() < 1e-14);
        assert!((p.trace().re - 1.0).abs() < 1e-12);
        let partial = History::new(vec![HistoryEntry::new(2, 1, 0)]).unwrap();
        let p = history_projector(&layout, &partial).unwrap();
        assert!(p.projector_defect() < 1e-14);
        assert!((p.trace().re - 4.0).abs() < 1e-12);
        let bad = History::new(vec![HistoryEntry::new(1, 7, 0)]).unwrap();
        assert!(matches!(
            history_projector(&layout, &bad),
            Err(Error::OutcomeOutOfRange(_))
        ));
    }

    #[test]
    fn switch_first_stage_psi_norms() {
        let (spec, x) = switch_settings();
        let run = ProtocolRun::new(&spec, &x).unwrap();
        let h0 = History::empty();
        // only time 1 contributes at the first stage
        let alice_t1 = psi_state(&run, 1, 1, &h0).unwrap();
        assert!((alice_t1.state.norm_sqr() - 0.5).abs() < 1e-12);
        let mut alice_total = 0.0;
        let mut everyone = 0.0;
        for t in 1..=3 {
            for l in 1..=3 {
                let s = psi_state(&run, l, t, &h0).unwrap().state.norm_sqr();
                everyone += s;
                if l == 1 {
                    alice_total += s;
                }
            }
        }
        assert!((alice_total - 0.5).abs() < 1e-12);
        // first-stage denominator is one
        assert!((everyone - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psi_states_resolve_identity_at_fixed_time() {
        let (spec, x) = switch_settings();
        let run = ProtocolRun::new(&spec, &x).unwrap();
        let records = all_firing_records(spec.layout().alphabets());
        for t in 1..=3 {
            let mut mass = 0.0;
            for record in &records {
                let history = record.canonical_history(&x, None);
                for l in 0..=3 {
                    if l != 0 && record.fired(l).is_some() {
                        continue;
                    }
                    mass += psi_state(&run, l, t, &history).unwrap().state.norm_sqr();
                }
            }
            assert!((mass - 1.0).abs() < 1e-12, "time {t}: mass {mass}");
        }
    }

    #[test]
    fn phi_outcome_sum_matches_psi_norm_per_time() {
        let spec = fixtures::random_protocol(
            &fixtures::RandomProtocolParams { n_parties: 2, system_dim: 2, t_steps: 3 },
            5,
        )
        .unwrap();
        let x = SettingVector::new(&spec, vec![1, 0]).unwrap();
        let run = ProtocolRun::new(&spec, &x).unwrap();
        let h0 = History::empty();
        for l in 1..=2usize {
            for t in 1..=3usize {
                let psi = psi_state(&run, l, t, &h0).unwrap().state.norm_sqr();
                let mut phi_sum = 0.0;
                for a in 0..2usize {
                    let h1 = History::new(vec![HistoryEntry::new(l, a, x.of(l))]).unwrap();
                    phi_sum += phi_state(&run, l, t, &h1).unwrap().state.norm_sqr();
                }
                assert!((psi - phi_sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn phi_of_zero_psi_is_zero() {
        let (spec, x) = switch_settings();
        let run = ProtocolRun::new(&spec, &x).unwrap();
        // Charlie can never act first in the switch
        let h1 = History::new(vec![HistoryEntry::new(3, 0, 1)]).unwrap();
        for t in 1..=3 {
            let phi = phi_state(&run, 3, t, &h1).unwrap();
            assert!(phi.state.norm_sqr() < 1e-24);
        }
    }

    #[test]
    fn switch_charlie_final_numerator_reconstructs_probability() {
        let (spec, x) = switch_settings();
        let run = ProtocolRun::new(&spec, &x).unwrap();
        let h3 = History::new(vec![
            HistoryEntry::new(1, 0, 0),
            HistoryEntry::new(2, 0, 1),
            HistoryEntry::new(3, 0, 1),
        ])
        .unwrap();
        let mut mass = 0.0;
        for t in 1..=3 {
            mass += phi_state(&run, 3, t, &h3).unwrap().state.norm_sqr();
        }
        // Only Charlie can be last here, so the stage-3 mass is the full
        // outcome probability.
        assert!((mass - 5.0 / 16.0).abs() < 1e-10);
    }

    #[test]
    fn evolve_to_end_edge_cases() {
        let (spec, x) = switch_settings();
        let run = ProtocolRun::new(&spec, &x).unwrap();
        let h0 = History::empty();
        let psi = psi_state(&run, 1, 3, &h0).unwrap();
        let bar = evolve_to_end(&run, &psi).unwrap();
        // at the last step only the final activation remains
        let direct = apply_v(&spec, &x, &psi.state).unwrap();
        assert!(bar.state.max_abs_diff(&direct) < 1e-13);
        assert!((bar.state.norm_sqr() - psi.state.norm_sqr()).abs() < 1e-12);
        // a phi state at the last step is already final
        let h1 = History::new(vec![HistoryEntry::new(1, 0, 0)]).unwrap();
        let phi = phi_state(&run, 1, 3, &h1).unwrap();
        let bar = evolve_to_end(&run, &phi).unwrap();
        assert!(bar.state.max_abs_diff(&phi.state) < 1e-15);
        assert!(evolve_to_end(&run, &bar).is_err());
    }

    #[test]
    fn norm_tables_agree_with_explicit_states() {
        let spec = fixtures::random_protocol(
            &fixtures::RandomProtocolParams { n_parties: 2, system_dim: 3, t_steps: 4 },
            11,
        )
        .unwrap();
        let x = SettingVector::new(&spec, vec![0, 1]).unwrap();
        let run = ProtocolRun::new(&spec, &x).unwrap();
        let tables = norm_tables(&run);
        for record in all_firing_records(spec.layout().alphabets()) {
            let history = record.canonical_history(&x, None);
            for l in record.unfired_parties() {
                let mut direct = 0.0;
                for t in 1..=4 {
                    direct += psi_state(&run, l, t, &history).unwrap().state.norm_sqr();
                }
                assert!((direct - tables.psi_sum(l, &record)).abs() < 1e-12);
            }
            for l in record.fired_parties() {
                let history = record.canonical_history(&x, Some(l));
                let mut direct = 0.0;
                for t in 1..=4 {
                    direct += phi_state(&run, l, t, &history).unwrap().state.norm_sqr();
                }
                assert!((direct - tables.phi_sum(l, &record)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_report_passes_on_switch() {
        let spec = fixtures::switch_protocol();
        let report = identity_report(&spec, 3, 2).unwrap();
        assert!(report.passes(), "{report:?}");
        assert!(!report.sampled);
    }

    #[test]
    fn identity_report_passes_on_random_specs() {
        for seed in [1u64, 2, 3] {
            let spec = fixtures::random_protocol(
                &fixtures::RandomProtocolParams { n_parties: 3, system_dim: 2, t_steps: 4 },
                seed,
            )
            .unwrap();
            let report = identity_report(&spec, seed, 1).unwrap();
            assert!(report.passes(), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn padding_with_identity_steps_preserves_distributions() {
        let params = fixtures::RandomProtocolParams { n_parties: 2, system_dim: 2, t_steps: 2 };
        let spec = fixtures::random_protocol(&params, 17).unwrap();
        // same protocol with an idle step in front: the control starts (and
        // stays) on the do-nothing level during it
        let layout = SpaceLayout::new(2, 2, vec![2, 2], spec.t_steps() + 2).unwrap();
        let mut steps = vec![COperator::identity(6)];
        steps.extend(spec.step_unitaries().iter().cloned());
        let padded = ProtocolSpec::new(
            layout,
            steps,
            spec.measurements().to_vec(),
            spec.settings_domains().to_vec(),
        )
        .unwrap();
        for x in spec.all_settings() {
            let base = quantum_distribution(&spec, &x).unwrap();
            let xp = SettingVector::new(&padded, x.values().to_vec()).unwrap();
            let pad = quantum_distribution(&padded, &xp).unwrap();
            assert!(base.max_abs_diff(&pad) < 1e-10);
        }
    }

    /// Independent density-operator oracle: evolve the full density matrix
    /// with dense embedded operators and read the diagonal result blocks.
    fn density_matrix_distribution(spec: &ProtocolSpec, x: &SettingVector) -> OutcomeDistribution {
        let layout = spec.layout();
        let total = layout.total_dim();
        let mut rho = COperator::zeros(total, total);
        rho.set(0, 0, ONE);
        let v = build_v(spec, x).unwrap();
        for t in 1..=spec.t_steps() {
            let u = embed(
                spec.step_unitary(t),
                layout.dims(),
                &[layout.system_factor(), layout.control_factor()],
            )
            .unwrap();
            rho = u.mul(&rho).unwrap().mul(&u.adjoint()).unwrap();
            rho = v.mul(&rho).unwrap().mul(&v.adjoint()).unwrap();
        }
        let n = layout.n_parties();
        let mut dist = OutcomeDistribution::zeros(layout.alphabets().to_vec());
        for i in 0..total {
            let p = rho.get(i, i).re;
            let mut joint = 0usize;
            for l in 1..=n {
                joint = joint * layout.alphabet(l) + layout.result_value(i, l);
            }
            dist.add_at(joint, p);
        }
        dist
    }

    #[test]
    fn distribution_matches_density_operator_oracle() {
        let params = fixtures::RandomProtocolParams { n_parties: 2, system_dim: 2, t_steps: 2 };
        let spec = fixtures::random_protocol(&params, 23).unwrap();
        for x in spec.all_settings() {
            let fast = quantum_distribution(&spec, &x).unwrap();
            let oracle = density_matrix_distribution(&spec, &x);
            assert!(fast.max_abs_diff(&oracle) < 1e-10);
        }
    }
}
