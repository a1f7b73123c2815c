//! Equivalence between the single-control activation step and circuits of
//! per-party controlled lab gates.
//!
//! Three constructions are provided, each with a dense form (small spaces)
//! and a state applier (any space):
//!
//! - the individual controlled lab gate of one party,
//! - that gate built from one use of the combined activation step,
//!   conjugated by a controlled control-preparation (checked on the sector
//!   where the big control starts in its zero level),
//! - the combined activation step built from a ladder of individual gates
//!   hanging off per-party ancilla qubits (checked on the all-zero ancilla
//!   sector).
//!
//! [`rewrite_circuit`] maps an arbitrary circuit of unitaries and
//! individual controlled lab gates into a protocol with one activation per
//! gate, by spacing the gates out, extending partial-system unitaries
//! trivially, replacing each gate by its combined-step fragment, and
//! merging everything between activations into the step unitaries.
//! Elements after the last gate never touch a result register and are
//! dropped; the outcome distribution is unchanged.

use std::collections::BTreeMap;

use crate::dist::OutcomeDistribution;
use crate::error::{Error, Result};
use crate::par;
use crate::protocol::{
    apply_v_on, flag_shift, gates, CanonicalPositions, ProtocolSpec, SettingVector,
    SpaceLayout,
};
use crate::tensor::{
    apply_embedded, apply_embedded_controlled, kron, strides, COperator, CState, ONE, ZERO,
};
use crate::tol;

/// Factor positions of the individual-gate space of party `l`:
/// `[control qubit, system, results..., flags...]`.
fn individual_dims(spec: &ProtocolSpec) -> Vec<usize> {
    let layout = spec.layout();
    let mut dims = vec![2usize, layout.system_dim()];
    dims.extend_from_slice(layout.alphabets());
    dims.extend(std::iter::repeat(layout.flag_dim()).take(layout.n_parties()));
    dims
}

/// Factor positions of the combined-step construction space:
/// `[control qubit, control, system, results..., flags...]`.
fn prepared_dims(spec: &ProtocolSpec) -> Vec<usize> {
    let layout = spec.layout();
    let mut dims = vec![2usize, layout.control_dim(), layout.system_dim()];
    dims.extend_from_slice(layout.alphabets());
    dims.extend(std::iter::repeat(layout.flag_dim()).take(layout.n_parties()));
    dims
}

/// Factor positions of the ladder construction space:
/// `[control, ancillas..., system, results..., flags...]`.
fn ladder_dims(spec: &ProtocolSpec) -> Vec<usize> {
    let layout = spec.layout();
    let n = layout.n_parties();
    let mut dims = vec![layout.control_dim()];
    dims.extend(std::iter::repeat(2usize).take(n));
    dims.push(layout.system_dim());
    dims.extend_from_slice(layout.alphabets());
    dims.extend(std::iter::repeat(layout.flag_dim()).take(n));
    dims
}

/// The control preparation of party `l`: the permutation exchanging the
/// zero control level with level `l`.
pub fn control_prep(control_dim: usize, party: usize) -> COperator {
    assert!(party >= 1 && party < control_dim);
    let mut perm: Vec<usize> = (0..control_dim).collect();
    perm.swap(0, party);
    gates::permutation(&perm)
}

/// Apply party `l`'s individual controlled lab gate inside an arbitrary
/// composite space: on the control qubit's one-level, the measurement for
/// `x_l` acts on (system, result) and the party's flag is raised.
fn apply_individual_gate_at(
    spec: &ProtocolSpec,
    party: usize,
    setting: usize,
    dims: &[usize],
    control_qubit: usize,
    system: usize,
    result: usize,
    flag: usize,
    state: &CState,
) -> Result<CState> {
    let meas = spec.measurement(party, setting)?;
    let gamma = flag_shift(spec.layout().flag_dim());
    let out = apply_embedded_controlled(
        meas,
        dims,
        &[system, result],
        (control_qubit, 1),
        state,
    )?;
    apply_embedded_controlled(&gamma, dims, &[flag], (control_qubit, 1), &out)
}

/// Applier form of the individual controlled lab gate on the
/// `[control qubit, system, results..., flags...]` space.
pub fn apply_individual_gate(
    spec: &ProtocolSpec,
    party: usize,
    setting: usize,
    state: &CState,
) -> Result<CState> {
    let n = spec.n_parties();
    let dims = individual_dims(spec);
    apply_individual_gate_at(
        spec,
        party,
        setting,
        &dims,
        0,
        1,
        2 + (party - 1),
        2 + n + (party - 1),
        state,
    )
}

/// Dense individual controlled lab gate (capacity-guarded).
pub fn individual_gate(spec: &ProtocolSpec, party: usize, setting: usize) -> Result<COperator> {
    let dims = individual_dims(spec);
    dense_from_applier(&dims, |state| apply_individual_gate(spec, party, setting, state))
}

/// Applier form of the combined-step construction on the
/// `[control qubit, control, system, results..., flags...]` space: a
/// controlled preparation, one combined activation, and the inverse
/// preparation.
pub fn apply_individual_from_v(
    spec: &ProtocolSpec,
    party: usize,
    x: &SettingVector,
    state: &CState,
) -> Result<CState> {
    let n = spec.n_parties();
    let dims = prepared_dims(spec);
    let pos = CanonicalPositions {
        system: 2,
        control: 1,
        results: (0..n).map(|i| 3 + i).collect(),
        flags: (0..n).map(|i| 3 + n + i).collect(),
    };
    let w = control_prep(spec.layout().control_dim(), party);
    let s = apply_embedded_controlled(&w, &dims, &[1], (0, 1), state)?;
    let s = apply_v_on(spec, x, &dims, &pos, &s)?;
    apply_embedded_controlled(&w.adjoint(), &dims, &[1], (0, 1), &s)
}

/// Dense combined-step construction (capacity-guarded).
pub fn individual_from_v(
    spec: &ProtocolSpec,
    party: usize,
    x: &SettingVector,
) -> Result<COperator> {
    let dims = prepared_dims(spec);
    dense_from_applier(&dims, |state| apply_individual_from_v(spec, party, x, state))
}

/// Applier form of the ladder construction on the
/// `[control, ancillas..., system, results..., flags...]` space: for each
/// party, a flip of its ancilla conditioned on the control sitting at its
/// level, then every individual gate hanging off its ancilla, then the
/// flips undone in reverse.
pub fn apply_v_from_individuals(
    spec: &ProtocolSpec,
    x: &SettingVector,
    state: &CState,
) -> Result<CState> {
    let n = spec.n_parties();
    let dims = ladder_dims(spec);
    let anc = |l: usize| l; // ancilla factor of party l
    let system = n + 1;
    let result = |l: usize| n + 2 + (l - 1);
    let flag = |l: usize| n + 2 + n + (l - 1);
    let x_gate = gates::pauli_x();
    let mut s = state.clone();
    for l in 1..=n {
        s = apply_embedded_controlled(&x_gate, &dims, &[anc(l)], (0, l), &s)?;
    }
    for l in 1..=n {
        s = apply_individual_gate_at(
            spec,
            l,
            x.of(l),
            &dims,
            anc(l),
            system,
            result(l),
            flag(l),
            &s,
        )?;
    }
    for l in (1..=n).rev() {
        s = apply_embedded_controlled(&x_gate, &dims, &[anc(l)], (0, l), &s)?;
    }
    Ok(s)
}

/// Dense ladder construction (capacity-guarded).
pub fn v_from_individuals(spec: &ProtocolSpec, x: &SettingVector) -> Result<COperator> {
    let dims = ladder_dims(spec);
    dense_from_applier(&dims, |state| apply_v_from_individuals(spec, x, state))
}

fn dense_from_applier(
    dims: &[usize],
    apply: impl Fn(&CState) -> Result<CState>,
) -> Result<COperator> {
    let total: usize = dims.iter().product();
    if total
        .checked_mul(total)
        .is_none_or(|e| e > crate::tensor::DENSE_ENTRY_CAPACITY)
    {
        return Err(Error::CapacityExceeded(format!(
            "dense operator at dimension {total}"
        )));
    }
    let mut out = COperator::zeros(total, total);
    for col in 0..total {
        let image = apply(&CState::basis(total, col))?;
        for (row, a) in image.amps().iter().enumerate() {
            if *a != ZERO {
                out.set(row, col, *a);
            }
        }
    }
    Ok(out)
}

/// Largest entrywise deviation, over the sector where the big control sits
/// at its zero level, between the combined-step construction and the
/// individual gate (amplitude leaving the sector counts as deviation).
pub fn prepared_sector_deviation(
    spec: &ProtocolSpec,
    party: usize,
    x: &SettingVector,
) -> Result<f64> {
    let n = spec.n_parties();
    let dims = prepared_dims(spec);
    let total: usize = dims.iter().product();
    let st = strides(&dims);
    let (c_stride, c_dim) = (st[1], dims[1]);
    let control_digit = move |idx: usize| (idx / c_stride) % c_dim;
    let deviations = par::map_indexed(total, |col| -> Result<f64> {
        if control_digit(col) != 0 {
            return Ok(0.0);
        }
        let e = CState::basis(total, col);
        let via_v = apply_individual_from_v(spec, party, x, &e)?;
        let direct = apply_individual_gate_at(
            spec,
            party,
            x.of(party),
            &dims,
            0,
            2,
            3 + (party - 1),
            3 + n + (party - 1),
            &e,
        )?;
        Ok(via_v.max_abs_diff(&direct))
    });
    let mut worst = 0.0f64;
    for d in deviations {
        worst = worst.max(d?);
    }
    Ok(worst)
}

/// Largest entrywise deviation, over the all-zero ancilla sector, between
/// the ladder construction and the combined activation step.
pub fn ladder_sector_deviation(spec: &ProtocolSpec, x: &SettingVector) -> Result<f64> {
    let n = spec.n_parties();
    let dims = ladder_dims(spec);
    let total: usize = dims.iter().product();
    let st = strides(&dims);
    let pos = CanonicalPositions {
        system: n + 1,
        control: 0,
        results: (0..n).map(|i| n + 2 + i).collect(),
        flags: (0..n).map(|i| 2 * n + 2 + i).collect(),
    };
    let anc_strides: Vec<usize> = (1..=n).map(|l| st[l]).collect();
    let anc_zero = move |idx: usize| anc_strides.iter().all(|&s| (idx / s) % 2 == 0);
    let deviations = par::map_indexed(total, |col| -> Result<f64> {
        if !anc_zero(col) {
            return Ok(0.0);
        }
        let e = CState::basis(total, col);
        let ladder = apply_v_from_individuals(spec, x, &e)?;
        let direct = apply_v_on(spec, x, &dims, &pos, &e)?;
        Ok(ladder.max_abs_diff(&direct))
    });
    let mut worst = 0.0f64;
    for d in deviations {
        worst = worst.max(d?);
    }
    Ok(worst)
}

/// One element of an individual-gate circuit.
#[derive(Clone, Debug)]
pub enum CircuitElement {
    /// A unitary on a declared subset of system factors.
    Unitary { factors: Vec<usize>, op: COperator },
    /// Party `party`'s controlled lab gate, hanging off a system qubit.
    LabGate { party: usize, control_factor: usize },
}

/// A quantum circuit over declared system factors, per-party result and
/// flag registers implied, built from unitary elements and individual
/// controlled lab gates.
#[derive(Clone, Debug)]
pub struct IndividualGateCircuit {
    system_dims: Vec<usize>,
    n_parties: usize,
    alphabets: Vec<usize>,
    settings: Vec<Vec<usize>>,
    /// Per party: the system factors its measurement acts on.
    measurement_factors: Vec<Vec<usize>>,
    /// Per party: setting -> unitary on (measurement factors..., result).
    measurements: Vec<BTreeMap<usize, COperator>>,
    elements: Vec<CircuitElement>,
}

impl IndividualGateCircuit {
    pub fn new(
        system_dims: Vec<usize>,
        alphabets: Vec<usize>,
        settings: Vec<Vec<usize>>,
        measurement_factors: Vec<Vec<usize>>,
        measurements: Vec<BTreeMap<usize, COperator>>,
        elements: Vec<CircuitElement>,
    ) -> Result<Self> {
        let n_parties = alphabets.len();
        if n_parties == 0 {
            return Err(Error::Structural("at least one party required".into()));
        }
        if system_dims.is_empty() || system_dims.iter().any(|&d| d < 1) {
            return Err(Error::Structural("system factors must be non-empty".into()));
        }
        if settings.len() != n_parties
            || measurement_factors.len() != n_parties
            || measurements.len() != n_parties
        {
            return Err(Error::Structural(
                "per-party tables must cover every party".into(),
            ));
        }
        for (l0, factors) in measurement_factors.iter().enumerate() {
            let mut seen = vec![false; system_dims.len()];
            let mut dim = 1usize;
            for &f in factors {
                if f >= system_dims.len() || seen[f] {
                    return Err(Error::FactorOutOfRange(format!(
                        "measurement factor {f} of party {}",
                        l0 + 1
                    )));
                }
                seen[f] = true;
                dim *= system_dims[f];
            }
            let expected = dim * alphabets[l0];
            for x in &settings[l0] {
                let op = measurements[l0].get(x).ok_or_else(|| {
                    Error::Structural(format!(
                        "party {} is missing the measurement for setting {x}",
                        l0 + 1
                    ))
                })?;
                if op.rows() != expected || op.cols() != expected {
                    return Err(Error::Structural(format!(
                        "party {} measurement is {}x{}, expected {expected}x{expected}",
                        l0 + 1,
                        op.rows(),
                        op.cols()
                    )));
                }
                if !op.is_unitary(tol::ALGEBRAIC) {
                    return Err(Error::NotUnitary(format!(
                        "party {} setting {x} measurement",
                        l0 + 1
                    )));
                }
            }
        }
        for (i, e) in elements.iter().enumerate() {
            match e {
                CircuitElement::Unitary { factors, op } => {
                    let mut seen = vec![false; system_dims.len()];
                    let mut dim = 1usize;
                    for &f in factors {
                        if f >= system_dims.len() || seen[f] {
                            return Err(Error::FactorOutOfRange(format!(
                                "element {i} factor {f}"
                            )));
                        }
                        seen[f] = true;
                        dim *= system_dims[f];
                    }
                    if op.rows() != dim || op.cols() != dim {
                        return Err(Error::DimensionMismatch(format!(
                            "element {i} operator is {}x{}, expected {dim}x{dim}",
                            op.rows(),
                            op.cols()
                        )));
                    }
                    if !op.is_unitary(tol::ALGEBRAIC) {
                        return Err(Error::NotUnitary(format!("element {i}")));
                    }
                }
                CircuitElement::LabGate { party, control_factor } => {
                    if *party == 0 || *party > n_parties {
                        return Err(Error::Structural(format!(
                            "element {i} references party {party}"
                        )));
                    }
                    if *control_factor >= system_dims.len()
                        || system_dims[*control_factor] != 2
                    {
                        return Err(Error::Structural(format!(
                            "element {i}: control factor must be a qubit"
                        )));
                    }
                }
            }
        }
        Ok(IndividualGateCircuit {
            system_dims,
            n_parties,
            alphabets,
            settings,
            measurement_factors,
            measurements,
            elements,
        })
    }

    pub fn system_dims(&self) -> &[usize] {
        &self.system_dims
    }

    pub fn n_parties(&self) -> usize {
        self.n_parties
    }

    pub fn alphabets(&self) -> &[usize] {
        &self.alphabets
    }

    pub fn settings_domains(&self) -> &[Vec<usize>] {
        &self.settings
    }

    pub fn measurement_factors(&self) -> &[Vec<usize>] {
        &self.measurement_factors
    }

    pub fn measurements(&self) -> &[BTreeMap<usize, COperator>] {
        &self.measurements
    }

    pub fn elements(&self) -> &[CircuitElement] {
        &self.elements
    }

    pub fn gate_count(&self) -> usize {
        self.elements
            .iter()
            .filter(|e| matches!(e, CircuitElement::LabGate { .. }))
            .count()
    }

    /// Flag levels needed to count every gate use without wrapping.
    pub fn flag_dim(&self) -> usize {
        (self.gate_count() + 1).max(2)
    }

    fn dims(&self) -> Vec<usize> {
        let mut dims = self.system_dims.clone();
        dims.extend_from_slice(&self.alphabets);
        dims.extend(std::iter::repeat(self.flag_dim()).take(self.n_parties));
        dims
    }

    fn result_factor(&self, party: usize) -> usize {
        self.system_dims.len() + (party - 1)
    }

    fn flag_factor(&self, party: usize) -> usize {
        self.system_dims.len() + self.n_parties + (party - 1)
    }

    pub fn all_settings(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for domain in &self.settings {
            let mut next = Vec::with_capacity(out.len() * domain.len());
            for prefix in &out {
                for &v in domain {
                    let mut e = prefix.clone();
                    e.push(v);
                    next.push(e);
                }
            }
            out = next;
        }
        out
    }

    fn check_settings(&self, x: &[usize]) -> Result<()> {
        if x.len() != self.n_parties {
            return Err(Error::SettingOutOfDomain(format!(
                "{} settings for {} parties",
                x.len(),
                self.n_parties
            )));
        }
        for (l0, v) in x.iter().enumerate() {
            if !self.settings[l0].contains(v) {
                return Err(Error::SettingOutOfDomain(format!(
                    "setting {v} for party {}",
                    l0 + 1
                )));
            }
        }
        Ok(())
    }

    fn run(&self, x: &[usize]) -> Result<CState> {
        self.check_settings(x)?;
        let dims = self.dims();
        let total: usize = dims.iter().product();
        let gamma = flag_shift(self.flag_dim());
        let mut state = CState::basis(total, 0);
        for e in &self.elements {
            match e {
                CircuitElement::Unitary { factors, op } => {
                    state = apply_embedded(op, &dims, factors, &state)?;
                }
                CircuitElement::LabGate { party, control_factor } => {
                    let l = *party;
                    let meas = self.measurements[l - 1].get(&x[l - 1]).expect("validated");
                    let mut op_factors = self.measurement_factors[l - 1].clone();
                    op_factors.push(self.result_factor(l));
                    state = apply_embedded_controlled(
                        meas,
                        &dims,
                        &op_factors,
                        (*control_factor, 1),
                        &state,
                    )?;
                    state = apply_embedded_controlled(
                        &gamma,
                        &dims,
                        &[self.flag_factor(l)],
                        (*control_factor, 1),
                        &state,
                    )?;
                }
            }
        }
        Ok(state)
    }
}

/// Directly simulate the circuit and read the result registers.
pub fn simulate_circuit(
    circuit: &IndividualGateCircuit,
    x: &[usize],
) -> Result<OutcomeDistribution> {
    let state = circuit.run(x)?;
    let dims = circuit.dims();
    let st = strides(&dims);
    let n = circuit.n_parties;
    let mut dist = OutcomeDistribution::zeros(circuit.alphabets.clone());
    for (i, a) in state.amps().iter().enumerate() {
        let p = a.norm_sqr();
        if p == 0.0 {
            continue;
        }
        let mut joint = 0usize;
        for l in 1..=n {
            let f = circuit.result_factor(l);
            joint = joint * circuit.alphabets[l - 1] + (i / st[f]) % dims[f];
        }
        dist.add_at(joint, p);
    }
    Ok(dist)
}

/// Probability that every party's flag ends at exactly one when the
/// circuit runs at settings `x`.
pub fn circuit_flag_success(circuit: &IndividualGateCircuit, x: &[usize]) -> Result<f64> {
    let state = circuit.run(x)?;
    let dims = circuit.dims();
    let st = strides(&dims);
    let n = circuit.n_parties;
    Ok(state
        .amps()
        .iter()
        .enumerate()
        .filter(|(i, _)| {
            (1..=n).all(|l| {
                let f = circuit.flag_factor(l);
                (i / st[f]) % dims[f] == 1
            })
        })
        .map(|(_, a)| a.norm_sqr())
        .sum())
}

/// Result of rewriting a circuit into the single-control framework.
#[derive(Debug)]
pub struct RewrittenCircuit {
    pub spec: ProtocolSpec,
    /// Whether every branch of the circuit fires every party exactly once
    /// for every setting vector; when false the rewritten protocol will
    /// fail validation, matching the once-only flag requirement.
    pub fires_once: bool,
}

/// Rewrite a circuit of individual controlled lab gates into a protocol
/// with one activation per gate. The protocol system absorbs every circuit
/// system factor (control qubits included); a fresh `(N+1)`-level control
/// is introduced and returned to its zero level after each fragment.
pub fn rewrite_circuit(circuit: &IndividualGateCircuit) -> Result<RewrittenCircuit> {
    let n = circuit.n_parties;
    let t = circuit.gate_count();
    if t == 0 {
        return Err(Error::Precondition("circuit contains no lab gates".into()));
    }
    for l in 1..=n {
        let used = circuit.elements.iter().any(
            |e| matches!(e, CircuitElement::LabGate { party, .. } if *party == l),
        );
        if !used {
            return Err(Error::Precondition(format!(
                "party {l}'s gate is never used"
            )));
        }
    }
    let d_s: usize = circuit.system_dims.iter().product();
    let d_c = n + 1;
    // every party appears in at least one gate, so t >= n
    let layout = SpaceLayout::new(d_s, n, circuit.alphabets.clone(), t + 1)?;

    let mut steps: Vec<COperator> = Vec::with_capacity(t);
    let mut pending = COperator::identity(d_s * d_c);
    for e in &circuit.elements {
        match e {
            CircuitElement::Unitary { factors, op } => {
                let on_system = crate::tensor::embed(op, &circuit.system_dims, factors)?;
                let lifted = kron(&on_system, &COperator::identity(d_c))?;
                pending = lifted.mul(&pending)?;
            }
            CircuitElement::LabGate { party, control_factor } => {
                let w = control_prep(d_c, *party);
                let cw = controlled_prep_on_system(
                    &circuit.system_dims,
                    *control_factor,
                    &w,
                )?;
                steps.push(cw.mul(&pending)?);
                // the next step starts by undoing the preparation
                pending = cw.adjoint();
            }
        }
    }
    // anything after the last gate acts on neither results nor flags and
    // cannot change the outcome statistics; drop it

    let mut measurements = Vec::with_capacity(n);
    for l in 1..=n {
        let mut dims_ext = circuit.system_dims.clone();
        dims_ext.push(circuit.alphabets[l - 1]);
        let mut op_factors = circuit.measurement_factors[l - 1].clone();
        op_factors.push(dims_ext.len() - 1);
        let mut per_setting = BTreeMap::new();
        for x in &circuit.settings[l - 1] {
            let op = circuit.measurements[l - 1].get(x).expect("validated");
            per_setting.insert(*x, crate::tensor::embed(op, &dims_ext, &op_factors)?);
        }
        measurements.push(per_setting);
    }

    let spec = ProtocolSpec::new(layout, steps, measurements, circuit.settings.clone())?;
    let mut fires_once = true;
    for x in circuit.all_settings() {
        if (1.0 - circuit_flag_success(circuit, &x)?).abs() > tol::DISTRIBUTION {
            fires_once = false;
            break;
        }
    }
    Ok(RewrittenCircuit { spec, fires_once })
}

/// `W` on the big control, conditioned on a qubit inside the system:
/// `sum_{i_s: qubit 0} |i_s><i_s| (x) I + sum_{i_s: qubit 1} |i_s><i_s| (x) W`.
fn controlled_prep_on_system(
    system_dims: &[usize],
    control_factor: usize,
    w: &COperator,
) -> Result<COperator> {
    let d_s: usize = system_dims.iter().product();
    let d_c = w.rows();
    let st = strides(system_dims);
    let qubit = |i_s: usize| (i_s / st[control_factor]) % system_dims[control_factor];
    let mut out = COperator::zeros(d_s * d_c, d_s * d_c);
    for i_s in 0..d_s {
        if qubit(i_s) == 1 {
            for ic_r in 0..d_c {
                for ic_c in 0..d_c {
                    let v = w.get(ic_r, ic_c);
                    if v != ZERO {
                        out.set(i_s * d_c + ic_r, i_s * d_c + ic_c, v);
                    }
                }
            }
        } else {
            for ic in 0..d_c {
                out.set(i_s * d_c + ic, i_s * d_c + ic, ONE);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::quantum_distribution;
    use crate::fixtures;
    use crate::protocol::validate_protocol;

    fn small_spec() -> ProtocolSpec {
        fixtures::random_protocol(
            &fixtures::RandomProtocolParams { n_parties: 2, system_dim: 2, t_steps: 2 },
            77,
        )
        .unwrap()
    }

    #[test]
    fn individual_gate_branches() {
        let spec = small_spec();
        let dims = individual_dims(&spec);
        let total: usize = dims.iter().product();
        // control qubit zero: identity
        let e = CState::basis(total, 1);
        let out = apply_individual_gate(&spec, 1, 0, &e).unwrap();
        assert!(out.max_abs_diff(&e) < 1e-15);
        // dense form is unitary
        let g = individual_gate(&spec, 1, 0).unwrap();
        assert!(g.is_unitary(tol::ALGEBRAIC));
        // control qubit one, flag zero: flag rises to one
        let st = strides(&dims);
        let idx = st[0]; // control qubit 1, all else zero
        let out = apply_individual_gate(&spec, 2, 1, &CState::basis(total, idx)).unwrap();
        for (i, a) in out.amps().iter().enumerate() {
            if a.norm_sqr() > 1e-20 {
                let flag2 = (i / st[2 + 2 + 1]) % dims[2 + 2 + 1];
                assert_eq!(flag2, 1);
            }
        }
    }

    #[test]
    fn prepared_construction_matches_individual_gate() {
        let spec = small_spec();
        let x = SettingVector::new(&spec, vec![1, 0]).unwrap();
        for party in 1..=2 {
            let dev = prepared_sector_deviation(&spec, party, &x).unwrap();
            assert!(dev <= tol::SECTOR, "party {party}: {dev}");
        }
    }

    #[test]
    fn ladder_construction_matches_combined_step() {
        let spec = small_spec();
        for x in spec.all_settings() {
            let dev = ladder_sector_deviation(&spec, &x).unwrap();
            assert!(dev <= tol::SECTOR, "{dev}");
        }
    }

    #[test]
    fn dense_forms_agree_with_appliers_on_tiny_spec() {
        let spec = fixtures::random_protocol(
            &fixtures::RandomProtocolParams { n_parties: 1, system_dim: 2, t_steps: 1 },
            3,
        )
        .unwrap();
        let x = SettingVector::new(&spec, vec![0]).unwrap();
        let dense = individual_from_v(&spec, 1, &x).unwrap();
        assert!(dense.is_unitary(1e-12));
        let ladder = v_from_individuals(&spec, &x).unwrap();
        assert!(ladder.is_unitary(1e-12));
    }

    #[test]
    fn switch_circuit_reproduces_switch_statistics() {
        let circuit = fixtures::switch_circuit();
        let spec = fixtures::switch_protocol();
        for x in spec.all_settings() {
            let direct = simulate_circuit(&circuit, x.values()).unwrap();
            let reference = quantum_distribution(&spec, &x).unwrap();
            assert!(
                direct.max_abs_diff(&reference) < 1e-10,
                "settings {:?}",
                x.values()
            );
        }
    }

    #[test]
    fn rewritten_switch_circuit_reproduces_probabilities() {
        let circuit = fixtures::switch_circuit();
        let rewritten = rewrite_circuit(&circuit).unwrap();
        assert!(rewritten.fires_once);
        assert_eq!(rewritten.spec.t_steps(), circuit.gate_count());
        let report = validate_protocol(&rewritten.spec).unwrap();
        assert!(report.valid, "leak {}", report.max_leak);
        for x in circuit.all_settings() {
            let direct = simulate_circuit(&circuit, &x).unwrap();
            let xv = SettingVector::new(&rewritten.spec, x.clone()).unwrap();
            let via_protocol = quantum_distribution(&rewritten.spec, &xv).unwrap();
            assert!(via_protocol.max_abs_diff(&direct) < 1e-9, "settings {x:?}");
        }
        // the flagship interference value survives the rewrite
        let xv = SettingVector::new(&rewritten.spec, vec![0, 1, 1]).unwrap();
        let dist = quantum_distribution(&rewritten.spec, &xv).unwrap();
        assert!((dist.prob(&[0, 0, 0]).unwrap() - 5.0 / 16.0).abs() < 1e-10);
    }

    #[test]
    fn rewritten_random_circuits_match_direct_simulation() {
        for seed in [1u64, 4, 6] {
            let circuit = fixtures::random_circuit(seed);
            let rewritten = rewrite_circuit(&circuit).unwrap();
            assert!(rewritten.fires_once, "seed {seed}");
            for x in circuit.all_settings() {
                let direct = simulate_circuit(&circuit, &x).unwrap();
                let xv = SettingVector::new(&rewritten.spec, x.clone()).unwrap();
                let via_protocol = quantum_distribution(&rewritten.spec, &xv).unwrap();
                assert!(
                    via_protocol.max_abs_diff(&direct) < 1e-9,
                    "seed {seed}, settings {x:?}"
                );
            }
        }
    }

    #[test]
    fn simple_ladder_circuit_round_trips_to_one_step_per_party() {
        let circuit = fixtures::sequential_fire_circuit(2, 5);
        let rewritten = rewrite_circuit(&circuit).unwrap();
        assert_eq!(rewritten.spec.t_steps(), 2);
        assert!(rewritten.fires_once);
        assert!(validate_protocol(&rewritten.spec).unwrap().valid);
        for x in circuit.all_settings() {
            let direct = simulate_circuit(&circuit, &x).unwrap();
            let xv = SettingVector::new(&rewritten.spec, x).unwrap();
            let via_protocol = quantum_distribution(&rewritten.spec, &xv).unwrap();
            assert!(via_protocol.max_abs_diff(&direct) < 1e-10);
        }
    }

    #[test]
    fn double_firing_circuits_are_flagged_and_invalid() {
        let circuit = fixtures::double_fire_circuit();
        let rewritten = rewrite_circuit(&circuit).unwrap();
        assert!(!rewritten.fires_once);
        let report = validate_protocol(&rewritten.spec).unwrap();
        assert!(!report.valid);
    }

    #[test]
    fn rewrite_requires_every_party() {
        let circuit = fixtures::sequential_fire_circuit(2, 5);
        // drop party 2's gate
        let elements: Vec<CircuitElement> = circuit
            .elements()
            .iter()
            .filter(|e| !matches!(e, CircuitElement::LabGate { party, .. } if *party == 2))
            .cloned()
            .collect();
        let broken = IndividualGateCircuit::new(
            circuit.system_dims().to_vec(),
            circuit.alphabets().to_vec(),
            circuit.settings_domains().to_vec(),
            circuit.measurement_factors().to_vec(),
            circuit.measurements().to_vec(),
            elements,
        )
        .unwrap();
        assert!(matches!(
            rewrite_circuit(&broken),
            Err(Error::Precondition(_))
        ));
    }
}
