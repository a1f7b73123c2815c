//! Protocol model: composite space layout, protocol specifications, the
//! controlled lab-activation step, and validity checking.
//!
//! The composite space factors as `system (x) control (x) result registers
//! (x) flag registers`, in that canonical order, with the result and flag
//! registers of party 1 most significant within their groups. The control
//! has `N+1` levels: level `l >= 1` triggers party `l`, level `0` is the
//! do-nothing command. Party labels are 1-based throughout.
//!
//! Flags count how often a party's lab has fired. They are truncated to
//! `flag_dim` levels and raised by a cyclic shift, which is unitary and, for
//! `flag_dim >= steps + 1`, never wraps on any state reachable from the
//! all-zero flag start; [`wrap_amplitude`] checks that numerically.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{
    apply_embedded, apply_embedded_controlled, embed, strides, COperator, CState, C64,
    DIM_CAPACITY, ONE, ZERO,
};
use crate::tol;

/// Dimensions and factor ordering of the composite space.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceLayout {
    system_dim: usize,
    n_parties: usize,
    alphabets: Vec<usize>,
    flag_dim: usize,
    dims: Vec<usize>,
    strides: Vec<usize>,
}

impl SpaceLayout {
    pub fn new(
        system_dim: usize,
        n_parties: usize,
        alphabets: Vec<usize>,
        flag_dim: usize,
    ) -> Result<Self> {
        if system_dim < 1 {
            return Err(Error::Structural("system dimension must be >= 1".into()));
        }
        if n_parties < 1 {
            return Err(Error::Structural("at least one party required".into()));
        }
        if alphabets.len() != n_parties {
            return Err(Error::Structural(format!(
                "{} alphabets for {} parties",
                alphabets.len(),
                n_parties
            )));
        }
        if alphabets.iter().any(|&a| a < 1) {
            return Err(Error::Structural("alphabets must be non-empty".into()));
        }
        if flag_dim < 2 {
            return Err(Error::Structural("flag dimension must be >= 2".into()));
        }
        let mut dims = Vec::with_capacity(2 + 2 * n_parties);
        dims.push(system_dim);
        dims.push(n_parties + 1);
        dims.extend_from_slice(&alphabets);
        dims.extend(std::iter::repeat(flag_dim).take(n_parties));
        let mut total = 1usize;
        for &d in &dims {
            total = total
                .checked_mul(d)
                .filter(|&t| t <= DIM_CAPACITY)
                .ok_or_else(|| {
                    Error::CapacityExceeded(format!(
                        "composite dimension exceeds {DIM_CAPACITY}"
                    ))
                })?;
        }
        let strides = strides(&dims);
        Ok(SpaceLayout { system_dim, n_parties, alphabets, flag_dim, dims, strides })
    }

    pub fn system_dim(&self) -> usize {
        self.system_dim
    }

    pub fn n_parties(&self) -> usize {
        self.n_parties
    }

    pub fn control_dim(&self) -> usize {
        self.n_parties + 1
    }

    pub fn alphabets(&self) -> &[usize] {
        &self.alphabets
    }

    pub fn alphabet(&self, party: usize) -> usize {
        self.alphabets[party - 1]
    }

    pub fn flag_dim(&self) -> usize {
        self.flag_dim
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn total_dim(&self) -> usize {
        self.system_dim * self.control_dim() * self.result_dim() * self.flag_space_dim()
    }

    pub fn result_dim(&self) -> usize {
        self.alphabets.iter().product()
    }

    pub fn flag_space_dim(&self) -> usize {
        self.flag_dim.pow(self.n_parties as u32)
    }

    pub const fn system_factor(&self) -> usize {
        0
    }

    pub const fn control_factor(&self) -> usize {
        1
    }

    pub fn result_factor(&self, party: usize) -> usize {
        debug_assert!((1..=self.n_parties).contains(&party));
        1 + party
    }

    pub fn flag_factor(&self, party: usize) -> usize {
        debug_assert!((1..=self.n_parties).contains(&party));
        1 + self.n_parties + party
    }

    pub fn digit(&self, index: usize, factor: usize) -> usize {
        (index / self.strides[factor]) % self.dims[factor]
    }

    pub fn control_level(&self, index: usize) -> usize {
        self.digit(index, self.control_factor())
    }

    pub fn result_value(&self, index: usize, party: usize) -> usize {
        self.digit(index, self.result_factor(party))
    }

    pub fn flag_value(&self, index: usize, party: usize) -> usize {
        self.digit(index, self.flag_factor(party))
    }

    /// Flattened index of the basis state with the given factor digits.
    pub fn compose(&self, digits: &[usize]) -> usize {
        assert_eq!(digits.len(), self.dims.len());
        let mut idx = 0usize;
        for (f, &d) in digits.iter().enumerate() {
            assert!(d < self.dims[f], "digit out of range");
            idx += d * self.strides[f];
        }
        idx
    }

    /// Basis index with system digit `s`, control digit `c`, per-party
    /// result digits and per-party flag digits.
    pub fn index_of(&self, s: usize, c: usize, results: &[usize], flags: &[usize]) -> usize {
        assert!(s < self.system_dim && c < self.control_dim());
        assert_eq!(results.len(), self.n_parties);
        assert_eq!(flags.len(), self.n_parties);
        let mut idx = s * self.strides[0] + c * self.strides[1];
        for (l, (&r, &f)) in results.iter().zip(flags).enumerate() {
            let party = l + 1;
            assert!(r < self.alphabet(party) && f < self.flag_dim);
            idx += r * self.strides[self.result_factor(party)];
            idx += f * self.strides[self.flag_factor(party)];
        }
        idx
    }
}

/// A validated per-party setting assignment.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SettingVector(Vec<usize>);

impl SettingVector {
    pub fn new(spec: &ProtocolSpec, values: Vec<usize>) -> Result<Self> {
        if values.len() != spec.layout.n_parties() {
            return Err(Error::SettingOutOfDomain(format!(
                "{} settings for {} parties",
                values.len(),
                spec.layout.n_parties()
            )));
        }
        for (l0, v) in values.iter().enumerate() {
            if !spec.settings[l0].contains(v) {
                return Err(Error::SettingOutOfDomain(format!(
                    "setting {} for party {} (domain {:?})",
                    v,
                    l0 + 1,
                    spec.settings[l0]
                )));
            }
        }
        Ok(SettingVector(values))
    }

    pub fn values(&self) -> &[usize] {
        &self.0
    }

    /// Setting of a 1-based party.
    pub fn of(&self, party: usize) -> usize {
        self.0[party - 1]
    }

    /// Copy with one party's setting replaced (revalidated).
    pub fn with(&self, spec: &ProtocolSpec, party: usize, value: usize) -> Result<Self> {
        let mut v = self.0.clone();
        v[party - 1] = value;
        SettingVector::new(spec, v)
    }
}

/// A protocol: the layout, the per-step unitaries on system (x) control, and
/// the per-party per-setting measurement unitaries on system (x) result.
#[derive(Clone, Debug)]
pub struct ProtocolSpec {
    layout: SpaceLayout,
    step_unitaries: Vec<COperator>,
    measurements: Vec<BTreeMap<usize, COperator>>,
    settings: Vec<Vec<usize>>,
}

impl ProtocolSpec {
    pub fn new(
        layout: SpaceLayout,
        step_unitaries: Vec<COperator>,
        measurements: Vec<BTreeMap<usize, COperator>>,
        settings: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let n = layout.n_parties();
        if step_unitaries.len() < n {
            return Err(Error::Structural(format!(
                "{} steps for {} parties: a protocol needs at least one step per party",
                step_unitaries.len(),
                n
            )));
        }
        if layout.flag_dim() < step_unitaries.len() + 1 {
            return Err(Error::Structural(format!(
                "flag dimension {} cannot count up to {} steps without wrapping",
                layout.flag_dim(),
                step_unitaries.len()
            )));
        }
        let sc = layout.system_dim() * layout.control_dim();
        for (t0, u) in step_unitaries.iter().enumerate() {
            if u.rows() != sc || u.cols() != sc {
                return Err(Error::Structural(format!(
                    "step {} operator is {}x{}, expected {sc}x{sc}",
                    t0 + 1,
                    u.rows(),
                    u.cols()
                )));
            }
            if !u.is_unitary(tol::ALGEBRAIC) {
                return Err(Error::NotUnitary(format!(
                    "step {} operator (defect {:.3e})",
                    t0 + 1,
                    u.unitarity_defect()
                )));
            }
        }
        if settings.len() != n || measurements.len() != n {
            return Err(Error::Structural(
                "per-party settings and measurements must cover every party".into(),
            ));
        }
        for (l0, domain) in settings.iter().enumerate() {
            if domain.is_empty() {
                return Err(Error::Structural(format!(
                    "party {} has an empty settings domain",
                    l0 + 1
                )));
            }
            let mut sorted = domain.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != domain.len() {
                return Err(Error::Structural(format!(
                    "party {} settings domain has duplicates",
                    l0 + 1
                )));
            }
            let sr = layout.system_dim() * layout.alphabet(l0 + 1);
            for x in domain {
                let op = measurements[l0].get(x).ok_or_else(|| {
                    Error::Structural(format!(
                        "party {} is missing the measurement for setting {x}",
                        l0 + 1
                    ))
                })?;
                if op.rows() != sr || op.cols() != sr {
                    return Err(Error::Structural(format!(
                        "party {} setting {x} measurement is {}x{}, expected {sr}x{sr}",
                        l0 + 1,
                        op.rows(),
                        op.cols()
                    )));
                }
                if !op.is_unitary(tol::ALGEBRAIC) {
                    return Err(Error::NotUnitary(format!(
                        "party {} setting {x} measurement (defect {:.3e})",
                        l0 + 1,
                        op.unitarity_defect()
                    )));
                }
            }
        }
        Ok(ProtocolSpec { layout, step_unitaries, measurements, settings })
    }

    pub fn layout(&self) -> &SpaceLayout {
        &self.layout
    }

    pub fn t_steps(&self) -> usize {
        self.step_unitaries.len()
    }

    pub fn n_parties(&self) -> usize {
        self.layout.n_parties()
    }

    pub fn step_unitary(&self, t: usize) -> &COperator {
        &self.step_unitaries[t - 1]
    }

    pub fn step_unitaries(&self) -> &[COperator] {
        &self.step_unitaries
    }

    pub fn setting_domain(&self, party: usize) -> &[usize] {
        &self.settings[party - 1]
    }

    pub fn settings_domains(&self) -> &[Vec<usize>] {
        &self.settings
    }

    pub fn measurement(&self, party: usize, setting: usize) -> Result<&COperator> {
        self.measurements[party - 1].get(&setting).ok_or_else(|| {
            Error::SettingOutOfDomain(format!("party {party}, setting {setting}"))
        })
    }

    pub fn measurements(&self) -> &[BTreeMap<usize, COperator>] {
        &self.measurements
    }

    /// Number of joint setting vectors.
    pub fn settings_count(&self) -> usize {
        self.settings.iter().map(Vec::len).product()
    }

    /// Every joint setting vector, mixed-radix over the per-party domains
    /// with party 1 most significant.
    pub fn all_settings(&self) -> Vec<SettingVector> {
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
        out.into_iter().map(SettingVector).collect()
    }
}

/// Cyclic flag shift `|n> -> |n+1 mod dim>`.
pub fn flag_shift(dim: usize) -> COperator {
    let mut g = COperator::zeros(dim, dim);
    for n in 0..dim {
        g.set((n + 1) % dim, n, ONE);
    }
    g
}

/// The canonical start state: everything in its zero level.
pub fn initial_state(layout: &SpaceLayout) -> CState {
    CState::basis(layout.total_dim(), 0)
}

/// Apply the controlled lab-activation step for settings `x`: on control
/// level 0, identity; on level `l`, party `l`'s measurement for `x_l` on
/// system (x) result, and the flag shift on the party's flag.
pub fn apply_v(spec: &ProtocolSpec, x: &SettingVector, state: &CState) -> Result<CState> {
    apply_v_on(
        spec,
        x,
        spec.layout().dims(),
        &CanonicalPositions::of(spec.layout()),
        state,
    )
}

/// Positions of the protocol factors inside an arbitrary composite space.
/// The gate-equivalence constructions reuse the activation step on larger
/// spaces by supplying non-canonical positions.
#[derive(Clone, Debug)]
pub struct CanonicalPositions {
    pub system: usize,
    pub control: usize,
    pub results: Vec<usize>,
    pub flags: Vec<usize>,
}

impl CanonicalPositions {
    pub fn of(layout: &SpaceLayout) -> Self {
        let n = layout.n_parties();
        CanonicalPositions {
            system: layout.system_factor(),
            control: layout.control_factor(),
            results: (1..=n).map(|l| layout.result_factor(l)).collect(),
            flags: (1..=n).map(|l| layout.flag_factor(l)).collect(),
        }
    }
}

/// [`apply_v`] generalised to any composite space containing the protocol
/// factors at the given positions.
pub fn apply_v_on(
    spec: &ProtocolSpec,
    x: &SettingVector,
    dims: &[usize],
    pos: &CanonicalPositions,
    state: &CState,
) -> Result<CState> {
    let gamma = flag_shift(spec.layout().flag_dim());
    let mut out = state.clone();
    for l in 1..=spec.n_parties() {
        let meas = spec.measurement(l, x.of(l))?;
        out = apply_embedded_controlled(
            meas,
            dims,
            &[pos.system, pos.results[l - 1]],
            (pos.control, l),
            &out,
        )?;
        out = apply_embedded_controlled(
            &gamma,
            dims,
            &[pos.flags[l - 1]],
            (pos.control, l),
            &out,
        )?;
    }
    Ok(out)
}

/// Dense matrix of the lab-activation step (capacity-guarded; prefer
/// [`apply_v`] on large layouts).
pub fn build_v(spec: &ProtocolSpec, x: &SettingVector) -> Result<COperator> {
    let layout = spec.layout();
    let total = layout.total_dim();
    if total * total > crate::tensor::DENSE_ENTRY_CAPACITY {
        return Err(Error::CapacityExceeded(format!(
            "dense activation step at dimension {total}"
        )));
    }
    let dims = layout.dims();
    let gamma = flag_shift(layout.flag_dim());
    // |0><0| (x) I plus one controlled block per party.
    let mut out = COperator::zeros(total, total);
    let cf = layout.control_factor();
    for i in 0..total {
        if layout.digit(i, cf) == 0 {
            out.set(i, i, ONE);
        }
    }
    for l in 1..=spec.n_parties() {
        let meas = spec.measurement(l, x.of(l))?;
        let block = embed(meas, dims, &[layout.system_factor(), layout.result_factor(l)])?;
        let block = block.mul(&embed(&gamma, dims, &[layout.flag_factor(l)])?)?;
        for i in 0..total {
            if layout.digit(i, cf) != l {
                continue;
            }
            for j in 0..total {
                if layout.digit(j, cf) != l {
                    continue;
                }
                let v = block.get(i, j);
                if v != ZERO {
                    out.set(i, j, v);
                }
            }
        }
    }
    Ok(out)
}

/// Apply the step unitary for step `t` (acting on system and control).
pub fn apply_step(spec: &ProtocolSpec, t: usize, state: &CState) -> Result<CState> {
    let layout = spec.layout();
    apply_embedded(
        spec.step_unitary(t),
        layout.dims(),
        &[layout.system_factor(), layout.control_factor()],
        state,
    )
}

/// Run the whole protocol from the start state.
pub fn evolve(spec: &ProtocolSpec, x: &SettingVector) -> Result<CState> {
    let mut state = initial_state(spec.layout());
    for t in 1..=spec.t_steps() {
        state = apply_step(spec, t, &state)?;
        state = apply_v(spec, x, &state)?;
    }
    Ok(state)
}

/// Squared norm of the component where every flag reads exactly one.
pub fn flag_success_probability(layout: &SpaceLayout, state: &CState) -> f64 {
    let n = layout.n_parties();
    state
        .amps()
        .iter()
        .enumerate()
        .filter(|(i, _)| (1..=n).all(|l| layout.flag_value(*i, l) == 1))
        .map(|(_, a)| a.norm_sqr())
        .sum()
}

/// Per-setting flag-leakage report.
#[derive(Clone, Debug)]
pub struct ValidityReport {
    pub per_setting: Vec<(SettingVector, f64)>,
    pub max_leak: f64,
    pub tolerance: f64,
    pub valid: bool,
}

/// Run the protocol for every setting vector and report the probability
/// that some flag fails to end at exactly one. Structural defects surface
/// as errors when the spec is built; a well-formed spec is *valid* iff the
/// worst-case leakage stays within the distribution tolerance.
pub fn validate_protocol(spec: &ProtocolSpec) -> Result<ValidityReport> {
    let all = spec.all_settings();
    let leaks = par::map_slice(&all, |x| {
        let final_state = evolve(spec, x)?;
        Ok(1.0 - flag_success_probability(spec.layout(), &final_state))
    });
    let mut per_setting = Vec::with_capacity(all.len());
    let mut max_leak: f64 = 0.0;
    for (x, leak) in all.into_iter().zip(leaks) {
        let leak = leak?;
        max_leak = max_leak.max(leak);
        per_setting.push((x, leak));
    }
    Ok(ValidityReport {
        per_setting,
        max_leak,
        tolerance: tol::DISTRIBUTION,
        valid: max_leak <= tol::DISTRIBUTION,
    })
}

/// Leakage for a single setting vector.
pub fn leak_for(spec: &ProtocolSpec, x: &SettingVector) -> Result<f64> {
    let final_state = evolve(spec, x)?;
    Ok(1.0 - flag_success_probability(spec.layout(), &final_state))
}

/// Largest amplitude ever found on a configuration about to wrap a flag:
/// control on level `l` while party `l`'s flag sits at its top level, just
/// before an activation step.
pub fn wrap_amplitude(spec: &ProtocolSpec, x: &SettingVector) -> Result<f64> {
    let layout = spec.layout();
    let top = layout.flag_dim() - 1;
    let mut state = initial_state(layout);
    let mut worst: f64 = 0.0;
    for t in 1..=spec.t_steps() {
        state = apply_step(spec, t, &state)?;
        let mut danger = 0.0f64;
        for (i, a) in state.amps().iter().enumerate() {
            let l = layout.control_level(i);
            if l >= 1 && layout.flag_value(i, l) == top {
                danger += a.norm_sqr();
            }
        }
        worst = worst.max(danger.sqrt());
        state = apply_v(spec, x, &state)?;
    }
    Ok(worst)
}

/// Named operator constructions used by fixtures and document parsing.
pub mod gates {
    use super::*;

    pub fn pauli_x() -> COperator {
        COperator::from_nested(&[vec![ZERO, ONE], vec![ONE, ZERO]])
    }

    pub fn hadamard() -> COperator {
        let h = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        COperator::from_nested(&[vec![h, h], vec![h, -h]])
    }

    /// `P |j> = |perm[j]>`.
    pub fn permutation(perm: &[usize]) -> COperator {
        let d = perm.len();
        let mut seen = vec![false; d];
        for &p in perm {
            assert!(p < d && !seen[p], "not a permutation");
            seen[p] = true;
        }
        let mut m = COperator::zeros(d, d);
        for (j, &i) in perm.iter().enumerate() {
            m.set(i, j, ONE);
        }
        m
    }

    /// `I_system (x) M` on system (x) control.
    pub fn control_unitary(system_dim: usize, m: &COperator) -> COperator {
        crate::tensor::kron(&COperator::identity(system_dim), m).expect("small")
    }

    /// `I_system (x) P` for a permutation of control levels.
    pub fn control_permutation(system_dim: usize, perm: &[usize]) -> COperator {
        control_unitary(system_dim, &permutation(perm))
    }

    /// `sum_l A_l (x) |l><l|` on system (x) control; levels without a block
    /// get the identity.
    pub fn controlled_system(
        system_dim: usize,
        control_dim: usize,
        blocks: &[(usize, COperator)],
    ) -> COperator {
        let mut per_level: Vec<COperator> =
            (0..control_dim).map(|_| COperator::identity(system_dim)).collect();
        for (lvl, op) in blocks {
            assert!(*lvl < control_dim);
            assert_eq!(op.rows(), system_dim);
            per_level[*lvl] = op.clone();
        }
        let d = system_dim * control_dim;
        let mut out = COperator::zeros(d, d);
        for (lvl, op) in per_level.iter().enumerate() {
            for i in 0..system_dim {
                for j in 0..system_dim {
                    let v = op.get(i, j);
                    if v != ZERO {
                        out.set(i * control_dim + lvl, j * control_dim + lvl, v);
                    }
                }
            }
        }
        out
    }

    /// Unitary on a 2-dimensional span of two levels of a `dim`-level
    /// space, identity elsewhere. `block` is 2x2 and acts on
    /// `(|a>, |b>)`.
    pub fn two_level_unitary(dim: usize, a: usize, b: usize, block: &COperator) -> COperator {
        assert!(a < dim && b < dim && a != b);
        assert_eq!(block.rows(), 2);
        let mut m = COperator::identity(dim);
        m.set(a, a, block.get(0, 0));
        m.set(a, b, block.get(0, 1));
        m.set(b, a, block.get(1, 0));
        m.set(b, b, block.get(1, 1));
        m
    }

    /// Readout of a subsystem in the given orthonormal basis: on
    /// `subsystem (x) register`, maps `|b_k>|j> -> |b_k>|j + k mod d_r>`.
    /// Starting the register at zero records the basis label.
    pub fn readout_unitary(basis: &[Vec<C64>], register_dim: usize) -> COperator {
        let m = basis.len();
        assert!(m >= 1 && basis.iter().all(|b| b.len() == m));
        assert_eq!(m, register_dim, "one register level per basis state");
        let d = m * register_dim;
        let mut out = COperator::zeros(d, d);
        for (k, b) in basis.iter().enumerate() {
            // |b_k><b_k| (x) shift^k
            for i in 0..m {
                for j in 0..m {
                    let v = b[i] * b[j].conj();
                    if v == ZERO {
                        continue;
                    }
                    for r in 0..register_dim {
                        let r2 = (r + k) % register_dim;
                        let cur = out.get(i * register_dim + r2, j * register_dim + r);
                        out.set(i * register_dim + r2, j * register_dim + r, cur + v);
                    }
                }
            }
        }
        out
    }

    /// Extend a partial isometry (prescribed orthonormal columns) to a full
    /// unitary by Gram-Schmidt over the remaining basis vectors, in index
    /// order. Deterministic.
    pub fn complete_isometry(columns: &[(usize, Vec<C64>)], dim: usize) -> Result<COperator> {
        let mut assigned: Vec<Option<Vec<C64>>> = vec![None; dim];
        let mut taken: Vec<Vec<C64>> = Vec::new();
        for (j, col) in columns {
            if *j >= dim || col.len() != dim {
                return Err(Error::DimensionMismatch("prescribed column".into()));
            }
            if assigned[*j].is_some() {
                return Err(Error::Precondition(format!("column {j} prescribed twice")));
            }
            for prev in &taken {
                let ip: C64 = prev.iter().zip(col).map(|(a, b)| a.conj() * b).sum();
                if ip.norm() > tol::ALGEBRAIC {
                    return Err(Error::Precondition(
                        "prescribed columns are not orthonormal".into(),
                    ));
                }
            }
            let n: f64 = col.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
            if (n - 1.0).abs() > tol::ALGEBRAIC {
                return Err(Error::Precondition(
                    "prescribed columns are not orthonormal".into(),
                ));
            }
            assigned[*j] = Some(col.clone());
            taken.push(col.clone());
        }
        let mut candidate = 0usize;
        for j in 0..dim {
            if assigned[j].is_some() {
                continue;
            }
            loop {
                assert!(candidate < dim, "ran out of completion candidates");
                let mut v = vec![ZERO; dim];
                v[candidate] = ONE;
                candidate += 1;
                for _ in 0..2 {
                    for prev in &taken {
                        let ip: C64 = prev.iter().zip(&v).map(|(a, b)| a.conj() * b).sum();
                        for (vi, pi) in v.iter_mut().zip(prev) {
                            *vi -= ip * pi;
                        }
                    }
                }
                let n: f64 = v.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
                if n > 0.5 {
                    for vi in v.iter_mut() {
                        *vi /= n;
                    }
                    assigned[j] = Some(v.clone());
                    taken.push(v);
                    break;
                }
            }
        }
        let mut m = COperator::zeros(dim, dim);
        for (j, col) in assigned.into_iter().enumerate() {
            for (i, v) in col.expect("all columns assigned").into_iter().enumerate() {
                m.set(i, j, v);
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn layout_dimensions_and_strides() {
        let layout = SpaceLayout::new(2, 1, vec![2], 2).unwrap();
        assert_eq!(layout.total_dim(), 16);
        assert_eq!(layout.dims(), &[2, 2, 2, 2]);
        let switch = fixtures::switch_layout();
        assert_eq!(switch.total_dim(), 4 * 4 * 8 * 64);
        assert_eq!(switch.total_dim(), 8192);
    }

    #[test]
    fn initial_state_is_all_zero_basis() {
        let layout = SpaceLayout::new(2, 1, vec![2], 2).unwrap();
        let s = initial_state(&layout);
        assert_eq!(s.dim(), 16);
        assert_eq!(s.amp(0), ONE);
        assert!((s.norm_sqr() - 1.0).abs() < 1e-15);
        let switch = fixtures::switch_layout();
        let s = initial_state(&switch);
        assert_eq!(s.dim(), 8192);
        assert_eq!(s.amp(0), ONE);
    }

    #[test]
    fn flag_shift_is_cyclic_and_unitary() {
        let g = flag_shift(4);
        assert!(g.is_unitary(0.0));
        for n in 0..4 {
            let out = g.apply(&CState::basis(4, n)).unwrap();
            assert_eq!(out.amp((n + 1) % 4), ONE);
        }
    }

    #[test]
    fn spec_requires_enough_steps() {
        let layout = SpaceLayout::new(2, 2, vec![2, 2], 3).unwrap();
        let res = ProtocolSpec::new(
            layout,
            vec![COperator::identity(6)],
            vec![BTreeMap::new(), BTreeMap::new()],
            vec![vec![0], vec![0]],
        );
        assert!(matches!(res, Err(Error::Structural(_))));
    }

    #[test]
    fn spec_rejects_non_unitary_steps() {
        let layout = SpaceLayout::new(2, 1, vec![2], 3).unwrap();
        let mut bad = COperator::identity(4);
        bad.set(0, 0, C64::new(2.0, 0.0));
        let res = ProtocolSpec::new(
            layout,
            vec![bad, COperator::identity(4)],
            vec![BTreeMap::new()],
            vec![vec![0]],
        );
        assert!(matches!(res, Err(Error::NotUnitary(_))));
    }

    #[test]
    fn activation_step_is_identity_on_idle_control() {
        let spec = fixtures::switch_protocol();
        let x = SettingVector::new(&spec, vec![0, 1, 1]).unwrap();
        let layout = spec.layout();
        // a basis state with control 0 and scattered other digits
        let idx = layout.index_of(3, 0, &[1, 0, 1], &[0, 2, 1]);
        let state = CState::basis(layout.total_dim(), idx);
        let out = apply_v(&spec, &x, &state).unwrap();
        assert!(out.max_abs_diff(&state) < 1e-15);
    }

    #[test]
    fn activation_step_fires_exactly_the_controlled_party() {
        // Control on Alice, flag zero: result register 1 keeps reading zero
        // under her computational measurement of a zero system qubit, and
        // her flag rises to one. Hand-evaluated single basis state.
        let spec = fixtures::switch_protocol();
        let x = SettingVector::new(&spec, vec![0, 1, 1]).unwrap();
        let layout = spec.layout();
        let idx_in = layout.index_of(0, 1, &[0, 0, 0], &[0, 0, 0]);
        let out = apply_v(&spec, &x, &CState::basis(layout.total_dim(), idx_in)).unwrap();
        let idx_expect = layout.index_of(0, 1, &[0, 0, 0], &[1, 0, 0]);
        let expect = CState::basis(layout.total_dim(), idx_expect);
        assert!(out.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn activation_step_matches_dense_matrix_on_small_spec() {
        let spec = fixtures::trivial_single_party();
        let x = SettingVector::new(&spec, vec![0]).unwrap();
        let dense = build_v(&spec, &x).unwrap();
        assert!(dense.is_unitary(tol::ALGEBRAIC));
        let total = spec.layout().total_dim();
        for col in 0..total {
            let e = CState::basis(total, col);
            let fast = apply_v(&spec, &x, &e).unwrap();
            let slow = dense.apply(&e).unwrap();
            assert!(fast.max_abs_diff(&slow) < 1e-14);
        }
    }

    #[test]
    fn activation_step_ignores_settings_of_other_parties() {
        let spec = fixtures::random_protocol(
            &fixtures::RandomProtocolParams { n_parties: 3, system_dim: 2, t_steps: 4 },
            7,
        )
        .unwrap();
        let layout = spec.layout();
        let x = SettingVector::new(&spec, vec![0, 0, 0]).unwrap();
        let x2 = SettingVector::new(&spec, vec![0, 1, 1]).unwrap();
        // basis states with control on party 1: independent of x_2, x_3
        for s in 0..layout.system_dim() {
            let idx = layout.index_of(s, 1, &[0, 0, 0], &[0, 0, 0]);
            let e = CState::basis(layout.total_dim(), idx);
            let a = apply_v(&spec, &x, &e).unwrap();
            let b = apply_v(&spec, &x2, &e).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-15);
        }
    }

    #[test]
    fn switch_protocol_is_valid() {
        let report = validate_protocol(&fixtures::switch_protocol()).unwrap();
        assert!(report.valid);
        assert!(report.max_leak <= 1e-10, "leak {}", report.max_leak);
        assert_eq!(report.per_setting.len(), 8);
    }

    #[test]
    fn idle_steps_never_fire_anything() {
        let spec = fixtures::all_identity_protocol();
        let report = validate_protocol(&spec).unwrap();
        assert!(!report.valid);
        for (_, leak) in &report.per_setting {
            assert!((leak - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_forced_measurement_is_valid() {
        let spec = fixtures::trivial_single_party();
        let report = validate_protocol(&spec).unwrap();
        assert!(report.valid);
        assert!(report.max_leak <= 1e-15);
    }

    #[test]
    fn validity_implies_unit_distribution_mass() {
        let spec = fixtures::switch_protocol();
        for x in spec.all_settings() {
            let final_state = evolve(&spec, &x).unwrap();
            assert!((final_state.norm_sqr() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn no_wrap_on_valid_protocols() {
        let spec = fixtures::switch_protocol();
        for x in spec.all_settings() {
            assert!(wrap_amplitude(&spec, &x).unwrap() <= tol::FLAG_WRAP);
        }
    }

    #[test]
    fn complete_isometry_extends_orthonormally() {
        let cols = vec![
            (0usize, vec![ZERO, C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0), C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0), ZERO]),
        ];
        let u = gates::complete_isometry(&cols, 4).unwrap();
        assert!(u.is_unitary(1e-13));
        assert!((u.get(1, 0).re - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn readout_records_basis_label() {
        let z = gates::readout_unitary(&[vec![ONE, ZERO], vec![ZERO, ONE]], 2);
        assert!(z.is_unitary(1e-14));
        // |1>|0> -> |1>|1>
        let out = z.apply(&CState::basis(4, 2)).unwrap();
        assert_eq!(out.amp(3), ONE);
    }
}
