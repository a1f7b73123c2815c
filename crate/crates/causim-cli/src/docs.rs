//! Document formats: self-contained JSON descriptions of protocols,
//! individual-gate circuits, extracted causal models, distribution
//! families, and membership certificates.
//!
//! Complex entries are `[re, im]` pairs in decimal; parsing is exact for
//! dyadic rationals and otherwise takes the nearest representable value.
//! Named gates are syntactic sugar expanded at parse time; emitted
//! documents always carry raw matrices, so archives stay self-contained.
//! Unknown fields are rejected everywhere.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use causim::dist::DistributionFamily;
use causim::equiv::{CircuitElement, IndividualGateCircuit};
use causim::exec::HistoryEntry;
use causim::extract::CausalModel;
use causim::polytope::PolytopeCertificate;
use causim::protocol::{gates, ProtocolSpec, SpaceLayout};
use causim::tensor::{embed, COperator, C64, ONE, ZERO};
use causim::{Error, Result};

fn err(message: impl Into<String>) -> Error {
    Error::Structural(message.into())
}

pub fn matrix_to_rows(op: &COperator) -> Vec<Vec<[f64; 2]>> {
    (0..op.rows())
        .map(|i| op.row(i).iter().map(|c| [c.re, c.im]).collect())
        .collect()
}

pub fn rows_to_matrix(rows: &[Vec<[f64; 2]>], context: &str) -> Result<COperator> {
    if rows.is_empty() {
        return Err(err(format!("{context}: empty matrix")));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(err(format!("{context}: ragged matrix rows")));
    }
    let mut m = COperator::zeros(rows.len(), cols);
    for (i, row) in rows.iter().enumerate() {
        for (j, &[re, im]) in row.iter().enumerate() {
            m.set(i, j, C64::new(re, im));
        }
    }
    Ok(m)
}

/// An operator, either as a raw matrix or as a named construction expanded
/// at parse time.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorDoc {
    /// Dense matrix, rows of `[re, im]` pairs.
    Matrix { rows: Vec<Vec<[f64; 2]>> },
    Identity { dim: usize },
    /// `I_system (x) M` on system (x) control.
    ControlUnitary { matrix: Vec<Vec<[f64; 2]>> },
    /// `I_system (x) P` for a permutation of control levels.
    ControlPermutation { perm: Vec<usize> },
    /// `sum_l A_l (x) |l><l|` on system (x) control; omitted levels get
    /// the identity.
    ControlledSystem { blocks: Vec<ControlledBlockDoc> },
    /// Computational-basis readout of one subsystem into the result
    /// register (register dimension = subsystem dimension).
    ReadoutZ { subsystems: Vec<usize>, target: usize },
    /// Fourier-basis readout of a qubit subsystem (`|+>` records 0,
    /// `|->` records 1).
    ReadoutX { subsystems: Vec<usize>, target: usize },
}

impl OperatorDoc {
    pub fn raw(op: &COperator) -> Self {
        OperatorDoc::Matrix { rows: matrix_to_rows(op) }
    }

    /// Expand as a step unitary on system (x) control.
    pub fn expand_step(&self, system_dim: usize, control_dim: usize, context: &str) -> Result<COperator> {
        let full = system_dim * control_dim;
        match self {
            OperatorDoc::Matrix { rows } => {
                let m = rows_to_matrix(rows, context)?;
                check_dim(&m, full, context)?;
                Ok(m)
            }
            OperatorDoc::Identity { dim } => {
                if *dim != full {
                    return Err(err(format!(
                        "{context}: identity of dim {dim}, expected {full}"
                    )));
                }
                Ok(COperator::identity(full))
            }
            OperatorDoc::ControlUnitary { matrix } => {
                let m = rows_to_matrix(matrix, context)?;
                check_dim(&m, control_dim, context)?;
                Ok(gates::control_unitary(system_dim, &m))
            }
            OperatorDoc::ControlPermutation { perm } => {
                if perm.len() != control_dim {
                    return Err(err(format!(
                        "{context}: permutation over {} levels, expected {control_dim}",
                        perm.len()
                    )));
                }
                check_permutation(perm, context)?;
                Ok(gates::control_permutation(system_dim, perm))
            }
            OperatorDoc::ControlledSystem { blocks } => {
                let mut expanded = Vec::with_capacity(blocks.len());
                for b in blocks {
                    if b.level >= control_dim {
                        return Err(err(format!(
                            "{context}: control level {} of {control_dim}",
                            b.level
                        )));
                    }
                    let m = rows_to_matrix(&b.matrix, context)?;
                    check_dim(&m, system_dim, context)?;
                    expanded.push((b.level, m));
                }
                Ok(gates::controlled_system(system_dim, control_dim, &expanded))
            }
            _ => Err(err(format!(
                "{context}: readout gates are measurement operators, not steps"
            ))),
        }
    }

    /// Expand as a measurement unitary on a measured space of the given
    /// factor dimensions tensored with a result register.
    pub fn expand_measurement(
        &self,
        measured_dims: &[usize],
        alphabet: usize,
        context: &str,
    ) -> Result<COperator> {
        let measured: usize = measured_dims.iter().product();
        let full = measured * alphabet;
        match self {
            OperatorDoc::Matrix { rows } => {
                let m = rows_to_matrix(rows, context)?;
                check_dim(&m, full, context)?;
                Ok(m)
            }
            OperatorDoc::Identity { dim } => {
                if *dim != full {
                    return Err(err(format!(
                        "{context}: identity of dim {dim}, expected {full}"
                    )));
                }
                Ok(COperator::identity(full))
            }
            OperatorDoc::ReadoutZ { subsystems, target } => {
                let basis = computational_basis(subsystems, *target, context)?;
                if basis.len() != alphabet {
                    return Err(err(format!(
                        "{context}: readout of a {}-level subsystem into a {alphabet}-level register",
                        basis.len()
                    )));
                }
                readout_embedded(subsystems, *target, &basis, alphabet, measured_dims, context)
            }
            OperatorDoc::ReadoutX { subsystems, target } => {
                if subsystems.get(*target) != Some(&2) || alphabet != 2 {
                    return Err(err(format!(
                        "{context}: Fourier readout needs a qubit target and a binary register"
                    )));
                }
                let h = std::f64::consts::FRAC_1_SQRT_2;
                let basis = vec![
                    vec![C64::new(h, 0.0), C64::new(h, 0.0)],
                    vec![C64::new(h, 0.0), C64::new(-h, 0.0)],
                ];
                readout_embedded(subsystems, *target, &basis, alphabet, measured_dims, context)
            }
            _ => Err(err(format!(
                "{context}: control-gate constructions are steps, not measurements"
            ))),
        }
    }
}

fn check_dim(m: &COperator, dim: usize, context: &str) -> Result<()> {
    if m.rows() != dim || m.cols() != dim {
        return Err(err(format!(
            "{context}: matrix is {}x{}, expected {dim}x{dim}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

fn check_permutation(perm: &[usize], context: &str) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return Err(err(format!("{context}: not a permutation")));
        }
        seen[p] = true;
    }
    Ok(())
}

fn computational_basis(
    subsystems: &[usize],
    target: usize,
    context: &str,
) -> Result<Vec<Vec<C64>>> {
    let Some(&d) = subsystems.get(target) else {
        return Err(err(format!("{context}: readout target {target} out of range")));
    };
    Ok((0..d)
        .map(|k| (0..d).map(|i| if i == k { ONE } else { ZERO }).collect())
        .collect())
}

fn readout_embedded(
    subsystems: &[usize],
    target: usize,
    basis: &[Vec<C64>],
    alphabet: usize,
    measured_dims: &[usize],
    context: &str,
) -> Result<COperator> {
    let measured: usize = measured_dims.iter().product();
    let declared: usize = subsystems.iter().product();
    if declared != measured {
        return Err(err(format!(
            "{context}: subsystems {subsystems:?} do not compose the measured space of dim {measured}"
        )));
    }
    let readout = gates::readout_unitary(basis, alphabet);
    let mut dims = subsystems.to_vec();
    dims.push(alphabet);
    let register = dims.len() - 1;
    embed(&readout, &dims, &[target, register])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlledBlockDoc {
    pub level: usize,
    pub matrix: Vec<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementDoc {
    pub party: usize,
    pub setting: usize,
    pub op: OperatorDoc,
}

/// A protocol description: layout, per-step unitaries on system (x)
/// control, and per-party per-setting measurement unitaries.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolDocument {
    pub kind: String,
    pub system_dim: usize,
    pub parties: usize,
    pub alphabets: Vec<usize>,
    pub settings: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag_dim: Option<usize>,
    pub steps: Vec<OperatorDoc>,
    pub measurements: Vec<MeasurementDoc>,
}

impl ProtocolDocument {
    pub const KIND: &'static str = "protocol";

    pub fn from_spec(spec: &ProtocolSpec) -> Self {
        let layout = spec.layout();
        let mut measurements = Vec::new();
        for (l0, per_setting) in spec.measurements().iter().enumerate() {
            for (setting, op) in per_setting {
                measurements.push(MeasurementDoc {
                    party: l0 + 1,
                    setting: *setting,
                    op: OperatorDoc::raw(op),
                });
            }
        }
        ProtocolDocument {
            kind: Self::KIND.into(),
            system_dim: layout.system_dim(),
            parties: layout.n_parties(),
            alphabets: layout.alphabets().to_vec(),
            settings: spec.settings_domains().to_vec(),
            flag_dim: Some(layout.flag_dim()),
            steps: spec.step_unitaries().iter().map(OperatorDoc::raw).collect(),
            measurements,
        }
    }

    pub fn to_spec(&self) -> Result<ProtocolSpec> {
        if self.kind != Self::KIND {
            return Err(err(format!(
                "document kind '{}', expected '{}'",
                self.kind,
                Self::KIND
            )));
        }
        if self.alphabets.len() != self.parties || self.settings.len() != self.parties {
            return Err(err(
                "alphabets and settings must list one entry per party".to_string(),
            ));
        }
        let flag_dim = self.flag_dim.unwrap_or(self.steps.len() + 1);
        let layout = SpaceLayout::new(
            self.system_dim,
            self.parties,
            self.alphabets.clone(),
            flag_dim,
        )?;
        let control_dim = layout.control_dim();
        let mut steps = Vec::with_capacity(self.steps.len());
        for (t0, doc) in self.steps.iter().enumerate() {
            steps.push(doc.expand_step(
                self.system_dim,
                control_dim,
                &format!("step {}", t0 + 1),
            )?);
        }
        let mut measurements: Vec<BTreeMap<usize, COperator>> =
            vec![BTreeMap::new(); self.parties];
        for m in &self.measurements {
            if m.party == 0 || m.party > self.parties {
                return Err(err(format!("measurement references party {}", m.party)));
            }
            let context = format!("measurement party {} setting {}", m.party, m.setting);
            let op = m.op.expand_measurement(
                &[self.system_dim],
                self.alphabets[m.party - 1],
                &context,
            )?;
            if measurements[m.party - 1].insert(m.setting, op).is_some() {
                return Err(err(format!("{context}: duplicate entry")));
            }
        }
        ProtocolSpec::new(layout, steps, measurements, self.settings.clone())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ElementDoc {
    Unitary { factors: Vec<usize>, op: OperatorDoc },
    LabGate { party: usize, control_factor: usize },
}

/// A circuit of unitaries and individual controlled lab gates.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitDocument {
    pub kind: String,
    pub system_dims: Vec<usize>,
    pub parties: usize,
    pub alphabets: Vec<usize>,
    pub settings: Vec<Vec<usize>>,
    pub measurement_factors: Vec<Vec<usize>>,
    pub measurements: Vec<MeasurementDoc>,
    pub elements: Vec<ElementDoc>,
}

impl CircuitDocument {
    pub const KIND: &'static str = "circuit";

    pub fn from_circuit(circuit: &IndividualGateCircuit) -> Self {
        let mut measurements = Vec::new();
        for (l0, per_setting) in circuit.measurements().iter().enumerate() {
            for (setting, op) in per_setting {
                measurements.push(MeasurementDoc {
                    party: l0 + 1,
                    setting: *setting,
                    op: OperatorDoc::raw(op),
                });
            }
        }
        let elements = circuit
            .elements()
            .iter()
            .map(|e| match e {
                CircuitElement::Unitary { factors, op } => ElementDoc::Unitary {
                    factors: factors.clone(),
                    op: OperatorDoc::raw(op),
                },
                CircuitElement::LabGate { party, control_factor } => ElementDoc::LabGate {
                    party: *party,
                    control_factor: *control_factor,
                },
            })
            .collect();
        CircuitDocument {
            kind: Self::KIND.into(),
            system_dims: circuit.system_dims().to_vec(),
            parties: circuit.n_parties(),
            alphabets: circuit.alphabets().to_vec(),
            settings: circuit.settings_domains().to_vec(),
            measurement_factors: circuit.measurement_factors().to_vec(),
            measurements,
            elements,
        }
    }

    pub fn to_circuit(&self) -> Result<IndividualGateCircuit> {
        if self.kind != Self::KIND {
            return Err(err(format!(
                "document kind '{}', expected '{}'",
                self.kind,
                Self::KIND
            )));
        }
        if self.alphabets.len() != self.parties
            || self.settings.len() != self.parties
            || self.measurement_factors.len() != self.parties
        {
            return Err(err("per-party tables must cover every party".to_string()));
        }
        let mut measurements: Vec<BTreeMap<usize, COperator>> =
            vec![BTreeMap::new(); self.parties];
        for m in &self.measurements {
            if m.party == 0 || m.party > self.parties {
                return Err(err(format!("measurement references party {}", m.party)));
            }
            let factors = &self.measurement_factors[m.party - 1];
            let measured_dims: Vec<usize> = factors
                .iter()
                .map(|&f| {
                    self.system_dims.get(f).copied().ok_or_else(|| {
                        err(format!("measurement factor {f} out of range"))
                    })
                })
                .collect::<Result<_>>()?;
            let context = format!("measurement party {} setting {}", m.party, m.setting);
            let op = m.op.expand_measurement(
                &measured_dims,
                self.alphabets[m.party - 1],
                &context,
            )?;
            if measurements[m.party - 1].insert(m.setting, op).is_some() {
                return Err(err(format!("{context}: duplicate entry")));
            }
        }
        let mut elements = Vec::with_capacity(self.elements.len());
        for (i, e) in self.elements.iter().enumerate() {
            match e {
                ElementDoc::Unitary { factors, op } => {
                    let dims: Vec<usize> = factors
                        .iter()
                        .map(|&f| {
                            self.system_dims.get(f).copied().ok_or_else(|| {
                                err(format!("element {i}: factor {f} out of range"))
                            })
                        })
                        .collect::<Result<_>>()?;
                    let full: usize = dims.iter().product();
                    let op = match op {
                        OperatorDoc::Matrix { rows } => {
                            let m = rows_to_matrix(rows, &format!("element {i}"))?;
                            check_dim(&m, full, &format!("element {i}"))?;
                            m
                        }
                        OperatorDoc::Identity { dim } => {
                            if *dim != full {
                                return Err(err(format!(
                                    "element {i}: identity of dim {dim}, expected {full}"
                                )));
                            }
                            COperator::identity(full)
                        }
                        _ => {
                            return Err(err(format!(
                                "element {i}: circuit unitaries must be raw matrices"
                            )))
                        }
                    };
                    elements.push(CircuitElement::Unitary { factors: factors.clone(), op });
                }
                ElementDoc::LabGate { party, control_factor } => {
                    elements.push(CircuitElement::LabGate {
                        party: *party,
                        control_factor: *control_factor,
                    });
                }
            }
        }
        IndividualGateCircuit::new(
            self.system_dims.clone(),
            self.alphabets.clone(),
            self.settings.clone(),
            self.measurement_factors.clone(),
            measurements,
            elements,
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NextDoc {
    pub party: usize,
    pub p: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRowDoc {
    pub party: usize,
    pub setting: usize,
    pub p: Vec<f64>,
    pub placeholder: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    /// `(party, outcome, setting)` triples.
    pub history: Vec<[usize; 3]>,
    pub reachable: bool,
    pub next: Vec<NextDoc>,
    pub next_placeholder: bool,
    pub results: Vec<ResultRowDoc>,
}

/// An extracted causal model, archived so it can be re-checked and
/// re-chained without re-simulation.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CausalModelDocument {
    pub kind: String,
    pub parties: usize,
    pub alphabets: Vec<usize>,
    pub x: Vec<usize>,
    pub nodes: Vec<NodeDoc>,
    pub warnings: Vec<String>,
}

impl CausalModelDocument {
    pub const KIND: &'static str = "causal_model";

    pub fn from_model(model: &CausalModel) -> Self {
        let nodes = model
            .nodes()
            .iter()
            .map(|n| NodeDoc {
                history: n
                    .history
                    .entries()
                    .iter()
                    .map(|e| [e.party, e.outcome, e.setting])
                    .collect(),
                reachable: n.reachable,
                next: n
                    .next
                    .iter()
                    .map(|&(party, p)| NextDoc { party, p })
                    .collect(),
                next_placeholder: n.next_placeholder,
                results: n
                    .results
                    .iter()
                    .map(|r| ResultRowDoc {
                        party: r.party,
                        setting: r.setting,
                        p: r.probs.clone(),
                        placeholder: r.placeholder,
                    })
                    .collect(),
            })
            .collect();
        CausalModelDocument {
            kind: Self::KIND.into(),
            parties: model.n_parties(),
            alphabets: model.alphabets().to_vec(),
            x: model.settings().to_vec(),
            nodes,
            warnings: model.warnings.clone(),
        }
    }

    /// Chain the archived tables into the outcome distribution they
    /// encode, without touching the simulator.
    pub fn distribution(&self) -> Result<causim::OutcomeDistribution> {
        let mut table: BTreeMap<Vec<[usize; 3]>, &NodeDoc> = BTreeMap::new();
        for n in &self.nodes {
            table.insert(n.history.clone(), n);
        }
        let mut dist = causim::OutcomeDistribution::zeros(self.alphabets.clone());
        let mut stack: Vec<(Vec<[usize; 3]>, f64)> = vec![(Vec::new(), 1.0)];
        while let Some((history, weight)) = stack.pop() {
            if history.len() == self.parties {
                let mut outcomes = vec![0usize; self.parties];
                for &[party, outcome, _] in &history {
                    outcomes[party - 1] = outcome;
                }
                let idx = dist.index_of(&outcomes)?;
                dist.add_at(idx, weight);
                continue;
            }
            match table.get(&history) {
                Some(node) => {
                    for next in &node.next {
                        let row = node
                            .results
                            .iter()
                            .find(|r| r.party == next.party)
                            .ok_or_else(|| {
                                err(format!("missing outcome row for party {}", next.party))
                            })?;
                        for (a, pa) in row.p.iter().enumerate() {
                            let mut child = history.clone();
                            child.push([next.party, a, row.setting]);
                            stack.push((child, weight * next.p * pa));
                        }
                    }
                }
                None => {
                    // below a placeholder frontier: uniform completion
                    let acted: Vec<usize> = history.iter().map(|e| e[0]).collect();
                    let candidates: Vec<usize> =
                        (1..=self.parties).filter(|l| !acted.contains(l)).collect();
                    let p_next = 1.0 / candidates.len() as f64;
                    for l in candidates {
                        let alphabet = self.alphabets[l - 1];
                        for a in 0..alphabet {
                            let mut child = history.clone();
                            child.push([l, a, self.x[l - 1]]);
                            stack.push((child, weight * p_next / alphabet as f64));
                        }
                    }
                }
            }
        }
        Ok(dist)
    }

    /// Row-normalisation audit of the archived tables.
    pub fn check_rows(&self) -> Result<()> {
        for n in &self.nodes {
            let sum: f64 = n.next.iter().map(|e| e.p).sum();
            if (sum - 1.0).abs() > causim::tol::TABLE_ROW {
                return Err(Error::Indeterminate(format!(
                    "next row at {:?} sums to {sum}",
                    n.history
                )));
            }
            for r in &n.results {
                let sum: f64 = r.p.iter().sum();
                if (sum - 1.0).abs() > causim::tol::TABLE_ROW {
                    return Err(Error::Indeterminate(format!(
                        "outcome row for party {} at {:?} sums to {sum}",
                        r.party, n.history
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn history_of(node: &NodeDoc) -> Result<causim::exec::History> {
        causim::exec::History::new(
            node.history
                .iter()
                .map(|&[l, a, s]| HistoryEntry::new(l, a, s))
                .collect(),
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistRow {
    pub x: Vec<usize>,
    pub p: Vec<f64>,
}

/// A conditional distribution family `p(a | x)` over the full settings
/// domain.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionDocument {
    pub kind: String,
    pub parties: usize,
    pub alphabets: Vec<usize>,
    pub settings: Vec<Vec<usize>>,
    pub table: Vec<DistRow>,
}

impl DistributionDocument {
    pub const KIND: &'static str = "distribution";

    pub fn from_family(
        family: &DistributionFamily,
        settings: &[Vec<usize>],
    ) -> Self {
        let n_out = family.n_outcomes();
        let mut table = Vec::with_capacity(family.n_settings());
        let mut xs: Vec<Vec<usize>> = vec![Vec::new()];
        for domain in settings {
            let mut next = Vec::new();
            for prefix in &xs {
                for &v in domain {
                    let mut e = prefix.clone();
                    e.push(v);
                    next.push(e);
                }
            }
            xs = next;
        }
        for (xj, x) in xs.into_iter().enumerate() {
            table.push(DistRow {
                x,
                p: family.values()[xj * n_out..(xj + 1) * n_out].to_vec(),
            });
        }
        DistributionDocument {
            kind: Self::KIND.into(),
            parties: family.alphabets().len(),
            alphabets: family.alphabets().to_vec(),
            settings: settings.to_vec(),
            table,
        }
    }

    pub fn to_family(&self) -> Result<DistributionFamily> {
        if self.kind != Self::KIND {
            return Err(err(format!(
                "document kind '{}', expected '{}'",
                self.kind,
                Self::KIND
            )));
        }
        if self.alphabets.len() != self.parties || self.settings.len() != self.parties {
            return Err(err("per-party tables must cover every party".to_string()));
        }
        let sizes: Vec<usize> = self.settings.iter().map(Vec::len).collect();
        let n_out: usize = self.alphabets.iter().product();
        let n_set: usize = sizes.iter().product();
        if self.table.len() != n_set {
            return Err(err(format!(
                "{} table rows for {n_set} setting vectors",
                self.table.len()
            )));
        }
        let mut values = vec![f64::NAN; n_set * n_out];
        for row in &self.table {
            if row.x.len() != self.parties {
                return Err(err(format!("setting vector {:?}", row.x)));
            }
            let mut xj = 0usize;
            for (l0, v) in row.x.iter().enumerate() {
                let pos = self.settings[l0]
                    .iter()
                    .position(|d| d == v)
                    .ok_or_else(|| err(format!("setting {v} for party {}", l0 + 1)))?;
                xj = xj * sizes[l0] + pos;
            }
            if row.p.len() != n_out {
                return Err(err(format!(
                    "{} probabilities for {n_out} outcome tuples",
                    row.p.len()
                )));
            }
            let sum: f64 = row.p.iter().sum();
            if row.p.iter().any(|p| *p < -1e-9) || (sum - 1.0).abs() > 1e-6 {
                return Err(err(format!(
                    "row {:?} is not a probability distribution (sum {sum})",
                    row.x
                )));
            }
            for (aj, &p) in row.p.iter().enumerate() {
                if !values[xj * n_out + aj].is_nan() {
                    return Err(err(format!("duplicate row for settings {:?}", row.x)));
                }
                values[xj * n_out + aj] = p.max(0.0);
            }
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(err("table does not cover the settings domain".to_string()));
        }
        Ok(DistributionFamily::new(self.alphabets.clone(), sizes, values))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightDoc {
    pub vertex: usize,
    pub lambda: f64,
}

/// A membership certificate: convex weights for families inside the
/// polytope, a separating functional with its violated bound for families
/// outside.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateDocument {
    pub kind: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<WeightDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functional: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vertex_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    pub tolerance: f64,
}

impl CertificateDocument {
    pub const KIND: &'static str = "certificate";

    pub fn from_certificate(cert: &PolytopeCertificate) -> Self {
        match cert {
            PolytopeCertificate::Inside { weights, residual } => CertificateDocument {
                kind: Self::KIND.into(),
                status: "inside".into(),
                weights: Some(
                    weights
                        .iter()
                        .map(|&(vertex, lambda)| WeightDoc { vertex, lambda })
                        .collect(),
                ),
                residual: Some(*residual),
                functional: None,
                vertex_bound: None,
                value: None,
                margin: None,
                tolerance: causim::tol::LP_FEASIBILITY,
            },
            PolytopeCertificate::Outside { functional, vertex_bound, value, margin } => {
                CertificateDocument {
                    kind: Self::KIND.into(),
                    status: "outside".into(),
                    weights: None,
                    residual: None,
                    functional: Some(functional.clone()),
                    vertex_bound: Some(*vertex_bound),
                    value: Some(*value),
                    margin: Some(*margin),
                    tolerance: causim::tol::LP_FEASIBILITY,
                }
            }
        }
    }
}

/// Parse any known document kind, reporting the location of failures.
pub fn parse_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        Error::Structural(format!(
            "document parse error at line {}, column {}: {e}",
            e.line(),
            e.column()
        ))
    })
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable document")
}
