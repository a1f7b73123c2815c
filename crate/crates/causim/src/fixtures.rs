//! Ready-made protocols and seeded generators.
//!
//! [`switch_protocol`] is the three-party quantum switch: two parties act on
//! a travelling qubit in a superposition of both orders, and a third party
//! measures an order qubit that the last step distils out of the control.
//! Its closed-form statistics pin down the whole pipeline in tests.
//!
//! [`random_protocol`] generates seeded random protocols that are valid by
//! construction: control levels follow an explicit branch schedule in which
//! every branch fires every party exactly once, while all the continuous
//! freedom (step mixing, branch weights, measurement unitaries) is drawn
//! Haar-randomly. Unconstrained Haar steps fail the exactly-one-measurement
//! requirement with overwhelming probability, so validity-conditioned
//! sampling has to build the schedule in.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_1_SQRT_2;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::protocol::{
    gates, validate_protocol, ProtocolSpec, SpaceLayout,
};
use crate::tensor::{embed, haar_unitary, COperator, C64, ONE, ZERO};

fn re(x: f64) -> C64 {
    C64::new(x, 0.0)
}

pub fn switch_layout() -> SpaceLayout {
    SpaceLayout::new(4, 3, vec![2, 2, 2], 4).expect("switch layout")
}

/// Computational-basis readout of the first system qubit into a binary
/// register: `|i>_{s1} |j>_r -> |i>_{s1} |j xor i>_r`, identity on `s2`.
fn readout_first_qubit_z() -> COperator {
    let z_basis = vec![vec![ONE, ZERO], vec![ZERO, ONE]];
    embed(&gates::readout_unitary(&z_basis, 2), &[2, 2, 2], &[0, 2]).expect("readout")
}

/// Fourier-basis readout of the first system qubit: records `0` for `|+>`
/// and `1` for `|->`.
fn readout_first_qubit_x() -> COperator {
    let h = re(FRAC_1_SQRT_2);
    let x_basis = vec![vec![h, h], vec![h, -h]];
    embed(&gates::readout_unitary(&x_basis, 2), &[2, 2, 2], &[0, 2]).expect("readout")
}

/// The quantum switch: three parties, a two-qubit system, three steps.
///
/// Step 1 puts the control into `(|1> + |2>)/sqrt(2)`; step 2 exchanges
/// control levels 1 and 2 so the other of Alice/Bob fires; step 3 funnels
/// both branches onto control level 3 while writing the branch tag into the
/// first system qubit and moving the travelling qubit into the second, so
/// party 3 measures the order tag. Setting 0 reads in the computational
/// basis, setting 1 in the Fourier basis.
pub fn switch_protocol() -> ProtocolSpec {
    let layout = switch_layout();
    let h = FRAC_1_SQRT_2;
    // control |0> -> (|1>+|2>)/sqrt(2), deterministically completed
    let m1 = COperator::from_nested(&[
        vec![ZERO, ONE, ZERO, ZERO],
        vec![re(h), ZERO, re(h), ZERO],
        vec![re(h), ZERO, re(-h), ZERO],
        vec![ZERO, ZERO, ZERO, ONE],
    ]);
    let u1 = gates::control_unitary(4, &m1);
    let u2 = gates::control_permutation(4, &[0, 2, 1, 3]);
    // Funnel on system (x) control (index (2*s1 + s2)*4 + c):
    //   |c=1>|psi>_{s1}|0>_{s2} -> |c=3>|0>_{s1}|psi>_{s2}
    //   |c=2>|psi>_{s1}|0>_{s2} -> |c=3>|1>_{s1}|psi>_{s2}
    // completed to a unitary on the unreachable remainder.
    let mut cols: Vec<(usize, Vec<C64>)> = Vec::new();
    for is1 in 0..2usize {
        for (c_in, order_tag) in [(1usize, 0usize), (2, 1)] {
            let idx_in = (2 * is1) * 4 + c_in;
            let idx_out = (2 * order_tag + is1) * 4 + 3;
            let mut col = vec![ZERO; 16];
            col[idx_out] = ONE;
            cols.push((idx_in, col));
        }
    }
    let u3 = gates::complete_isometry(&cols, 16).expect("funnel completion");

    let mut measurements = Vec::new();
    for _ in 0..3 {
        let mut per_setting = BTreeMap::new();
        per_setting.insert(0usize, readout_first_qubit_z());
        per_setting.insert(1usize, readout_first_qubit_x());
        measurements.push(per_setting);
    }
    ProtocolSpec::new(
        layout,
        vec![u1, u2, u3],
        measurements,
        vec![vec![0, 1], vec![0, 1], vec![0, 1]],
    )
    .expect("switch protocol")
}

/// One party, one step: the control is pushed straight to level 1, so the
/// single measurement is forced. Settings 0/1 read the system qubit in the
/// computational/Fourier basis.
pub fn trivial_single_party() -> ProtocolSpec {
    let layout = SpaceLayout::new(2, 1, vec![2], 2).expect("layout");
    let z_basis = vec![vec![ONE, ZERO], vec![ZERO, ONE]];
    let h = re(FRAC_1_SQRT_2);
    let x_basis = vec![vec![h, h], vec![h, -h]];
    let mut per_setting = BTreeMap::new();
    per_setting.insert(0usize, gates::readout_unitary(&z_basis, 2));
    per_setting.insert(1usize, gates::readout_unitary(&x_basis, 2));
    ProtocolSpec::new(
        layout,
        vec![gates::control_permutation(2, &[1, 0])],
        vec![per_setting],
        vec![vec![0, 1]],
    )
    .expect("trivial protocol")
}

/// Two parties whose steps are all identities: the control never leaves the
/// do-nothing level, nobody measures, and every flag stays at zero.
pub fn all_identity_protocol() -> ProtocolSpec {
    let layout = SpaceLayout::new(2, 2, vec![2, 2], 3).expect("layout");
    let id = COperator::identity(2 * 3);
    let mut measurements = Vec::new();
    for _ in 0..2 {
        let mut per_setting = BTreeMap::new();
        per_setting.insert(0usize, haar_unitary(4, 5));
        measurements.push(per_setting);
    }
    ProtocolSpec::new(layout, vec![id.clone(), id], measurements, vec![vec![0], vec![0]])
        .expect("identity protocol")
}

/// Size parameters for the random generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RandomProtocolParams {
    pub n_parties: usize,
    pub system_dim: usize,
    pub t_steps: usize,
}

/// Seeded random protocol with a coherent split over two firing orders
/// (binary alphabets and settings). See the module docs for why validity is
/// built in rather than rejection-sampled from raw Haar steps.
pub fn random_protocol(params: &RandomProtocolParams, seed: u64) -> Result<ProtocolSpec> {
    build_random(params, seed, true)
}

/// Seeded random protocol whose control follows a single classical firing
/// order (no superposition of orders); steps never mix control levels.
pub fn random_sequential_protocol(
    params: &RandomProtocolParams,
    seed: u64,
) -> Result<ProtocolSpec> {
    build_random(params, seed, false)
}

/// Rejection-sample seeds (starting at `seed`) until the generated protocol
/// passes validation; returns the protocol and the accepted seed.
pub fn random_valid_protocol(
    params: &RandomProtocolParams,
    seed: u64,
) -> Result<(ProtocolSpec, u64)> {
    let mut s = seed;
    loop {
        let spec = random_protocol(params, s)?;
        if validate_protocol(&spec)?.valid {
            return Ok((spec, s));
        }
        s += 1;
    }
}

fn build_random(params: &RandomProtocolParams, seed: u64, split: bool) -> Result<ProtocolSpec> {
    let n = params.n_parties;
    let d_s = params.system_dim;
    let t = params.t_steps;
    assert!(n >= 1 && d_s >= 1 && t >= n);
    let d_c = n + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut order: Vec<usize> = (1..=n).collect();
    order.shuffle(&mut rng);
    let slack = t - n;

    // Branch itineraries: lambda[u] is the control level after step u+1's
    // unitary (and the party that step's activation fires, 0 for none).
    let mut lambda0 = vec![0usize; t + 1];
    let mut lambda1 = vec![0usize; t + 1];
    let do_split = split && n >= 2;
    if !do_split {
        // single classical order at random firing slots
        let times = sorted_subset(&mut rng, t, n);
        for (k, &u) in times.iter().enumerate() {
            lambda0[u] = order[k];
        }
        lambda1.copy_from_slice(&lambda0);
    } else {
        let stagger = slack >= 1 && rng.random_bool(0.6);
        let (j, prefix_idles) = if stagger {
            (rng.random_range(1..=n - 1), slack - 1)
        } else {
            (n - 1, slack)
        };
        let tau = j + prefix_idles;
        // stages 1..j-1 at a sorted subset of slots 1..tau-1, stage j at tau
        let early = sorted_subset(&mut rng, tau - 1, j - 1);
        for (k, &u) in early.iter().enumerate() {
            lambda0[u] = order[k];
            lambda1[u] = order[k];
        }
        lambda0[tau] = order[j - 1];
        lambda1[tau] = order[j];
        if stagger {
            // branch 1 delays its swapped pair by one idle slot
            lambda1[tau + 2] = order[j - 1];
            for m in 2..=(n - j) {
                lambda0[tau + m] = order[j + m - 1];
                lambda1[tau + m + 1] = order[j + m - 1];
            }
            if n - j >= 1 {
                lambda0[tau + 1] = order[j];
            }
        } else {
            lambda0[tau + 1] = order[j];
            lambda1[tau + 1] = order[j - 1];
        }
    }

    let mut sub_seed = || rng.random::<u64>();
    let mut steps = Vec::with_capacity(t);
    for u in 1..=t {
        let split_here = lambda0[u - 1] == lambda1[u - 1] && lambda0[u] != lambda1[u];
        let blocks: Vec<COperator> =
            (0..d_c).map(|_| haar_unitary(d_s, sub_seed())).collect();
        let step = if split_here {
            let src = lambda0[u - 1];
            let (d0, d1) = (lambda0[u], lambda1[u]);
            let mut perm: Vec<usize> = (0..d_c).collect();
            perm.swap(src, d0);
            let w = controlled_block_permutation(d_s, &perm, &blocks);
            let g = gates::two_level_unitary(d_c, d0, d1, &haar_unitary(2, sub_seed()));
            gates::control_unitary(d_s, &g).mul(&w)?
        } else {
            let mut pairs = vec![(lambda0[u - 1], lambda0[u])];
            if lambda1[u - 1] != lambda0[u - 1] || lambda1[u] != lambda0[u] {
                pairs.push((lambda1[u - 1], lambda1[u]));
            }
            let perm = permutation_with_pairs(d_c, &pairs);
            controlled_block_permutation(d_s, &perm, &blocks)
        };
        steps.push(step);
    }

    let mut measurements = Vec::with_capacity(n);
    for _ in 0..n {
        let mut per_setting = BTreeMap::new();
        per_setting.insert(0usize, haar_unitary(d_s * 2, sub_seed()));
        per_setting.insert(1usize, haar_unitary(d_s * 2, sub_seed()));
        measurements.push(per_setting);
    }

    let layout = SpaceLayout::new(d_s, n, vec![2; n], t + 1)?;
    ProtocolSpec::new(layout, steps, measurements, vec![vec![0, 1]; n])
}

/// `sum_m A_m (x) |perm[m]><m|` on system (x) control: the control moves by
/// a permutation while the system picks up a level-dependent kick.
fn controlled_block_permutation(
    d_s: usize,
    perm: &[usize],
    blocks: &[COperator],
) -> COperator {
    let d_c = perm.len();
    let mut out = COperator::zeros(d_s * d_c, d_s * d_c);
    for (m, &m_out) in perm.iter().enumerate() {
        let a = &blocks[m];
        for i in 0..d_s {
            for j in 0..d_s {
                let v = a.get(i, j);
                if v != ZERO {
                    out.set(i * d_c + m_out, j * d_c + m, v);
                }
            }
        }
    }
    out
}

/// A permutation of `0..dim` satisfying `perm[src] = dst` for each pair.
/// Sources must be distinct and so must destinations.
fn permutation_with_pairs(dim: usize, pairs: &[(usize, usize)]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..dim).collect();
    for &(src, dst) in pairs {
        let holder = perm.iter().position(|&v| v == dst).expect("permutation");
        perm.swap(src, holder);
    }
    for &(src, dst) in pairs {
        debug_assert_eq!(perm[src], dst);
    }
    perm
}

/// Sorted random `k`-subset of `1..=n`.
fn sorted_subset(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut slots: Vec<usize> = (1..=n).collect();
    slots.shuffle(rng);
    let mut chosen: Vec<usize> = slots.into_iter().take(k).collect();
    chosen.sort_unstable();
    chosen
}

/// The `(n_parties, system_dim, t_steps)` grid the verification suites walk
/// through, with a deterministic seed stream per instance.
pub fn suite_params() -> Vec<RandomProtocolParams> {
    let mut grid = Vec::new();
    for &n in &[2usize, 3] {
        for &d_s in &[2usize, 3] {
            for extra in 0..=2usize {
                grid.push(RandomProtocolParams {
                    n_parties: n,
                    system_dim: d_s,
                    t_steps: n + extra,
                });
            }
        }
    }
    grid
}

/// `count` validated random protocols cycling over [`suite_params`], each
/// rejection-sampled from its own deterministic seed base.
pub fn suite_protocols(count: usize) -> Vec<(RandomProtocolParams, ProtocolSpec, u64)> {
    let grid = suite_params();
    let results = crate::par::map_indexed(count, |i| {
        let params = grid[i % grid.len()];
        let (spec, used) =
            random_valid_protocol(&params, 10_000 * (i as u64 + 1)).expect("generator");
        (params, spec, used)
    });
    results
}

/// The switch expressed as an individual-gate circuit: a branch qubit `q`
/// prepared in superposition steers complementary pairs of Alice/Bob gates
/// (so each fires exactly once per branch, in opposite orders), a transfer
/// unitary writes the branch tag into the first system qubit while clearing
/// `q`, and a third party measures the tag via an always-on fresh qubit.
pub fn switch_circuit() -> crate::equiv::IndividualGateCircuit {
    use crate::equiv::CircuitElement as El;
    let z_basis = vec![vec![ONE, ZERO], vec![ZERO, ONE]];
    let h = re(FRAC_1_SQRT_2);
    let x_basis = vec![vec![h, h], vec![h, -h]];
    let mut measurements = Vec::new();
    for _ in 0..3 {
        let mut per_setting = BTreeMap::new();
        per_setting.insert(0usize, gates::readout_unitary(&z_basis, 2));
        per_setting.insert(1usize, gates::readout_unitary(&x_basis, 2));
        measurements.push(per_setting);
    }
    // transfer on (s1, s2, q): |psi>|0>|q> -> |q>|psi>|0>
    let mut cols: Vec<(usize, Vec<C64>)> = Vec::new();
    for psi in 0..2usize {
        for q in 0..2usize {
            let mut col = vec![ZERO; 8];
            col[4 * q + 2 * psi] = ONE;
            cols.push((4 * psi + q, col));
        }
    }
    let transfer = gates::complete_isometry(&cols, 8).expect("transfer completion");
    let elements = vec![
        El::Unitary { factors: vec![2], op: gates::hadamard() },
        El::LabGate { party: 1, control_factor: 2 },
        El::Unitary { factors: vec![2], op: gates::pauli_x() },
        El::LabGate { party: 2, control_factor: 2 },
        El::LabGate { party: 1, control_factor: 2 },
        El::Unitary { factors: vec![2], op: gates::pauli_x() },
        El::LabGate { party: 2, control_factor: 2 },
        El::Unitary { factors: vec![0, 1, 2], op: transfer },
        El::Unitary { factors: vec![3], op: gates::pauli_x() },
        El::LabGate { party: 3, control_factor: 3 },
    ];
    crate::equiv::IndividualGateCircuit::new(
        vec![2, 2, 2, 2],
        vec![2, 2, 2],
        vec![vec![0, 1], vec![0, 1], vec![0, 1]],
        vec![vec![0], vec![0], vec![0]],
        measurements,
        elements,
    )
    .expect("switch circuit")
}

/// Seeded random two-party circuit in which every party fires exactly once
/// on every branch: either a superposed-order pair steered by a shared
/// branch qubit, or two always-on gates in a random order. Haar unitaries
/// are sprinkled on the work qubit, plus a trailing one after the last
/// gate.
pub fn random_circuit(seed: u64) -> crate::equiv::IndividualGateCircuit {
    use crate::equiv::CircuitElement as El;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(7));
    let sub = |rng: &mut ChaCha8Rng| rng.random::<u64>();
    let mut measurements = Vec::new();
    for _ in 0..2 {
        let mut per_setting = BTreeMap::new();
        per_setting.insert(0usize, haar_unitary(4, sub(&mut rng)));
        per_setting.insert(1usize, haar_unitary(4, sub(&mut rng)));
        measurements.push(per_setting);
    }
    let mut elements = vec![El::Unitary { factors: vec![0], op: haar_unitary(2, sub(&mut rng)) }];
    if rng.random_bool(0.5) {
        // superposed order via the branch qubit (factor 1)
        elements.push(El::Unitary { factors: vec![1], op: gates::hadamard() });
        elements.push(El::LabGate { party: 1, control_factor: 1 });
        elements.push(El::Unitary { factors: vec![1], op: gates::pauli_x() });
        elements.push(El::LabGate { party: 2, control_factor: 1 });
        elements.push(El::Unitary { factors: vec![0], op: haar_unitary(2, sub(&mut rng)) });
        elements.push(El::LabGate { party: 1, control_factor: 1 });
        elements.push(El::Unitary { factors: vec![1], op: gates::pauli_x() });
        elements.push(El::LabGate { party: 2, control_factor: 1 });
    } else {
        // classical order via always-on fresh qubits (factors 2 and 3)
        let first: usize = if rng.random_bool(0.5) { 1 } else { 2 };
        let second = 3 - first;
        elements.push(El::Unitary { factors: vec![1 + first], op: gates::pauli_x() });
        elements.push(El::LabGate { party: first, control_factor: 1 + first });
        elements.push(El::Unitary { factors: vec![0], op: haar_unitary(2, sub(&mut rng)) });
        elements.push(El::Unitary { factors: vec![1 + second], op: gates::pauli_x() });
        elements.push(El::LabGate { party: second, control_factor: 1 + second });
    }
    // trailing unitary after the last gate: must not affect the statistics
    elements.push(El::Unitary { factors: vec![0, 1], op: haar_unitary(4, sub(&mut rng)) });
    crate::equiv::IndividualGateCircuit::new(
        vec![2, 2, 2, 2],
        vec![2, 2],
        vec![vec![0, 1], vec![0, 1]],
        vec![vec![0], vec![0]],
        measurements,
        elements,
    )
    .expect("random circuit")
}

/// Every party fires exactly once, unconditionally, in ascending order.
pub fn sequential_fire_circuit(n_parties: usize, seed: u64) -> crate::equiv::IndividualGateCircuit {
    use crate::equiv::CircuitElement as El;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut measurements = Vec::new();
    for _ in 0..n_parties {
        let mut per_setting = BTreeMap::new();
        per_setting.insert(0usize, haar_unitary(4, rng.random::<u64>()));
        per_setting.insert(1usize, haar_unitary(4, rng.random::<u64>()));
        measurements.push(per_setting);
    }
    let mut elements = Vec::new();
    for l in 1..=n_parties {
        elements.push(El::Unitary { factors: vec![l], op: gates::pauli_x() });
        elements.push(El::LabGate { party: l, control_factor: l });
        elements.push(El::Unitary { factors: vec![0], op: haar_unitary(2, rng.random::<u64>()) });
    }
    let mut system_dims = vec![2usize];
    system_dims.extend(std::iter::repeat(2usize).take(n_parties));
    crate::equiv::IndividualGateCircuit::new(
        system_dims,
        vec![2; n_parties],
        vec![vec![0, 1]; n_parties],
        vec![vec![0]; n_parties],
        measurements,
        elements,
    )
    .expect("sequential circuit")
}

/// A circuit whose single party fires twice on every branch; accepted by
/// the rewrite but flagged, and the rewritten protocol fails validation.
pub fn double_fire_circuit() -> crate::equiv::IndividualGateCircuit {
    use crate::equiv::CircuitElement as El;
    let mut per_setting = BTreeMap::new();
    per_setting.insert(0usize, haar_unitary(4, 19));
    let elements = vec![
        El::Unitary { factors: vec![1], op: gates::pauli_x() },
        El::LabGate { party: 1, control_factor: 1 },
        El::LabGate { party: 1, control_factor: 1 },
    ];
    crate::equiv::IndividualGateCircuit::new(
        vec![2, 2],
        vec![2],
        vec![vec![0]],
        vec![vec![0]],
        vec![per_setting],
        elements,
    )
    .expect("double-fire circuit")
}

/// One closed-form table entry of the switch model at settings (0, 1, 1).
#[derive(Clone, Debug)]
pub struct SwitchReferenceValue {
    /// Conditioning history as (party, outcome, setting) triples.
    pub history: Vec<(usize, usize, usize)>,
    /// Candidate party the entry is about.
    pub party: usize,
    /// `None` for a next-party probability, `Some(a)` for an outcome row
    /// entry.
    pub outcome: Option<usize>,
    pub expected: f64,
}

/// The twelve closed-form table values of the switch at settings (0, 1, 1):
/// who-acts-next rows for all three stages and the outcome rows, including
/// the interference-bearing 5/6 entries of the last party (identical for
/// both history orderings).
pub fn switch_reference_values() -> Vec<SwitchReferenceValue> {
    let v = |history: Vec<(usize, usize, usize)>,
             party: usize,
             outcome: Option<usize>,
             expected: f64| SwitchReferenceValue { history, party, outcome, expected };
    vec![
        v(vec![], 1, None, 0.5),
        v(vec![], 2, None, 0.5),
        v(vec![(1, 0, 0)], 2, None, 1.0),
        v(vec![(2, 0, 1)], 1, None, 1.0),
        v(vec![(1, 0, 0), (2, 0, 1)], 3, None, 1.0),
        v(vec![(2, 0, 1), (1, 0, 0)], 3, None, 1.0),
        v(vec![], 1, Some(0), 1.0),
        v(vec![], 2, Some(0), 0.5),
        v(vec![(1, 0, 0)], 2, Some(0), 0.5),
        v(vec![(2, 0, 1)], 1, Some(0), 0.5),
        v(vec![(1, 0, 0), (2, 0, 1)], 3, Some(0), 5.0 / 6.0),
        v(vec![(2, 0, 1), (1, 0, 0)], 3, Some(0), 5.0 / 6.0),
    ]
}

/// Binary two-party game: each party is rewarded for guessing the other's
/// setting, score averaged over both guesses, settings weighted uniformly.
pub fn neighbour_guess_game() -> crate::polytope::Game {
    let alphabets = [2usize, 2];
    let settings = [2usize, 2];
    let n_out = 4usize;
    let n_set = 4usize;
    let mut coefficients = vec![0.0; n_out * n_set];
    for x1 in 0..settings[0] {
        for x2 in 0..settings[1] {
            let xj = x1 * settings[1] + x2;
            for a1 in 0..alphabets[0] {
                for a2 in 0..alphabets[1] {
                    let aj = a1 * alphabets[1] + a2;
                    let mut c = 0.0;
                    if a1 == x2 {
                        c += 0.5;
                    }
                    if a2 == x1 {
                        c += 0.5;
                    }
                    coefficients[xj * n_out + aj] = c;
                }
            }
        }
    }
    crate::polytope::Game {
        coefficients,
        setting_weights: vec![0.25; n_set],
        alphabets: alphabets.to_vec(),
        settings_sizes: settings.to_vec(),
    }
}

/// Deterministic two-way-signalling distribution: both parties always
/// announce the other's setting. Scores 1 on [`neighbour_guess_game`] and
/// lies outside the causal polytope.
pub fn signalling_family() -> crate::dist::DistributionFamily {
    let mut values = vec![0.0; 16];
    for x1 in 0..2usize {
        for x2 in 0..2usize {
            let xj = x1 * 2 + x2;
            let aj = x2 * 2 + x1;
            values[xj * 4 + aj] = 1.0;
        }
    }
    crate::dist::DistributionFamily::new(vec![2, 2], vec![2, 2], values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::validate_protocol;

    #[test]
    fn random_protocols_are_valid_by_construction() {
        for (i, params) in suite_params().into_iter().enumerate() {
            let spec = random_protocol(&params, 40 + i as u64).unwrap();
            assert_eq!(spec.t_steps(), params.t_steps);
            let report = validate_protocol(&spec).unwrap();
            assert!(
                report.max_leak < 1e-12,
                "params {params:?} leak {}",
                report.max_leak
            );
        }
    }

    #[test]
    fn sequential_variant_is_valid_too() {
        let params = RandomProtocolParams { n_parties: 3, system_dim: 2, t_steps: 5 };
        for seed in 0..4 {
            let spec = random_sequential_protocol(&params, seed).unwrap();
            let report = validate_protocol(&spec).unwrap();
            assert!(report.max_leak < 1e-12);
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let params = RandomProtocolParams { n_parties: 2, system_dim: 3, t_steps: 4 };
        let a = random_protocol(&params, 9).unwrap();
        let b = random_protocol(&params, 9).unwrap();
        for (ua, ub) in a.step_unitaries().iter().zip(b.step_unitaries()) {
            assert_eq!(ua, ub);
        }
    }

    #[test]
    fn permutation_pairs_builder() {
        let p = permutation_with_pairs(4, &[(2, 0), (0, 3)]);
        assert_eq!(p[2], 0);
        assert_eq!(p[0], 3);
        let mut sorted = p.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }
}
