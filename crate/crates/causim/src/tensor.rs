//! Dense complex linear algebra kernel.
//!
//! States and operators are stored densely (`Vec<Complex64>`, row-major for
//! operators) with a capacity guard instead of sparse formats: every space
//! this crate touches stays at desk scale. Composite spaces use mixed-radix
//! flattening with the first factor most significant, so the index of a
//! basis state `(i_0, i_1, ..., i_{m-1})` over factor dimensions
//! `(d_0, ..., d_{m-1})` is `((i_0 * d_1 + i_1) * d_2 + i_2) * ...`.
//!
//! [`apply_embedded`] applies a local operator to named factors of a state
//! without materialising the full-space matrix; dense embeddings exist for
//! the small spaces where tests want to inspect entries.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Largest total dimension a composite space may reach.
pub const DIM_CAPACITY: usize = 1 << 22;
/// Largest number of entries a dense operator may hold.
pub const DENSE_ENTRY_CAPACITY: usize = 1 << 24;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

/// A vector of complex amplitudes. Norms are not enforced; projected
/// intermediate states are deliberately un-normalised.
#[derive(Clone, Debug, PartialEq)]
pub struct CState {
    amps: Vec<C64>,
}

impl CState {
    pub fn zero(dim: usize) -> Self {
        assert!(dim >= 1, "state dimension must be positive");
        CState { amps: vec![ZERO; dim] }
    }

    pub fn basis(dim: usize, index: usize) -> Self {
        assert!(index < dim, "basis index out of range");
        let mut s = Self::zero(dim);
        s.amps[index] = ONE;
        s
    }

    pub fn from_amplitudes(amps: Vec<C64>) -> Self {
        assert!(!amps.is_empty(), "state dimension must be positive");
        CState { amps }
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amp(&self, i: usize) -> C64 {
        self.amps[i]
    }

    pub fn amps(&self) -> &[C64] {
        &self.amps
    }

    pub fn amps_mut(&mut self) -> &mut [C64] {
        &mut self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn scaled(&self, factor: C64) -> Self {
        CState { amps: self.amps.iter().map(|a| a * factor).collect() }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(CState {
            amps: self.amps.iter().zip(&other.amps).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(CState {
            amps: self.amps.iter().zip(&other.amps).map(|(a, b)| a - b).collect(),
        })
    }

    /// Largest entrywise deviation from `other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dim(), other.dim());
        self.amps
            .iter()
            .zip(&other.amps)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    fn check_dim(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch(format!(
                "state dims {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(())
    }
}

/// Inner product, conjugate-linear in the first argument.
pub fn inner(a: &CState, b: &CState) -> Result<C64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "inner product dims {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(a.amps
        .iter()
        .zip(&b.amps)
        .map(|(x, y)| x.conj() * y)
        .sum())
}

/// Dense complex matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct COperator {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl COperator {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "operator dimensions must be positive");
        assert!(
            rows.checked_mul(cols).is_some_and(|n| n <= DENSE_ENTRY_CAPACITY),
            "dense operator of {rows}x{cols} exceeds entry capacity"
        );
        COperator { rows, cols, data: vec![ZERO; rows * cols] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim, dim);
        for i in 0..dim {
            m.data[i * dim + i] = ONE;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> C64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Build from nested rows; all rows must share one length.
    pub fn from_nested(rows: &[Vec<C64>]) -> Self {
        let r = rows.len();
        assert!(r > 0);
        let c = rows[0].len();
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let mut m = Self::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            m.data[i * c..(i + 1) * c].copy_from_slice(row);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: C64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[C64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    /// Matrix product `self * other`.
    pub fn mul(&self, other: &COperator) -> Result<COperator> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "matmul {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let rows: Vec<Vec<C64>> = crate::par::map_indexed(n, |i| {
            let mut acc = vec![ZERO; m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == ZERO {
                    continue;
                }
                let row_b = &other.data[p * m..(p + 1) * m];
                for (dst, b) in acc.iter_mut().zip(row_b) {
                    *dst += a * b;
                }
            }
            acc
        });
        let mut out = COperator::zeros(n, m);
        for (i, row) in rows.into_iter().enumerate() {
            out.data[i * m..(i + 1) * m].copy_from_slice(&row);
        }
        Ok(out)
    }

    pub fn apply(&self, state: &CState) -> Result<CState> {
        if self.cols != state.dim() {
            return Err(Error::DimensionMismatch(format!(
                "apply {}x{} to state of dim {}",
                self.rows,
                self.cols,
                state.dim()
            )));
        }
        let mut out = CState::zero(self.rows);
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = ZERO;
            for (a, x) in row.iter().zip(state.amps()) {
                acc += a * x;
            }
            out.amps[i] = acc;
        }
        Ok(out)
    }

    pub fn adjoint(&self) -> COperator {
        let mut out = COperator::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j].conj();
            }
        }
        out
    }

    pub fn sub(&self, other: &COperator) -> Result<COperator> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch("operator subtraction".into()));
        }
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        Ok(out)
    }

    pub fn scaled(&self, factor: C64) -> COperator {
        let mut out = self.clone();
        for a in out.data.iter_mut() {
            *a *= factor;
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|a| a.norm()).fold(0.0, f64::max)
    }

    pub fn trace(&self) -> C64 {
        assert_eq!(self.rows, self.cols);
        (0..self.rows).map(|i| self.get(i, i)).sum()
    }

    /// `max |(U† U - I)[i][j]|`.
    pub fn unitarity_defect(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let gram = self.adjoint().mul(self).expect("square");
        gram.sub(&COperator::identity(self.rows))
            .expect("same dims")
            .max_abs()
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.unitarity_defect() <= tol
    }

    /// `max(|P*P - P|, |P† - P|)` entrywise.
    pub fn projector_defect(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let idem = self
            .mul(self)
            .expect("square")
            .sub(self)
            .expect("same dims")
            .max_abs();
        let herm = self.adjoint().sub(self).expect("same dims").max_abs();
        idem.max(herm)
    }

    pub fn max_abs_diff(&self, other: &COperator) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

fn check_product_capacity(rows: usize, cols: usize) -> Result<()> {
    if rows > DIM_CAPACITY || cols > DIM_CAPACITY {
        return Err(Error::CapacityExceeded(format!(
            "dimension {}x{} exceeds {}",
            rows, cols, DIM_CAPACITY
        )));
    }
    match rows.checked_mul(cols) {
        Some(n) if n <= DENSE_ENTRY_CAPACITY => Ok(()),
        _ => Err(Error::CapacityExceeded(format!(
            "dense {}x{} exceeds {} entries",
            rows, cols, DENSE_ENTRY_CAPACITY
        ))),
    }
}

/// Kronecker product; the left factor is most significant.
pub fn kron(a: &COperator, b: &COperator) -> Result<COperator> {
    let rows = a
        .rows
        .checked_mul(b.rows)
        .ok_or_else(|| Error::CapacityExceeded("kron row overflow".into()))?;
    let cols = a
        .cols
        .checked_mul(b.cols)
        .ok_or_else(|| Error::CapacityExceeded("kron col overflow".into()))?;
    check_product_capacity(rows, cols)?;
    let mut out = COperator::zeros(rows, cols);
    for i1 in 0..a.rows {
        for j1 in 0..a.cols {
            let v = a.get(i1, j1);
            if v == ZERO {
                continue;
            }
            for i2 in 0..b.rows {
                let dst = (i1 * b.rows + i2) * cols + j1 * b.cols;
                let src = &b.data[i2 * b.cols..(i2 + 1) * b.cols];
                for (j2, w) in src.iter().enumerate() {
                    out.data[dst + j2] = v * w;
                }
            }
        }
    }
    Ok(out)
}

/// Fold [`kron`] over a sequence, left to right.
pub fn kron_all(ops: &[&COperator]) -> Result<COperator> {
    assert!(!ops.is_empty());
    let mut acc = ops[0].clone();
    for op in &ops[1..] {
        acc = kron(&acc, op)?;
    }
    Ok(acc)
}

/// Mixed-radix strides for `dims`, first factor most significant.
pub fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; dims.len()];
    for k in (0..dims.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * dims[k + 1];
    }
    s
}

fn total_dim(dims: &[usize]) -> Result<usize> {
    let mut total = 1usize;
    for &d in dims {
        if d == 0 {
            return Err(Error::DimensionMismatch("factor of dimension zero".into()));
        }
        total = total
            .checked_mul(d)
            .filter(|&t| t <= DIM_CAPACITY)
            .ok_or_else(|| {
                Error::CapacityExceeded(format!(
                    "composite dimension exceeds {DIM_CAPACITY}"
                ))
            })?;
    }
    Ok(total)
}

fn check_factors(dims: &[usize], factors: &[usize], op_dim: usize) -> Result<()> {
    let mut seen = vec![false; dims.len()];
    let mut named = 1usize;
    for &f in factors {
        if f >= dims.len() {
            return Err(Error::FactorOutOfRange(format!(
                "factor {f} of {} factors",
                dims.len()
            )));
        }
        if seen[f] {
            return Err(Error::FactorOutOfRange(format!("factor {f} repeated")));
        }
        seen[f] = true;
        named *= dims[f];
    }
    if named != op_dim {
        return Err(Error::DimensionMismatch(format!(
            "operator dim {op_dim} vs named factor product {named}"
        )));
    }
    Ok(())
}

/// Offsets of each local basis index of the named factors, in the flattened
/// full-space index. `factors[0]` is the most significant local digit.
fn local_offsets(dims: &[usize], factors: &[usize]) -> Vec<usize> {
    let full_strides = strides(dims);
    let local_dims: Vec<usize> = factors.iter().map(|&f| dims[f]).collect();
    let k: usize = local_dims.iter().product();
    let mut offs = vec![0usize; k];
    for (j, off) in offs.iter_mut().enumerate() {
        let mut rem = j;
        let mut acc = 0usize;
        for (m, &f) in factors.iter().enumerate().rev() {
            let d = local_dims[m];
            acc += (rem % d) * full_strides[f];
            rem /= d;
        }
        *off = acc;
    }
    offs
}

/// Base offsets enumerating the factors *not* named, optionally pinning one
/// complement factor to a fixed digit.
fn complement_bases(
    dims: &[usize],
    factors: &[usize],
    pin: Option<(usize, usize)>,
) -> Vec<usize> {
    let full_strides = strides(dims);
    let mut comp: Vec<(usize, usize)> = Vec::new(); // (dim, stride)
    let mut base0 = 0usize;
    for f in 0..dims.len() {
        if factors.contains(&f) {
            continue;
        }
        if let Some((pf, lvl)) = pin {
            if f == pf {
                base0 += lvl * full_strides[f];
                continue;
            }
        }
        comp.push((dims[f], full_strides[f]));
    }
    let count: usize = comp.iter().map(|&(d, _)| d).product();
    let mut bases = Vec::with_capacity(count);
    let mut digits = vec![0usize; comp.len()];
    loop {
        let mut base = base0;
        for (dig, &(_, st)) in digits.iter().zip(&comp) {
            base += dig * st;
        }
        bases.push(base);
        // odometer
        let mut k = comp.len();
        loop {
            if k == 0 {
                return bases;
            }
            k -= 1;
            digits[k] += 1;
            if digits[k] < comp[k].0 {
                break;
            }
            digits[k] = 0;
        }
    }
}

/// Apply `op` to the named factors of `state`, identity elsewhere.
///
/// `factors` is an ordered sequence: the operator's own row index is read
/// mixed-radix over the named factor dimensions in exactly this order.
pub fn apply_embedded(
    op: &COperator,
    dims: &[usize],
    factors: &[usize],
    state: &CState,
) -> Result<CState> {
    let total = total_dim(dims)?;
    if state.dim() != total {
        return Err(Error::DimensionMismatch(format!(
            "state dim {} vs composite dim {}",
            state.dim(),
            total
        )));
    }
    if op.rows != op.cols {
        return Err(Error::DimensionMismatch("embedded operator must be square".into()));
    }
    check_factors(dims, factors, op.rows)?;
    let offs = local_offsets(dims, factors);
    let k = offs.len();
    let mut out = CState::zero(total);
    let mut gathered = vec![ZERO; k];
    for base in complement_bases(dims, factors, None) {
        for (g, off) in gathered.iter_mut().zip(&offs) {
            *g = state.amps[base + off];
        }
        for (i, off) in offs.iter().enumerate() {
            let row = &op.data[i * k..(i + 1) * k];
            let mut acc = ZERO;
            for (a, x) in row.iter().zip(&gathered) {
                acc += a * x;
            }
            out.amps[base + off] = acc;
        }
    }
    Ok(out)
}

/// Apply `op` to the named factors only on the subspace where the factor
/// `control.0` carries digit `control.1`; identity everywhere else.
pub fn apply_embedded_controlled(
    op: &COperator,
    dims: &[usize],
    factors: &[usize],
    control: (usize, usize),
    state: &CState,
) -> Result<CState> {
    let total = total_dim(dims)?;
    if state.dim() != total {
        return Err(Error::DimensionMismatch(format!(
            "state dim {} vs composite dim {}",
            state.dim(),
            total
        )));
    }
    let (cf, lvl) = control;
    if cf >= dims.len() {
        return Err(Error::FactorOutOfRange(format!("control factor {cf}")));
    }
    if lvl >= dims[cf] {
        return Err(Error::FactorOutOfRange(format!(
            "control level {lvl} of dim {}",
            dims[cf]
        )));
    }
    if factors.contains(&cf) {
        return Err(Error::FactorOutOfRange(
            "control factor may not be acted on".into(),
        ));
    }
    if op.rows != op.cols {
        return Err(Error::DimensionMismatch("embedded operator must be square".into()));
    }
    check_factors(dims, factors, op.rows)?;
    let offs = local_offsets(dims, factors);
    let k = offs.len();
    let mut out = state.clone();
    let mut gathered = vec![ZERO; k];
    for base in complement_bases(dims, factors, Some((cf, lvl))) {
        for (g, off) in gathered.iter_mut().zip(&offs) {
            *g = state.amps[base + off];
        }
        for (i, off) in offs.iter().enumerate() {
            let row = &op.data[i * k..(i + 1) * k];
            let mut acc = ZERO;
            for (a, x) in row.iter().zip(&gathered) {
                acc += a * x;
            }
            out.amps[base + off] = acc;
        }
    }
    Ok(out)
}

/// Dense embedding of `op` into the composite space: `op` on the named
/// factors, identity on the rest, entries permuted to canonical factor
/// order.
pub fn embed(op: &COperator, dims: &[usize], factors: &[usize]) -> Result<COperator> {
    let total = total_dim(dims)?;
    if op.rows != op.cols {
        return Err(Error::DimensionMismatch("embedded operator must be square".into()));
    }
    check_factors(dims, factors, op.rows)?;
    check_product_capacity(total, total)?;
    let offs = local_offsets(dims, factors);
    let k = offs.len();
    let mut out = COperator::zeros(total, total);
    for base in complement_bases(dims, factors, None) {
        for i in 0..k {
            for j in 0..k {
                let v = op.data[i * k + j];
                if v != ZERO {
                    out.set(base + offs[i], base + offs[j], v);
                }
            }
        }
    }
    Ok(out)
}

/// Haar-distributed unitary, deterministic per seed: a complex Ginibre
/// matrix orthonormalised by modified Gram-Schmidt (whose positive-diagonal
/// R fixes the phase convention).
pub fn haar_unitary(dim: usize, seed: u64) -> COperator {
    assert!(dim >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut g = COperator::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            let re: f64 = normal.sample(&mut rng);
            let im: f64 = normal.sample(&mut rng);
            g.set(i, j, C64::new(re * inv_sqrt2, im * inv_sqrt2));
        }
    }
    // Modified Gram-Schmidt over columns, with one re-orthogonalisation
    // pass to hold the 1e-12 unitarity contract at larger dims.
    let mut cols: Vec<Vec<C64>> = (0..dim)
        .map(|j| (0..dim).map(|i| g.get(i, j)).collect())
        .collect();
    for j in 0..dim {
        for _ in 0..2 {
            for p in 0..j {
                let proj: C64 = cols[p]
                    .iter()
                    .zip(cols[j].iter())
                    .map(|(q, v)| q.conj() * v)
                    .sum();
                for i in 0..dim {
                    let qv = cols[p][i];
                    cols[j][i] -= proj * qv;
                }
            }
        }
        let norm: f64 = cols[j].iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        assert!(norm > 1e-200, "degenerate Ginibre sample");
        for v in cols[j].iter_mut() {
            *v /= norm;
        }
    }
    let mut q = COperator::zeros(dim, dim);
    for j in 0..dim {
        for i in 0..dim {
            q.set(i, j, cols[j][i]);
        }
    }
    q
}
