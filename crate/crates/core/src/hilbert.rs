//! Dense complex linear algebra over labeled tensor-product spaces.
//!
//! Basis-index convention: the leftmost subsystem of a [`SpaceLayout`] is the
//! most significant digit of the composite index, so for a layout
//! `(W, F, S)` of qubits the basis state `|w f s⟩` sits at index `4w + 2f + s`.
//! All reordering of subsystems goes through [`embed_operator`] and
//! [`SpaceLayout::permuted`].

use std::fmt;

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Default normalization tolerance for protocol inputs.
pub const TOL_NORM: f64 = 1e-12;
/// Default tolerance for `‖U†U − I‖_max`.
pub const TOL_UNITARY: f64 = 1e-10;
/// Largest composite dimension the dense engines accept.
pub const MAX_TOTAL_DIM: usize = 256;

pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);
pub(crate) const ONE: C64 = C64::new(1.0, 0.0);

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Subsystem {
    pub name: String,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SpaceLayout {
    subsystems: Vec<Subsystem>,
    total_dim: usize,
}

impl SpaceLayout {
    pub fn new<I, S>(subsystems: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, usize)>,
        S: Into<String>,
    {
        let subsystems: Vec<Subsystem> = subsystems
            .into_iter()
            .map(|(name, dim)| Subsystem {
                name: name.into(),
                dim,
            })
            .collect();
        if subsystems.is_empty() {
            return Err(Error::InvalidLayout("layout has no subsystems".into()));
        }
        let mut total_dim = 1usize;
        for (i, sub) in subsystems.iter().enumerate() {
            if sub.name.is_empty() {
                return Err(Error::InvalidLayout(format!("subsystem {i} has an empty name")));
            }
            if sub.dim < 2 {
                return Err(Error::InvalidLayout(format!(
                    "subsystem `{}` has dimension {} (must be at least 2)",
                    sub.name, sub.dim
                )));
            }
            if subsystems[..i].iter().any(|s| s.name == sub.name) {
                return Err(Error::InvalidLayout(format!(
                    "duplicate subsystem name `{}`",
                    sub.name
                )));
            }
            total_dim = total_dim
                .checked_mul(sub.dim)
                .filter(|&d| d <= MAX_TOTAL_DIM)
                .ok_or_else(|| {
                    Error::InvalidLayout(format!(
                        "total dimension exceeds the dense limit of {MAX_TOTAL_DIM}"
                    ))
                })?;
        }
        Ok(Self {
            subsystems,
            total_dim,
        })
    }

    /// Layout made of two-level systems with the given names.
    pub fn qubits(names: &[&str]) -> Result<Self> {
        Self::new(names.iter().map(|&n| (n, 2)))
    }

    pub fn subsystems(&self) -> &[Subsystem] {
        &self.subsystems
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.subsystems.iter().map(|s| s.name.as_str())
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.subsystems
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::UnknownSubsystem(name.to_string()))
    }

    pub fn dim_of(&self, name: &str) -> Result<usize> {
        Ok(self.subsystems[self.position(name)?].dim)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.subsystems.iter().any(|s| s.name == name)
    }

    /// Stride of each subsystem digit in the composite index.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.subsystems.len()];
        for i in (0..self.subsystems.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.subsystems[i + 1].dim;
        }
        strides
    }

    /// Per-subsystem digits of a composite basis index, most significant first.
    pub fn digits(&self, mut index: usize) -> Vec<usize> {
        let mut digits = vec![0; self.subsystems.len()];
        for (slot, sub) in digits.iter_mut().zip(&self.subsystems).rev() {
            *slot = index % sub.dim;
            index /= sub.dim;
        }
        digits
    }

    pub fn index(&self, digits: &[usize]) -> usize {
        digits
            .iter()
            .zip(&self.subsystems)
            .fold(0, |acc, (&d, s)| acc * s.dim + d)
    }

    /// Layout of the named subsystems, in the order given.
    pub fn sub_layout<S: AsRef<str>>(&self, names: &[S]) -> Result<Self> {
        let subs = names
            .iter()
            .map(|n| {
                let n = n.as_ref();
                self.dim_of(n).map(|d| (n.to_string(), d))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(subs)
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        Self::new(
            self.subsystems
                .iter()
                .chain(&other.subsystems)
                .map(|s| (s.name.clone(), s.dim)),
        )
    }

    /// Same subsystems, reordered. `order` must name every subsystem once.
    pub fn permuted<S: AsRef<str>>(&self, order: &[S]) -> Result<Self> {
        if order.len() != self.subsystems.len() {
            return Err(Error::LayoutMismatch(format!(
                "permutation names {} subsystems, layout has {}",
                order.len(),
                self.subsystems.len()
            )));
        }
        self.sub_layout(order)
    }

    /// True when both layouts have the same dimension sequence.
    pub fn same_shape(&self, other: &Self) -> bool {
        self.subsystems.len() == other.subsystems.len()
            && self
                .subsystems
                .iter()
                .zip(&other.subsystems)
                .all(|(a, b)| a.dim == b.dim)
    }
}

impl fmt::Display for SpaceLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .subsystems
            .iter()
            .map(|s| format!("{}:{}", s.name, s.dim))
            .collect();
        write!(f, "({})", parts.join(", "))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    layout: SpaceLayout,
    entries: Vec<C64>,
}

impl StateVector {
    pub fn new(layout: SpaceLayout, entries: Vec<C64>) -> Result<Self> {
        if entries.len() != layout.total_dim() {
            return Err(Error::DimensionMismatch {
                expected: layout.total_dim(),
                actual: entries.len(),
            });
        }
        Ok(Self { layout, entries })
    }

    /// A vector on a fresh single-subsystem layout.
    pub fn on(name: &str, entries: Vec<C64>) -> Result<Self> {
        let layout = SpaceLayout::new([(name, entries.len())])?;
        Self::new(layout, entries)
    }

    /// Real-amplitude convenience constructor for a single subsystem.
    pub fn real(name: &str, amplitudes: &[f64]) -> Result<Self> {
        Self::on(name, amplitudes.iter().map(|&a| C64::new(a, 0.0)).collect())
    }

    pub fn basis(layout: &SpaceLayout, index: usize) -> Result<Self> {
        if index >= layout.total_dim() {
            return Err(Error::DimensionMismatch {
                expected: layout.total_dim(),
                actual: index,
            });
        }
        let mut entries = vec![ZERO; layout.total_dim()];
        entries[index] = ONE;
        Ok(Self {
            layout: layout.clone(),
            entries,
        })
    }

    pub fn zeros(layout: &SpaceLayout) -> Self {
        Self {
            layout: layout.clone(),
            entries: vec![ZERO; layout.total_dim()],
        }
    }

    pub fn layout(&self) -> &SpaceLayout {
        &self.layout
    }

    pub fn entries(&self) -> &[C64] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<C64> {
        self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        (self.norm() - 1.0).abs() <= tol
    }

    pub fn ensure_normalized(&self, tol: f64) -> Result<()> {
        if self.is_normalized(tol) {
            Ok(())
        } else {
            Err(Error::NotNormalized { norm: self.norm() })
        }
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::NotNormalized { norm: n });
        }
        Ok(self.scaled(C64::new(1.0 / n, 0.0)))
    }

    pub fn scaled(&self, factor: C64) -> Self {
        Self {
            layout: self.layout.clone(),
            entries: self.entries.iter().map(|&z| z * factor).collect(),
        }
    }

    /// `self + factor · other` on the same layout.
    pub fn add_scaled(&self, factor: C64, other: &Self) -> Result<Self> {
        same_layout(&self.layout, &other.layout)?;
        Ok(Self {
            layout: self.layout.clone(),
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(&a, &b)| a + factor * b)
                .collect(),
        })
    }

    /// Reinterpret the amplitudes on a layout with the same dimension sequence.
    pub fn with_layout(&self, layout: &SpaceLayout) -> Result<Self> {
        if !self.layout.same_shape(layout) {
            return Err(Error::LayoutMismatch(format!(
                "cannot move a state on {} onto {}",
                self.layout, layout
            )));
        }
        Ok(Self {
            layout: layout.clone(),
            entries: self.entries.clone(),
        })
    }

    /// Reorder the tensor factors to match `layout`, which must contain the
    /// same subsystems in any order.
    pub fn permuted_to(&self, layout: &SpaceLayout) -> Result<Self> {
        let map = permutation_map(&self.layout, layout)?;
        let mut entries = vec![ZERO; self.dim()];
        for (i, &j) in map.iter().enumerate() {
            entries[j] = self.entries[i];
        }
        Self::new(layout.clone(), entries)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorMatrix {
    layout: SpaceLayout,
    /// Row-major, `dim × dim`.
    entries: Vec<C64>,
}

impl OperatorMatrix {
    pub fn new(layout: SpaceLayout, entries: Vec<C64>) -> Result<Self> {
        let d = layout.total_dim();
        if entries.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                actual: entries.len(),
            });
        }
        Ok(Self { layout, entries })
    }

    pub fn from_rows(layout: SpaceLayout, rows: &[Vec<C64>]) -> Result<Self> {
        let d = layout.total_dim();
        if rows.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: rows.len(),
            });
        }
        let mut entries = Vec::with_capacity(d * d);
        for row in rows {
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: row.len(),
                });
            }
            entries.extend_from_slice(row);
        }
        Ok(Self { layout, entries })
    }

    pub fn from_fn(layout: &SpaceLayout, f: impl Fn(usize, usize) -> C64) -> Self {
        let d = layout.total_dim();
        let entries = (0..d * d).map(|k| f(k / d, k % d)).collect();
        Self {
            layout: layout.clone(),
            entries,
        }
    }

    pub fn identity(layout: &SpaceLayout) -> Self {
        Self::from_fn(layout, |r, c| if r == c { ONE } else { ZERO })
    }

    pub fn zeros(layout: &SpaceLayout) -> Self {
        Self::from_fn(layout, |_, _| ZERO)
    }

    /// `|ket⟩⟨bra|`.
    pub fn outer(ket: &StateVector, bra: &StateVector) -> Result<Self> {
        same_layout(ket.layout(), bra.layout())?;
        let (k, b) = (ket.entries(), bra.entries());
        Ok(Self::from_fn(ket.layout(), |r, c| k[r] * b[c].conj()))
    }

    /// `|state⟩⟨state|`.
    pub fn projector(state: &StateVector) -> Self {
        let s = state.entries();
        Self::from_fn(state.layout(), |r, c| s[r] * s[c].conj())
    }

    pub fn layout(&self) -> &SpaceLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.total_dim()
    }

    pub fn entries(&self) -> &[C64] {
        &self.entries
    }

    pub fn get(&self, row: usize, col: usize) -> C64 {
        self.entries[row * self.dim() + col]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[C64]> {
        self.entries.chunks(self.dim())
    }

    pub fn column(&self, col: usize) -> StateVector {
        let d = self.dim();
        StateVector {
            layout: self.layout.clone(),
            entries: (0..d).map(|r| self.entries[r * d + col]).collect(),
        }
    }

    pub fn trace(&self) -> C64 {
        (0..self.dim()).map(|i| self.get(i, i)).sum()
    }

    pub fn scaled(&self, factor: C64) -> Self {
        Self {
            layout: self.layout.clone(),
            entries: self.entries.iter().map(|&z| z * factor).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        same_layout(&self.layout, &other.layout)?;
        Ok(Self {
            layout: self.layout.clone(),
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scaled(C64::new(-1.0, 0.0)))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `‖U†U − I‖_max`.
    pub fn unitarity_deviation(&self) -> f64 {
        let d = self.dim();
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                let mut acc = ZERO;
                for k in 0..d {
                    acc += self.entries[k * d + i].conj() * self.entries[k * d + j];
                }
                let target = if i == j { ONE } else { ZERO };
                worst = worst.max((acc - target).norm());
            }
        }
        worst
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.unitarity_deviation() <= tol
    }

    pub fn hermiticity_deviation(&self) -> f64 {
        let d = self.dim();
        let mut worst = 0.0f64;
        for i in 0..d {
            for j in i..d {
                worst = worst.max((self.get(i, j) - self.get(j, i).conj()).norm());
            }
        }
        worst
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_deviation() <= tol
    }

    /// Reinterpret the matrix on a layout with the same dimension sequence.
    pub fn with_layout(&self, layout: &SpaceLayout) -> Result<Self> {
        if !self.layout.same_shape(layout) {
            return Err(Error::LayoutMismatch(format!(
                "cannot move an operator on {} onto {}",
                self.layout, layout
            )));
        }
        Ok(Self {
            layout: layout.clone(),
            entries: self.entries.clone(),
        })
    }
}

/// An operator that passed a unitarity check.
#[derive(Clone, Debug, PartialEq)]
pub struct Unitary(OperatorMatrix);

impl Unitary {
    pub fn new(op: OperatorMatrix, tol: f64) -> Result<Self> {
        let deviation = op.unitarity_deviation();
        if deviation > tol {
            return Err(Error::NotUnitary { deviation });
        }
        Ok(Self(op))
    }

    pub fn identity(layout: &SpaceLayout) -> Self {
        Self(OperatorMatrix::identity(layout))
    }

    pub fn matrix(&self) -> &OperatorMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> OperatorMatrix {
        self.0
    }

    pub fn layout(&self) -> &SpaceLayout {
        self.0.layout()
    }

    pub fn inverse(&self) -> Self {
        Self(adjoint(&self.0))
    }

    pub fn embed<S: AsRef<str>>(&self, targets: &[S], layout: &SpaceLayout) -> Result<Self> {
        embed_operator(&self.0, targets, layout).map(Self)
    }
}

fn same_layout(a: &SpaceLayout, b: &SpaceLayout) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::LayoutMismatch(format!("{a} vs {b}")))
    }
}

/// For each composite index of `from`, the index of the same basis state in `to`.
fn permutation_map(from: &SpaceLayout, to: &SpaceLayout) -> Result<Vec<usize>> {
    if from.subsystems().len() != to.subsystems().len() {
        return Err(Error::LayoutMismatch(format!("{from} vs {to}")));
    }
    let mut target_pos = Vec::with_capacity(from.subsystems().len());
    for sub in from.subsystems() {
        let p = to.position(&sub.name)?;
        if to.subsystems()[p].dim != sub.dim {
            return Err(Error::LayoutMismatch(format!("{from} vs {to}")));
        }
        target_pos.push(p);
    }
    let strides = to.strides();
    Ok((0..from.total_dim())
        .map(|i| {
            from.digits(i)
                .iter()
                .zip(&target_pos)
                .map(|(&d, &p)| d * strides[p])
                .sum()
        })
        .collect())
}

pub fn apply(op: &OperatorMatrix, state: &StateVector) -> Result<StateVector> {
    same_layout(op.layout(), state.layout())?;
    let s = state.entries();
    let entries = op
        .rows()
        .map(|row| row.iter().zip(s).map(|(a, b)| a * b).sum())
        .collect();
    Ok(StateVector {
        layout: state.layout.clone(),
        entries,
    })
}

/// `⟨a|b⟩`, conjugate-linear in `a`.
pub fn inner(a: &StateVector, b: &StateVector) -> Result<C64> {
    same_layout(a.layout(), b.layout())?;
    Ok(a.entries()
        .iter()
        .zip(b.entries())
        .map(|(x, y)| x.conj() * y)
        .sum())
}

pub fn adjoint(op: &OperatorMatrix) -> OperatorMatrix {
    let d = op.dim();
    OperatorMatrix::from_fn(op.layout(), |r, c| op.entries[c * d + r].conj())
}

/// Matrix product `a · b` (apply `b` first).
pub fn compose(a: &OperatorMatrix, b: &OperatorMatrix) -> Result<OperatorMatrix> {
    same_layout(a.layout(), b.layout())?;
    let d = a.dim();
    let mut entries = vec![ZERO; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a.entries[i * d + k];
            if aik == ZERO {
                continue;
            }
            let row = &b.entries[k * d..(k + 1) * d];
            for (out, bkj) in entries[i * d..(i + 1) * d].iter_mut().zip(row) {
                *out += aik * bkj;
            }
        }
    }
    Ok(OperatorMatrix {
        layout: a.layout.clone(),
        entries,
    })
}

/// Kronecker product of normalized factors, in order. The result lives on the
/// concatenation of the factor layouts.
pub fn tensor_state(factors: &[StateVector]) -> Result<StateVector> {
    tensor_state_with_tol(factors, TOL_NORM)
}

pub fn tensor_state_with_tol(factors: &[StateVector], tol: f64) -> Result<StateVector> {
    let (first, rest) = factors
        .split_first()
        .ok_or_else(|| Error::LayoutMismatch("no factors given".into()))?;
    first.ensure_normalized(tol)?;
    let mut acc = first.clone();
    for f in rest {
        f.ensure_normalized(tol)?;
        acc = kron_states(&acc, f)?;
    }
    Ok(acc)
}

/// Kronecker product of two vectors without any normalization requirement.
pub fn kron_states(a: &StateVector, b: &StateVector) -> Result<StateVector> {
    let layout = a.layout().concat(b.layout())?;
    let entries = a
        .entries()
        .iter()
        .flat_map(|x| b.entries().iter().map(move |y| x * y))
        .collect();
    StateVector::new(layout, entries)
}

/// Kronecker product `a ⊗ b` on the concatenated layout.
pub fn tensor_operator(a: &OperatorMatrix, b: &OperatorMatrix) -> Result<OperatorMatrix> {
    let layout = a.layout().concat(b.layout())?;
    let db = b.dim();
    Ok(OperatorMatrix::from_fn(&layout, |r, c| {
        a.get(r / db, c / db) * b.get(r % db, c % db)
    }))
}

/// Lift `local`, acting on the named `targets` in the given order, to the full
/// `layout`. Identity on every other subsystem; targets need not be adjacent.
pub fn embed_operator<S: AsRef<str>>(
    local: &OperatorMatrix,
    targets: &[S],
    layout: &SpaceLayout,
) -> Result<OperatorMatrix> {
    let positions = targets
        .iter()
        .map(|t| layout.position(t.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    for (i, p) in positions.iter().enumerate() {
        if positions[..i].contains(p) {
            return Err(Error::LayoutMismatch(format!(
                "target `{}` listed twice",
                targets[i].as_ref()
            )));
        }
    }
    let local_dims: Vec<usize> = positions.iter().map(|&p| layout.subsystems()[p].dim).collect();
    let local_layout = local.layout();
    if local_layout.subsystems().len() != local_dims.len()
        || local_layout
            .subsystems()
            .iter()
            .zip(&local_dims)
            .any(|(s, &d)| s.dim != d)
    {
        // Accept a flat local operator as long as the total dimension agrees.
        let expected: usize = local_dims.iter().product();
        if local.dim() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: local.dim(),
            });
        }
    }

    let strides = layout.strides();
    let d_loc: usize = local_dims.iter().product();
    // Contribution of each local basis index to the composite index.
    let offsets: Vec<usize> = (0..d_loc)
        .map(|mut li| {
            let mut off = 0;
            for (k, &dim) in local_dims.iter().enumerate().rev() {
                off += (li % dim) * strides[positions[k]];
                li /= dim;
            }
            off
        })
        .collect();
    let local_index = |full: usize| -> usize {
        positions
            .iter()
            .zip(&local_dims)
            .fold(0, |acc, (&p, &dim)| {
                acc * dim + (full / strides[p]) % layout.subsystems()[p].dim
            })
    };

    let d = layout.total_dim();
    let mut entries = vec![ZERO; d * d];
    for col in 0..d {
        let lc = local_index(col);
        let base = col - offsets[lc];
        for (lr, &off) in offsets.iter().enumerate() {
            entries[(base + off) * d + col] = local.get(lr, lc);
        }
    }
    OperatorMatrix::new(layout.clone(), entries)
}

/// Embed and check unitarity in one step.
pub fn embed_unitary<S: AsRef<str>>(
    local: &OperatorMatrix,
    targets: &[S],
    layout: &SpaceLayout,
    tol: f64,
) -> Result<Unitary> {
    Unitary::new(local.clone(), tol)?;
    Ok(Unitary(embed_operator(local, targets, layout)?))
}

/// Largest deviation of the Gram matrix of `states` from the identity.
pub fn orthonormality_deviation(states: &[StateVector]) -> Result<f64> {
    let mut worst = 0.0f64;
    for (i, a) in states.iter().enumerate() {
        for (j, b) in states.iter().enumerate().skip(i) {
            let target = if i == j { ONE } else { ZERO };
            worst = worst.max((inner(a, b)? - target).norm());
        }
    }
    Ok(worst)
}

pub fn ensure_orthonormal(states: &[StateVector], tol: f64) -> Result<()> {
    let deviation = orthonormality_deviation(states)?;
    if deviation > tol {
        Err(Error::NotOrthonormal { deviation })
    } else {
        Ok(())
    }
}

/// Orthonormal basis of the column space of `op`, from modified Gram-Schmidt
/// over columns in order of decreasing norm. Vectors whose residual norm falls
/// below `rank_tol` are discarded.
pub fn column_space_basis(op: &OperatorMatrix, rank_tol: f64) -> Vec<StateVector> {
    let d = op.dim();
    let mut cols: Vec<(usize, f64)> = (0..d)
        .map(|c| (c, op.column(c).norm()))
        .collect();
    cols.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut basis: Vec<StateVector> = Vec::new();
    for (c, _) in cols {
        if basis.len() == d {
            break;
        }
        if let Some(v) = orthogonalize(op.column(c), &basis, rank_tol) {
            basis.push(v);
        }
    }
    basis
}

/// Extend an orthonormal family to a full basis of its layout using the
/// computational basis as a source of candidates.
pub fn orthonormal_completion(family: &[StateVector], layout: &SpaceLayout) -> Result<Vec<StateVector>> {
    for s in family {
        same_layout(s.layout(), layout)?;
    }
    let mut all: Vec<StateVector> = family.to_vec();
    let mut completion = Vec::new();
    for i in 0..layout.total_dim() {
        if all.len() == layout.total_dim() {
            break;
        }
        if let Some(v) = orthogonalize(StateVector::basis(layout, i)?, &all, 1e-6) {
            all.push(v.clone());
            completion.push(v);
        }
    }
    Ok(completion)
}

fn orthogonalize(mut v: StateVector, basis: &[StateVector], tol: f64) -> Option<StateVector> {
    // Two passes keep the result orthogonal to working precision.
    for _ in 0..2 {
        for b in basis {
            let c: C64 = b
                .entries
                .iter()
                .zip(&v.entries)
                .map(|(x, y)| x.conj() * y)
                .sum();
            for (vi, bi) in v.entries.iter_mut().zip(&b.entries) {
                *vi -= c * bi;
            }
        }
    }
    let n = v.norm();
    if n <= tol {
        None
    } else {
        Some(v.scaled(C64::new(1.0 / n, 0.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    fn qubit(name: &str, a: f64, b: f64) -> StateVector {
        StateVector::real(name, &[a, b]).unwrap()
    }

    #[test]
    fn layout_rejects_bad_input() {
        assert!(SpaceLayout::new([("a", 2), ("a", 2)]).is_err());
        assert!(SpaceLayout::new([("a", 1)]).is_err());
        assert!(SpaceLayout::new(Vec::<(&str, usize)>::new()).is_err());
        assert!(SpaceLayout::new((0..9).map(|i| (format!("q{i}"), 2))).is_err());
        let l = SpaceLayout::new([("a", 2), ("b", 3)]).unwrap();
        assert_eq!(l.total_dim(), 6);
        assert_eq!(l.digits(5), vec![1, 2]);
        assert_eq!(l.index(&[1, 2]), 5);
        assert_eq!(l.strides(), vec![3, 1]);
    }

    #[test]
    fn tensor_of_computational_zeros() {
        let s = tensor_state(&[qubit("W", 1.0, 0.0), qubit("F", 1.0, 0.0), qubit("S", 1.0, 0.0)]).unwrap();
        assert_eq!(s.entries()[0], ONE);
        assert!(s.entries()[1..].iter().all(|z| *z == ZERO));
    }

    #[test]
    fn tensor_product_structure() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let s = tensor_state(&[qubit("W", 1.0, 0.0), qubit("F", 1.0, 0.0), qubit("S", h, h)]).unwrap();
        assert_abs_diff_eq!(s.entries()[0].re, h, epsilon = 1e-15);
        assert_abs_diff_eq!(s.entries()[1].re, h, epsilon = 1e-15);
        assert!(s.entries()[2..].iter().all(|z| *z == ZERO));
    }

    #[test]
    fn tensor_plus_minus() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let s = tensor_state(&[qubit("a", h, h), qubit("b", h, -h)]).unwrap();
        // (|0⟩+|1⟩)(|0⟩−|1⟩)/2 = (|00⟩ − |01⟩ + |10⟩ − |11⟩)/2
        let expected = [0.5, -0.5, 0.5, -0.5];
        for (z, e) in s.entries().iter().zip(expected) {
            assert_abs_diff_eq!(z.re, e, epsilon = 1e-15);
            assert_eq!(z.im, 0.0);
        }
    }

    #[test]
    fn tensor_rejects_unnormalized_and_clashing() {
        assert!(matches!(
            tensor_state(&[qubit("a", 1.0, 1.0)]),
            Err(Error::NotNormalized { .. })
        ));
        assert!(tensor_state(&[qubit("a", 1.0, 0.0), qubit("a", 1.0, 0.0)]).is_err());
    }

    fn cnot_local() -> OperatorMatrix {
        let l = SpaceLayout::qubits(&["c", "t"]).unwrap();
        OperatorMatrix::from_fn(&l, |r, col| {
            let image = if col >= 2 { col ^ 1 } else { col };
            if r == image {
                ONE
            } else {
                ZERO
            }
        })
    }

    #[test]
    fn embed_identity_is_identity() {
        let layout = SpaceLayout::qubits(&["W", "F", "S"]).unwrap();
        let id = OperatorMatrix::identity(&SpaceLayout::qubits(&["S"]).unwrap());
        let e = embed_operator(&id, &["S"], &layout).unwrap();
        assert_eq!(e, OperatorMatrix::identity(&layout));
    }

    #[test]
    fn embed_cnot_nonadjacent_order() {
        // control = S (least significant), target = F (middle).
        let layout = SpaceLayout::qubits(&["W", "F", "S"]).unwrap();
        let e = embed_operator(&cnot_local(), &["S", "F"], &layout).unwrap();
        // Hand enumeration: flip F iff S = 1.
        let images = [0b000, 0b011, 0b010, 0b001, 0b100, 0b111, 0b110, 0b101];
        for (col, &img) in images.iter().enumerate() {
            for row in 0..8 {
                let expected = if row == img { ONE } else { ZERO };
                assert_eq!(e.get(row, col), expected, "col {col:03b} row {row:03b}");
            }
        }
    }

    #[test]
    fn embed_rejects_unknown_and_mismatched() {
        let layout = SpaceLayout::qubits(&["W", "F", "S"]).unwrap();
        assert!(matches!(
            embed_operator(&cnot_local(), &["S", "X"], &layout),
            Err(Error::UnknownSubsystem(_))
        ));
        assert!(matches!(
            embed_operator(&cnot_local(), &["S"], &layout),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(embed_operator(&cnot_local(), &["S", "S"], &layout).is_err());
    }

    #[test]
    fn embedding_non_unitary_tagged_unitary_fails() {
        let layout = SpaceLayout::qubits(&["W", "F"]).unwrap();
        let local = OperatorMatrix::from_fn(&SpaceLayout::qubits(&["x"]).unwrap(), |_, _| c(1.0));
        assert!(matches!(
            embed_unitary(&local, &["F"], &layout, TOL_UNITARY),
            Err(Error::NotUnitary { .. })
        ));
    }

    #[test]
    fn inner_products() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let zero = qubit("q", 1.0, 0.0);
        let one = qubit("q", 0.0, 1.0);
        assert_eq!(inner(&zero, &one).unwrap(), ZERO);
        let plus = qubit("q", h, h);
        assert_abs_diff_eq!(inner(&plus, &zero).unwrap().re, h, epsilon = 1e-15);
        let l = zero.layout().clone();
        assert_eq!(apply(&OperatorMatrix::identity(&l), &plus).unwrap(), plus);
        // conjugate-linear in the first slot
        let i_zero = zero.scaled(C64::new(0.0, 1.0));
        assert_eq!(inner(&i_zero, &zero).unwrap(), C64::new(0.0, -1.0));
    }

    #[test]
    fn layout_mismatch_errors() {
        let a = qubit("a", 1.0, 0.0);
        let b = qubit("b", 1.0, 0.0);
        assert!(matches!(inner(&a, &b), Err(Error::LayoutMismatch(_))));
    }

    #[test]
    fn permuted_state_moves_digits() {
        let s = tensor_state(&[qubit("a", 0.0, 1.0), qubit("b", 1.0, 0.0)]).unwrap(); // |10⟩
        let flipped = s.permuted_to(&SpaceLayout::qubits(&["b", "a"]).unwrap()).unwrap(); // |01⟩
        assert_eq!(flipped.entries()[1], ONE);
    }

    #[test]
    fn column_space_of_projector() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let p = OperatorMatrix::projector(&qubit("q", h, h));
        let basis = column_space_basis(&p, 1e-8);
        assert_eq!(basis.len(), 1);
        assert_abs_diff_eq!(inner(&basis[0], &qubit("q", h, h)).unwrap().norm(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn completion_fills_basis() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let plus = qubit("q", h, h);
        let rest = orthonormal_completion(std::slice::from_ref(&plus), plus.layout()).unwrap();
        assert_eq!(rest.len(), 1);
        let mut all = vec![plus];
        all.extend(rest);
        assert!(orthonormality_deviation(&all).unwrap() < 1e-14);
    }
}
