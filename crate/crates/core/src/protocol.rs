//! Measurement protocols: an initial state followed by time-ordered coupling
//! and measurement events.
//!
//! Observables are supplied as eigenvalue-labeled projector families. Branch
//! membership is therefore exact, and grouping virtual paths by eigenvalue
//! never compares floating-point spectra.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::hilbert::{
    self, adjoint, column_space_basis, compose, embed_operator, ensure_orthonormal, kron_states,
    orthonormal_completion, OperatorMatrix, SpaceLayout, StateVector, Unitary, C64, ONE, ZERO,
};

/// Numerical thresholds used by validation and by the engines.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    /// Allowed `|‖ψ‖ − 1|` for protocol inputs.
    pub norm: f64,
    /// Allowed `‖U†U − I‖_max` for couplings.
    pub unitary: f64,
    /// Hermiticity, idempotence, orthogonality and completeness of projectors.
    pub projector: f64,
    /// Path prefixes with `|amplitude| ≤ prune` are not expanded.
    pub prune: f64,
    /// Distribution entries with probability `≤ report` are omitted.
    pub report: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            norm: hilbert::TOL_NORM,
            unitary: hilbert::TOL_UNITARY,
            projector: 1e-10,
            prune: 1e-14,
            report: 0.0,
        }
    }
}

/// Eigenvalue clustering gap used by [`ObservableDecomposition::from_hermitian_approx`].
pub const EIGENVALUE_GAP: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub eigenvalue: f64,
    pub label: String,
    pub projector: OperatorMatrix,
    /// Orthonormal basis of the projector's range; virtual paths pass through
    /// these vectors.
    pub basis: Vec<StateVector>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservableDecomposition {
    pub label: String,
    branches: Vec<Branch>,
}

fn canonical(eigenvalue: f64) -> f64 {
    // folds -0.0 into 0.0
    eigenvalue + 0.0
}

fn eigenvalue_text(e: f64) -> String {
    format!("{e}")
}

fn projector_from_basis(layout: &SpaceLayout, basis: &[StateVector]) -> OperatorMatrix {
    let d = layout.total_dim();
    let mut entries = vec![ZERO; d * d];
    for v in basis {
        let v = v.entries();
        for r in 0..d {
            for c in 0..d {
                entries[r * d + c] += v[r] * v[c].conj();
            }
        }
    }
    OperatorMatrix::new(layout.clone(), entries).expect("square by construction")
}

fn range_basis(projector: &OperatorMatrix) -> Vec<StateVector> {
    let rank = projector.trace().re.round().max(0.0) as usize;
    let mut basis = column_space_basis(projector, 1e-6);
    basis.truncate(rank);
    basis
}

impl ObservableDecomposition {
    /// Branches given as projectors; each branch basis is derived from the
    /// projector's columns.
    pub fn from_projectors(label: &str, branches: Vec<(f64, OperatorMatrix)>) -> Result<Self> {
        Self::common_layout(branches.iter().map(|(_, p)| p.layout()))?;
        let branches = branches
            .into_iter()
            .map(|(eigenvalue, projector)| {
                let eigenvalue = canonical(eigenvalue);
                Branch {
                    eigenvalue,
                    label: eigenvalue_text(eigenvalue),
                    basis: range_basis(&projector),
                    projector,
                }
            })
            .collect();
        Ok(Self {
            label: label.to_string(),
            branches,
        })
    }

    /// Branches given as orthonormal states spanning each eigenspace.
    pub fn from_bases(label: &str, branches: Vec<(f64, Vec<StateVector>)>) -> Result<Self> {
        let layout = Self::common_layout(branches.iter().flat_map(|(_, b)| b.iter().map(|s| s.layout())))?;
        let branches = branches
            .into_iter()
            .map(|(eigenvalue, basis)| {
                let eigenvalue = canonical(eigenvalue);
                Branch {
                    eigenvalue,
                    label: eigenvalue_text(eigenvalue),
                    projector: projector_from_basis(&layout, &basis),
                    basis,
                }
            })
            .collect();
        Ok(Self {
            label: label.to_string(),
            branches,
        })
    }

    /// Single branch with eigenvalue 1 and projector `I`.
    pub fn identity(label: &str, layout: &SpaceLayout) -> Self {
        let basis = (0..layout.total_dim())
            .map(|i| StateVector::basis(layout, i).expect("index in range"))
            .collect();
        Self {
            label: label.to_string(),
            branches: vec![Branch {
                eigenvalue: 1.0,
                label: eigenvalue_text(1.0),
                projector: OperatorMatrix::identity(layout),
                basis,
            }],
        }
    }

    /// Approximate decomposition of a Hermitian matrix: eigenvalues closer
    /// than `gap` are merged into one branch whose eigenvalue is the cluster
    /// mean. Only as exact as the underlying eigensolver.
    pub fn from_hermitian_approx(label: &str, op: &OperatorMatrix, gap: f64) -> Result<Self> {
        let d = op.dim();
        let dev = op.hermiticity_deviation();
        if dev > 1e-10 {
            return Err(Error::Consistency(format!(
                "matrix is not Hermitian (deviation {dev:e})"
            )));
        }
        let m = DMatrix::from_row_slice(d, d, op.entries());
        let eig = m.symmetric_eigen();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let mut clusters: Vec<Vec<usize>> = Vec::new();
        for &i in &order {
            match clusters.last_mut() {
                Some(c) if eig.eigenvalues[i] - eig.eigenvalues[*c.last().unwrap()] <= gap => c.push(i),
                _ => clusters.push(vec![i]),
            }
        }
        let branches = clusters
            .into_iter()
            .map(|cluster| {
                let mean = cluster.iter().map(|&i| eig.eigenvalues[i]).sum::<f64>() / cluster.len() as f64;
                let basis = cluster
                    .iter()
                    .map(|&i| {
                        let col: Vec<C64> = eig.eigenvectors.column(i).iter().copied().collect();
                        StateVector::new(op.layout().clone(), col)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((mean, basis))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_bases(label, branches)
    }

    fn common_layout<'a>(mut layouts: impl Iterator<Item = &'a SpaceLayout>) -> Result<SpaceLayout> {
        let first = layouts
            .next()
            .ok_or_else(|| Error::ShapeMismatch("observable has no branches".into()))?
            .clone();
        for l in layouts {
            if *l != first {
                return Err(Error::LayoutMismatch(format!(
                    "observable branches on {first} and {l}"
                )));
            }
        }
        Ok(first)
    }

    /// Replace branch labels, in branch order.
    pub fn with_branch_labels<S: AsRef<str>>(mut self, labels: &[S]) -> Result<Self> {
        if labels.len() != self.branches.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} branches",
                labels.len(),
                self.branches.len()
            )));
        }
        for (b, l) in self.branches.iter_mut().zip(labels) {
            b.label = l.as_ref().to_string();
        }
        Ok(self)
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn layout(&self) -> &SpaceLayout {
        self.branches[0].projector.layout()
    }

    /// `Σ eigenvalue · projector`.
    pub fn operator(&self) -> OperatorMatrix {
        let mut acc = OperatorMatrix::zeros(self.layout());
        for b in &self.branches {
            acc = acc
                .add(&b.projector.scaled(C64::new(b.eigenvalue, 0.0)))
                .expect("branches share a layout");
        }
        acc
    }

    /// Lift onto `layout`, acting on `targets`. Branch bases are re-derived
    /// from the embedded projectors.
    pub fn embed<S: AsRef<str>>(&self, targets: &[S], layout: &SpaceLayout) -> Result<Self> {
        let branches = self
            .branches
            .iter()
            .map(|b| {
                let projector = embed_operator(&b.projector, targets, layout)?;
                Ok(Branch {
                    eigenvalue: b.eigenvalue,
                    label: b.label.clone(),
                    basis: range_basis(&projector),
                    projector,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            label: self.label.clone(),
            branches,
        })
    }

    /// Apply `map` to every eigenvalue; projectors and bases are untouched.
    pub fn relabel_eigenvalues(&self, map: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for b in &mut out.branches {
            b.eigenvalue = canonical(map(b.eigenvalue));
        }
        out
    }

    /// Use a different orthonormal basis inside one branch.
    pub fn with_branch_basis(&self, branch: usize, basis: Vec<StateVector>) -> Result<Self> {
        let b = self
            .branches
            .get(branch)
            .ok_or_else(|| Error::UnknownOutcome(format!("branch {branch}")))?;
        ensure_orthonormal(&basis, 1e-10)?;
        let p = projector_from_basis(self.layout(), &basis);
        let deviation = p.max_abs_diff(&b.projector);
        if deviation > 1e-10 {
            return Err(Error::Consistency(format!(
                "new basis spans a different subspace (deviation {deviation:e})"
            )));
        }
        let mut out = self.clone();
        out.branches[branch].basis = basis;
        Ok(out)
    }

    /// Find a branch by its label or by the textual form of its eigenvalue.
    pub fn find_branch(&self, text: &str) -> Option<usize> {
        self.branches.iter().position(|b| b.label == text).or_else(|| {
            let value: f64 = text.parse().ok()?;
            self.branches.iter().position(|b| b.eigenvalue == canonical(value))
        })
    }

    fn issues(&self, event: usize, layout: &SpaceLayout, tol: f64) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let label = self.label.clone();
        if self.branches.is_empty() {
            out.push(Diagnostic::EmptyObservable { event, label });
            return out;
        }
        if self.layout() != layout {
            out.push(Diagnostic::EventLayoutMismatch { event });
            return out;
        }
        let id = OperatorMatrix::identity(layout);
        let mut sum = OperatorMatrix::zeros(layout);
        for (i, b) in self.branches.iter().enumerate() {
            if !b.eigenvalue.is_finite() {
                out.push(Diagnostic::NonFiniteEigenvalue { event, label: label.clone() });
            }
            if self.branches[..i].iter().any(|o| o.eigenvalue == b.eigenvalue) {
                out.push(Diagnostic::DuplicateEigenvalue {
                    event,
                    label: label.clone(),
                    eigenvalue: b.eigenvalue,
                });
            }
            if self.branches[..i].iter().any(|o| o.label == b.label) {
                out.push(Diagnostic::DuplicateBranchLabel {
                    event,
                    label: label.clone(),
                    branch: b.label.clone(),
                });
            }
            let p = &b.projector;
            let herm = p.hermiticity_deviation();
            if herm > tol {
                out.push(Diagnostic::ProjectorNotHermitian { event, branch: i, deviation: herm });
            }
            let idem = compose(p, p).expect("same layout").max_abs_diff(p);
            if idem > tol {
                out.push(Diagnostic::ProjectorNotIdempotent { event, branch: i, deviation: idem });
            }
            for (j, o) in self.branches.iter().enumerate().take(i) {
                let overlap = compose(&o.projector, p).expect("same layout").max_abs();
                if overlap > tol {
                    out.push(Diagnostic::ProjectorsOverlap { event, a: j, b: i, deviation: overlap });
                }
            }
            let basis_ok = b.basis.iter().all(|v| v.layout() == layout)
                && hilbert::orthonormality_deviation(&b.basis).map_or(false, |d| d <= tol)
                && projector_from_basis(layout, &b.basis).max_abs_diff(p) <= tol;
            if !basis_ok {
                out.push(Diagnostic::BranchBasisMismatch { event, branch: i });
            }
            sum = sum.add(p).expect("same layout");
        }
        let completeness = sum.max_abs_diff(&id);
        if completeness > tol {
            out.push(Diagnostic::IncompleteObservable {
                event,
                label,
                deviation: completeness,
            });
        }
        out
    }
}

/// Two-branch observable `{1: |axis⟩⟨axis|, 0: I − |axis⟩⟨axis|}` on a single
/// subsystem called `target`, with branch labels `yes` / `no`.
pub fn projector_observable(target: &str, axis: &StateVector) -> Result<ObservableDecomposition> {
    axis.ensure_normalized(hilbert::TOL_NORM)?;
    let layout = SpaceLayout::new([(target, axis.dim())])?;
    let axis = axis.with_layout(&layout)?;
    let yes = OperatorMatrix::projector(&axis);
    let no = OperatorMatrix::identity(&layout).sub(&yes)?;
    let mut complement = orthonormal_completion(std::slice::from_ref(&axis), &layout)?;
    complement.truncate(layout.total_dim() - 1);
    Ok(ObservableDecomposition {
        label: format!("{target}-projector"),
        branches: vec![
            Branch {
                eigenvalue: 1.0,
                label: "yes".into(),
                projector: yes,
                basis: vec![axis],
            },
            Branch {
                eigenvalue: 0.0,
                label: "no".into(),
                projector: no,
                basis: complement,
            },
        ],
    })
}

/// Pointer-flip coupling on `(pointer, system)`:
/// `|0⟩|b₁⟩ → |1⟩|b₁⟩`, `|0⟩|b₂⟩ → |0⟩|b₂⟩`, extended unitarily
/// (`U = X ⊗ |b₁⟩⟨b₁| + I ⊗ (I − |b₁⟩⟨b₁|)`).
pub fn controlled_flip_coupling(
    pointer: &str,
    system: &str,
    basis: [&StateVector; 2],
) -> Result<Unitary> {
    let sys_layout = SpaceLayout::new([(system, basis[0].dim())])?;
    let b1 = basis[0].with_layout(&sys_layout)?;
    let b2 = basis[1].with_layout(&sys_layout)?;
    ensure_orthonormal(&[b1.clone(), b2], 1e-10)?;
    flip_on(pointer, &b1, &[system])
}

/// Pointer flip conditioned on a distinguished state of a composite target;
/// identity on the complement. `distinguished` together with `completion`
/// must form an orthonormal basis of the targets' space.
pub fn composite_basis_coupling(
    pointer: &str,
    targets: &[&str],
    distinguished: &StateVector,
    completion: &[StateVector],
) -> Result<Unitary> {
    let dims: Vec<usize> = distinguished.layout().subsystems().iter().map(|s| s.dim).collect();
    let target_layout = if dims.len() == targets.len() {
        SpaceLayout::new(targets.iter().copied().zip(dims))?
    } else {
        return Err(Error::LayoutMismatch(format!(
            "distinguished state has {} factors, {} targets named",
            distinguished.layout().subsystems().len(),
            targets.len()
        )));
    };
    let mut family = vec![distinguished.with_layout(&target_layout)?];
    for s in completion {
        family.push(s.with_layout(&target_layout)?);
    }
    ensure_orthonormal(&family, 1e-10)?;
    if family.len() != target_layout.total_dim() {
        return Err(Error::Incomplete {
            expected: target_layout.total_dim(),
            found: family.len(),
        });
    }
    flip_on(pointer, &family[0], targets)
}

fn flip_on(pointer: &str, state: &StateVector, targets: &[&str]) -> Result<Unitary> {
    let mut names = vec![pointer];
    names.extend_from_slice(targets);
    let pointer_layout = SpaceLayout::new([(pointer, 2)])?;
    let layout = pointer_layout.concat(state.layout())?;
    let p = OperatorMatrix::projector(state);
    let q = OperatorMatrix::identity(state.layout()).sub(&p)?;
    let x = OperatorMatrix::from_fn(&pointer_layout, |r, c| if r != c { ONE } else { ZERO });
    let id = OperatorMatrix::identity(&pointer_layout);
    let u = hilbert::tensor_operator(&x, &p)?.add(&hilbert::tensor_operator(&id, &q)?)?;
    debug_assert_eq!(u.layout(), &layout);
    Unitary::new(u, 1e-10)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingEvent {
    pub time: f64,
    pub targets: Vec<String>,
    /// The coupling as supplied, acting on `targets` in order.
    pub local: OperatorMatrix,
    /// `local` embedded in the protocol layout.
    pub unitary: OperatorMatrix,
}

impl CouplingEvent {
    pub fn new<S: AsRef<str>>(
        time: f64,
        local: OperatorMatrix,
        targets: &[S],
        layout: &SpaceLayout,
    ) -> Result<Self> {
        let targets: Vec<String> = targets.iter().map(|t| t.as_ref().to_string()).collect();
        let target_layout = layout.sub_layout(&targets)?;
        let local = local.with_layout(&target_layout)?;
        let unitary = embed_operator(&local, &targets, layout)?;
        Ok(Self {
            time,
            targets,
            local,
            unitary,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementEvent {
    pub time: f64,
    pub observer: String,
    pub registered: bool,
    pub targets: Vec<String>,
    /// The observable as supplied, on `targets`.
    pub local: ObservableDecomposition,
    /// The observable on the full protocol layout.
    pub observable: ObservableDecomposition,
}

impl MeasurementEvent {
    pub fn new<S: AsRef<str>>(
        time: f64,
        observer: &str,
        local: ObservableDecomposition,
        targets: &[S],
        layout: &SpaceLayout,
        registered: bool,
    ) -> Result<Self> {
        let targets: Vec<String> = targets.iter().map(|t| t.as_ref().to_string()).collect();
        let target_layout = layout.sub_layout(&targets)?;
        let local = retarget(&local, &target_layout)?;
        let observable = if targets.len() == layout.subsystems().len()
            && targets.iter().zip(layout.names()).all(|(a, b)| a == b)
        {
            retarget(&local, layout)?
        } else {
            local.embed(&targets, layout)?
        };
        Ok(Self {
            time,
            observer: observer.to_string(),
            registered,
            targets,
            local,
            observable,
        })
    }
}

fn retarget(obs: &ObservableDecomposition, layout: &SpaceLayout) -> Result<ObservableDecomposition> {
    if obs.layout() == layout {
        return Ok(obs.clone());
    }
    let mut out = obs.clone();
    for b in &mut out.branches {
        b.projector = b.projector.with_layout(layout)?;
        b.basis = b
            .basis
            .iter()
            .map(|v| v.with_layout(layout))
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Coupling(CouplingEvent),
    Measurement(MeasurementEvent),
}

impl Event {
    pub fn time(&self) -> f64 {
        match self {
            Event::Coupling(c) => c.time,
            Event::Measurement(m) => m.time,
        }
    }

    pub fn as_measurement(&self) -> Option<&MeasurementEvent> {
        match self {
            Event::Measurement(m) => Some(m),
            Event::Coupling(_) => None,
        }
    }

    pub fn as_coupling(&self) -> Option<&CouplingEvent> {
        match self {
            Event::Coupling(c) => Some(c),
            Event::Measurement(_) => None,
        }
    }

    pub fn is_registered(&self) -> bool {
        matches!(self, Event::Measurement(m) if m.registered)
    }
}

/// A violated protocol invariant. Event indices are positions in
/// [`Protocol::events`].
#[derive(Clone, Debug, PartialEq)]
pub enum Diagnostic {
    InitialLayoutMismatch,
    InitialNotNormalized { norm: f64 },
    NonFiniteTime { event: usize },
    NonIncreasingTimes { event: usize, previous: f64, time: f64 },
    EventLayoutMismatch { event: usize },
    NotUnitary { event: usize, deviation: f64 },
    EmptyObservable { event: usize, label: String },
    NonFiniteEigenvalue { event: usize, label: String },
    DuplicateEigenvalue { event: usize, label: String, eigenvalue: f64 },
    DuplicateBranchLabel { event: usize, label: String, branch: String },
    ProjectorNotHermitian { event: usize, branch: usize, deviation: f64 },
    ProjectorNotIdempotent { event: usize, branch: usize, deviation: f64 },
    ProjectorsOverlap { event: usize, a: usize, b: usize, deviation: f64 },
    BranchBasisMismatch { event: usize, branch: usize },
    IncompleteObservable { event: usize, label: String, deviation: f64 },
    NoRegisteredEvents,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Diagnostic::*;
        match self {
            InitialLayoutMismatch => write!(f, "initial state is not on the protocol layout"),
            InitialNotNormalized { norm } => write!(f, "initial state not normalized (norm {norm})"),
            NonFiniteTime { event } => write!(f, "event {event}: non-finite time"),
            NonIncreasingTimes { event, previous, time } => write!(
                f,
                "event {event}: non-increasing times ({time} after {previous})"
            ),
            EventLayoutMismatch { event } => write!(f, "event {event}: operator not on the protocol layout"),
            NotUnitary { event, deviation } => {
                write!(f, "event {event}: coupling not unitary (deviation {deviation:e})")
            }
            EmptyObservable { event, label } => write!(f, "event {event}: observable `{label}` has no branches"),
            NonFiniteEigenvalue { event, label } => {
                write!(f, "event {event}: observable `{label}` has a non-finite eigenvalue")
            }
            DuplicateEigenvalue { event, label, eigenvalue } => write!(
                f,
                "event {event}: observable `{label}` repeats eigenvalue {eigenvalue}"
            ),
            DuplicateBranchLabel { event, label, branch } => write!(
                f,
                "event {event}: observable `{label}` repeats branch label `{branch}`"
            ),
            ProjectorNotHermitian { event, branch, deviation } => write!(
                f,
                "event {event}: branch {branch} projector not Hermitian (deviation {deviation:e})"
            ),
            ProjectorNotIdempotent { event, branch, deviation } => write!(
                f,
                "event {event}: branch {branch} projector not idempotent (deviation {deviation:e})"
            ),
            ProjectorsOverlap { event, a, b, deviation } => write!(
                f,
                "event {event}: branches {a} and {b} not orthogonal (deviation {deviation:e})"
            ),
            BranchBasisMismatch { event, branch } => write!(
                f,
                "event {event}: branch {branch} basis is not an orthonormal basis of its projector range"
            ),
            IncompleteObservable { event, label, deviation } => write!(
                f,
                "event {event}: incomplete observable `{label}` (projectors sum to I within {deviation:e})"
            ),
            NoRegisteredEvents => write!(f, "no registered measurement events"),
        }
    }
}

/// One registered outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub observer: String,
    pub eigenvalue: f64,
    pub label: String,
    /// Branch index within the event's observable.
    pub branch: usize,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}^{}", self.label, self.observer)
    }
}

/// One outcome per registered event, in time order.
#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeSequence {
    pub outcomes: Vec<Outcome>,
}

impl OutcomeSequence {
    pub fn key(&self) -> Vec<usize> {
        self.outcomes.iter().map(|o| o.branch).collect()
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }
}

impl fmt::Display for OutcomeSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.outcomes.iter().map(ToString::to_string).collect();
        write!(f, "({})", parts.join(", "))
    }
}

/// Probabilities over outcome sequences, ordered by branch-index key.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Distribution {
    pub entries: Vec<(OutcomeSequence, f64)>,
}

impl Distribution {
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|(_, p)| p).sum()
    }

    pub fn probability(&self, key: &[usize]) -> f64 {
        self.entries
            .iter()
            .find(|(o, _)| o.key() == key)
            .map_or(0.0, |(_, p)| *p)
    }

    /// Classical marginal over the registered slots in `keep`.
    pub fn marginal(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() {
            return Err(Error::InvalidSlots("empty keep set".into()));
        }
        let width = self.entries.first().map_or(0, |(o, _)| o.len());
        for (i, &k) in keep.iter().enumerate() {
            if k >= width && !self.entries.is_empty() {
                return Err(Error::InvalidSlots(format!("slot {k} out of range (have {width})")));
            }
            if keep[..i].contains(&k) {
                return Err(Error::InvalidSlots(format!("slot {k} listed twice")));
            }
        }
        let mut acc: BTreeMap<Vec<usize>, (OutcomeSequence, f64)> = BTreeMap::new();
        for (seq, p) in &self.entries {
            let reduced = OutcomeSequence {
                outcomes: keep.iter().map(|&k| seq.outcomes[k].clone()).collect(),
            };
            acc.entry(reduced.key())
                .or_insert_with(|| (reduced, 0.0))
                .1 += p;
        }
        Ok(Self {
            entries: acc.into_values().collect(),
        })
    }

    /// Largest per-outcome difference; outcomes missing on one side count as 0.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut keys: Vec<Vec<usize>> = self.entries.iter().map(|(o, _)| o.key()).collect();
        keys.extend(other.entries.iter().map(|(o, _)| o.key()));
        keys.sort();
        keys.dedup();
        keys.iter()
            .map(|k| (self.probability(k) - other.probability(k)).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub layout: SpaceLayout,
    pub initial: StateVector,
    pub events: Vec<Event>,
    pub tolerances: Tolerances,
}

impl Protocol {
    pub fn new(initial: StateVector) -> Self {
        Self {
            layout: initial.layout().clone(),
            initial,
            events: Vec::new(),
            tolerances: Tolerances::default(),
        }
    }

    pub fn with_tolerances(mut self, tolerances: Tolerances) -> Self {
        self.tolerances = tolerances;
        self
    }

    pub fn add_coupling<S: AsRef<str>>(
        &mut self,
        time: f64,
        local: &OperatorMatrix,
        targets: &[S],
    ) -> Result<&mut Self> {
        let ev = CouplingEvent::new(time, local.clone(), targets, &self.layout)?;
        self.events.push(Event::Coupling(ev));
        Ok(self)
    }

    pub fn add_measurement<S: AsRef<str>>(
        &mut self,
        time: f64,
        observer: &str,
        observable: &ObservableDecomposition,
        targets: &[S],
        registered: bool,
    ) -> Result<&mut Self> {
        let ev = MeasurementEvent::new(time, observer, observable.clone(), targets, &self.layout, registered)?;
        self.events.push(Event::Measurement(ev));
        Ok(self)
    }

    /// Measurement of an observable already defined on the full layout.
    pub fn add_full_measurement(
        &mut self,
        time: f64,
        observer: &str,
        observable: &ObservableDecomposition,
        registered: bool,
    ) -> Result<&mut Self> {
        let names: Vec<String> = self.layout.names().map(str::to_string).collect();
        self.add_measurement(time, observer, observable, &names, registered)
    }

    /// Event indices of the registered measurements, in time order.
    pub fn registered_indices(&self) -> Vec<usize> {
        self.events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_registered())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn registered_events(&self) -> Vec<&MeasurementEvent> {
        self.events
            .iter()
            .filter_map(Event::as_measurement)
            .filter(|m| m.registered)
            .collect()
    }

    pub fn measurement_indices(&self) -> Vec<usize> {
        self.events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.as_measurement().is_some())
            .map(|(i, _)| i)
            .collect()
    }

    /// Every violated invariant; empty means valid.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let tol = &self.tolerances;
        let mut out = Vec::new();
        if self.initial.layout() != &self.layout {
            out.push(Diagnostic::InitialLayoutMismatch);
        } else if !self.initial.is_normalized(tol.norm) {
            out.push(Diagnostic::InitialNotNormalized {
                norm: self.initial.norm(),
            });
        }
        let mut previous: Option<f64> = None;
        for (i, ev) in self.events.iter().enumerate() {
            let t = ev.time();
            if !t.is_finite() {
                out.push(Diagnostic::NonFiniteTime { event: i });
            } else {
                if let Some(p) = previous {
                    if t <= p {
                        out.push(Diagnostic::NonIncreasingTimes {
                            event: i,
                            previous: p,
                            time: t,
                        });
                    }
                }
                previous = Some(t);
            }
            match ev {
                Event::Coupling(c) => {
                    if c.unitary.layout() != &self.layout {
                        out.push(Diagnostic::EventLayoutMismatch { event: i });
                        continue;
                    }
                    let deviation = c.unitary.unitarity_deviation();
                    if deviation > tol.unitary {
                        out.push(Diagnostic::NotUnitary { event: i, deviation });
                    }
                }
                Event::Measurement(m) => {
                    out.extend(m.observable.issues(i, &self.layout, tol.projector));
                }
            }
        }
        if !self.events.iter().any(Event::is_registered) {
            out.push(Diagnostic::NoRegisteredEvents);
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let diags = self.validate();
        if diags.is_empty() {
            Ok(())
        } else if diags == [Diagnostic::NoRegisteredEvents] {
            Err(Error::NoRegisteredEvents)
        } else {
            Err(Error::InvalidProtocol(diags))
        }
    }

    /// Copy with the `registered` flag of measurement event `index` set.
    pub fn with_registered(&self, index: usize, registered: bool) -> Result<Self> {
        let mut out = self.clone();
        match out.events.get_mut(index) {
            Some(Event::Measurement(m)) => {
                m.registered = registered;
                Ok(out)
            }
            _ => Err(Error::ShapeMismatch(format!("event {index} is not a measurement"))),
        }
    }

    /// Copy in which every registered event except the last is unregistered.
    pub fn with_intermediates_demoted(&self) -> Self {
        let reg = self.registered_indices();
        let mut out = self.clone();
        if let Some((_, rest)) = reg.split_last() {
            for &i in rest {
                if let Event::Measurement(m) = &mut out.events[i] {
                    m.registered = false;
                }
            }
        }
        out
    }

    pub fn without_event(&self, index: usize) -> Self {
        let mut out = self.clone();
        out.events.remove(index);
        out
    }

    /// Rebuild on a new layout that contains every current subsystem (in any
    /// order) plus new ones, whose initial states are given by `extra`.
    /// Couplings and observables are re-embedded from their local forms.
    pub fn relayout(&self, layout: &SpaceLayout, extra: &[StateVector]) -> Result<Self> {
        let mut initial = self.initial.clone();
        for s in extra {
            initial = kron_states(&initial, s)?;
        }
        let initial = initial.permuted_to(layout)?;
        let mut out = Protocol {
            layout: layout.clone(),
            initial,
            events: Vec::with_capacity(self.events.len()),
            tolerances: self.tolerances,
        };
        for ev in &self.events {
            out.events.push(match ev {
                Event::Coupling(c) => {
                    Event::Coupling(CouplingEvent::new(c.time, c.local.clone(), &c.targets, layout)?)
                }
                Event::Measurement(m) => Event::Measurement(MeasurementEvent::new(
                    m.time,
                    &m.observer,
                    m.local.clone(),
                    &m.targets,
                    layout,
                    m.registered,
                )?),
            });
        }
        Ok(out)
    }

    /// Resolve `label^observer`, `label`, or an eigenvalue against registered
    /// slot `slot`.
    pub fn resolve_outcome(&self, slot: usize, text: &str) -> Result<Outcome> {
        let events = self.registered_events();
        let m = events
            .get(slot)
            .ok_or_else(|| Error::InvalidSlots(format!("slot {slot} out of range")))?;
        let (label, observer) = match text.rsplit_once('^') {
            Some((l, o)) => (l, Some(o)),
            None => (text, None),
        };
        if let Some(o) = observer {
            if o != m.observer {
                return Err(Error::UnknownOutcome(text.to_string()));
            }
        }
        let branch = m
            .observable
            .find_branch(label)
            .ok_or_else(|| Error::UnknownOutcome(text.to_string()))?;
        Ok(outcome_of(m, branch))
    }

    /// Resolve an outcome of the last registered event.
    pub fn resolve_final(&self, text: &str) -> Result<Outcome> {
        let n = self.registered_events().len();
        if n == 0 {
            return Err(Error::NoRegisteredEvents);
        }
        self.resolve_outcome(n - 1, text)
    }

    /// Build an outcome sequence from branch indices, one per registered slot.
    pub fn outcome_sequence(&self, branches: &[usize]) -> Result<OutcomeSequence> {
        let events = self.registered_events();
        if branches.len() != events.len() {
            return Err(Error::OutcomeLength {
                expected: events.len(),
                actual: branches.len(),
            });
        }
        let outcomes = events
            .iter()
            .zip(branches)
            .map(|(m, &b)| {
                if b < m.observable.branches().len() {
                    Ok(outcome_of(m, b))
                } else {
                    Err(Error::UnknownOutcome(format!("branch {b} of `{}`", m.observable.label)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OutcomeSequence { outcomes })
    }

    /// Resolve a sequence of outcome texts, one per registered slot.
    pub fn parse_sequence<S: AsRef<str>>(&self, texts: &[S]) -> Result<OutcomeSequence> {
        let n = self.registered_events().len();
        if texts.len() != n {
            return Err(Error::OutcomeLength {
                expected: n,
                actual: texts.len(),
            });
        }
        let outcomes = texts
            .iter()
            .enumerate()
            .map(|(slot, t)| self.resolve_outcome(slot, t.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(OutcomeSequence { outcomes })
    }

    /// Ordered product of the coupling unitaries with event index in `range`.
    pub fn evolution(&self, range: std::ops::Range<usize>) -> OperatorMatrix {
        let mut u = OperatorMatrix::identity(&self.layout);
        for ev in &self.events[range] {
            if let Event::Coupling(c) = ev {
                u = compose(&c.unitary, &u).expect("validated layout");
            }
        }
        u
    }

    /// `U O U†` for the Heisenberg picture of an observable operator.
    pub fn conjugate(u: &OperatorMatrix, op: &OperatorMatrix) -> Result<OperatorMatrix> {
        compose(&compose(u, op)?, &adjoint(u))
    }
}

pub(crate) fn outcome_of(m: &MeasurementEvent, branch: usize) -> Outcome {
    let b = &m.observable.branches()[branch];
    Outcome {
        observer: m.observer.clone(),
        eigenvalue: b.eigenvalue,
        label: b.label.clone(),
        branch,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_1_SQRT_2 as H;

    fn q(a: f64, b: f64) -> StateVector {
        StateVector::real("q", &[a, b]).unwrap()
    }

    #[test]
    fn projector_observable_axis_one() {
        let obs = projector_observable("F", &q(0.0, 1.0)).unwrap();
        let b = obs.branches();
        assert_eq!(b[0].eigenvalue, 1.0);
        assert_eq!(b[0].label, "yes");
        assert_eq!(b[0].projector.get(1, 1), ONE);
        assert_eq!(b[0].projector.get(0, 0), ZERO);
        assert_eq!(b[1].eigenvalue, 0.0);
        assert_eq!(b[1].label, "no");
        assert_abs_diff_eq!(b[1].projector.get(0, 0).re, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b[1].projector.get(1, 1).re, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn projector_observable_diagonal_axis() {
        let obs = projector_observable("F", &q(H, H)).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert_abs_diff_eq!(obs.branches()[0].projector.get(r, c).re, 0.5, epsilon = 1e-15);
            }
        }
        let sum = obs.branches()[0].projector.add(&obs.branches()[1].projector).unwrap();
        assert!(sum.max_abs_diff(&OperatorMatrix::identity(obs.layout())) < 1e-15);
        assert!(projector_observable("F", &q(1.0, 1.0)).is_err());
    }

    #[test]
    fn controlled_flip_computational_is_cnot() {
        let u = controlled_flip_coupling("p", "s", [&q(1.0, 0.0), &q(0.0, 1.0)]).unwrap();
        // |p s⟩: flip p when s = |0⟩ (b₁ = |0⟩)
        let images = [2, 1, 0, 3];
        for (col, &img) in images.iter().enumerate() {
            for row in 0..4 {
                let e = if row == img { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(u.matrix().get(row, col).re, e, epsilon = 1e-15);
            }
        }
        assert!(u.matrix().is_unitary(1e-12));
    }

    #[test]
    fn controlled_flip_hadamard_basis() {
        let plus = q(H, H);
        let minus = q(H, -H);
        let u = controlled_flip_coupling("p", "s", [&plus, &minus]).unwrap();
        let input = StateVector::basis(u.layout(), 0).unwrap(); // |0_p⟩|0⟩
        let out = hilbert::apply(u.matrix(), &input).unwrap();
        // (|1⟩|+⟩ + |0⟩|−⟩)/√2 = (½, −½, ½, ½)
        let expected = [0.5, -0.5, 0.5, 0.5];
        for (z, e) in out.entries().iter().zip(expected) {
            assert_abs_diff_eq!(z.re, e, epsilon = 1e-15);
        }
        let sq = compose(u.matrix(), u.matrix()).unwrap();
        assert!(sq.max_abs_diff(&OperatorMatrix::identity(u.layout())) < 1e-10);
    }

    #[test]
    fn controlled_flip_rejects_non_orthonormal() {
        assert!(matches!(
            controlled_flip_coupling("p", "s", [&q(1.0, 0.0), &q(H, H)]),
            Err(Error::NotOrthonormal { .. })
        ));
    }

    fn fs_pair() -> (StateVector, Vec<StateVector>) {
        let l = SpaceLayout::qubits(&["F", "S"]).unwrap();
        let e = |i| StateVector::basis(&l, i).unwrap();
        // |1^F s₁⟩ = |10⟩, |0^F s₂⟩ = |01⟩ with s₁ = |0⟩, s₂ = |1⟩
        let one = e(2).add_scaled(ONE, &e(1)).unwrap().scaled(C64::new(H, 0.0));
        let two = e(2).add_scaled(-ONE, &e(1)).unwrap().scaled(C64::new(H, 0.0));
        (one, vec![two, e(0), e(3)])
    }

    #[test]
    fn composite_coupling_action() {
        let (one, completion) = fs_pair();
        let u = composite_basis_coupling("W", &["F", "S"], &one, &completion).unwrap();
        let lay = u.layout().clone();
        let lift = |s: &StateVector, w: usize| {
            let w = StateVector::basis(&SpaceLayout::qubits(&["W"]).unwrap(), w).unwrap();
            kron_states(&w, s).unwrap().with_layout(&lay).unwrap()
        };
        let out = hilbert::apply(u.matrix(), &lift(&one, 0)).unwrap();
        assert!(out.max_abs_diff(&lift(&one, 1)) < 1e-15);
        let out = hilbert::apply(u.matrix(), &lift(&completion[0], 0)).unwrap();
        assert!(out.max_abs_diff(&lift(&completion[0], 0)) < 1e-15);
    }

    #[test]
    fn composite_product_state_reduces_to_controlled_flip() {
        let l = SpaceLayout::qubits(&["s"]).unwrap();
        let b1 = StateVector::basis(&l, 0).unwrap();
        let b2 = StateVector::basis(&l, 1).unwrap();
        let a = composite_basis_coupling("p", &["s"], &b1, &[b2.clone()]).unwrap();
        let b = controlled_flip_coupling("p", "s", [&b1, &b2]).unwrap();
        assert_eq!(a.matrix().entries(), b.matrix().entries());
    }

    #[test]
    fn composite_rejects_bad_family() {
        let (one, mut completion) = fs_pair();
        let skewed = completion[0].add_scaled(C64::new(1e-3, 0.0), &one).unwrap();
        completion[0] = skewed;
        assert!(matches!(
            composite_basis_coupling("W", &["F", "S"], &one, &completion),
            Err(Error::NotOrthonormal { .. })
        ));
        let (one, completion) = fs_pair();
        assert!(matches!(
            composite_basis_coupling("W", &["F", "S"], &one, &completion[..2]),
            Err(Error::Incomplete { .. })
        ));
    }

    fn simple_protocol() -> Protocol {
        let l = SpaceLayout::qubits(&["a", "b"]).unwrap();
        let mut p = Protocol::new(StateVector::basis(&l, 0).unwrap());
        let obs = projector_observable("a", &q(0.0, 1.0)).unwrap();
        let u = controlled_flip_coupling("a", "b", [&q(1.0, 0.0), &q(0.0, 1.0)]).unwrap();
        p.add_coupling(1.0, u.matrix(), &["a", "b"]).unwrap();
        p.add_measurement(2.0, "A", &obs, &["a"], true).unwrap();
        p
    }

    #[test]
    fn validate_accepts_simple() {
        assert!(simple_protocol().validate().is_empty());
    }

    #[test]
    fn validate_flags_equal_times() {
        let mut p = simple_protocol();
        if let Event::Measurement(m) = &mut p.events[1] {
            m.time = 1.0;
        }
        let d = p.validate();
        assert!(matches!(d[..], [Diagnostic::NonIncreasingTimes { event: 1, .. }]));
        assert!(d[0].to_string().contains("non-increasing times"));
    }

    #[test]
    fn validate_flags_incomplete_observable() {
        let l = SpaceLayout::qubits(&["a"]).unwrap();
        let id = OperatorMatrix::identity(&l);
        let obs = ObservableDecomposition::from_projectors("scaled", vec![(1.0, id.scaled(C64::new(0.9, 0.0)))]).unwrap();
        let mut p = Protocol::new(StateVector::basis(&l, 0).unwrap());
        p.add_full_measurement(1.0, "A", &obs, true).unwrap();
        let d = p.validate();
        assert!(d.iter().any(|x| matches!(x, Diagnostic::IncompleteObservable { label, .. } if label == "scaled")));
        assert!(d.iter().any(|x| x.to_string().contains("incomplete observable `scaled`")));
        assert!(matches!(p.ensure_valid(), Err(Error::InvalidProtocol(_))));
    }

    #[test]
    fn validate_reports_everything() {
        let l = SpaceLayout::qubits(&["a"]).unwrap();
        let mut p = Protocol::new(StateVector::real("a", &[1.0, 1.0]).unwrap());
        let bad = OperatorMatrix::from_fn(&l, |_, _| ONE);
        p.add_coupling(1.0, &bad, &["a"]).unwrap();
        let d = p.validate();
        assert!(d.contains(&Diagnostic::NoRegisteredEvents));
        assert!(d.iter().any(|x| matches!(x, Diagnostic::NotUnitary { .. })));
        assert!(d.iter().any(|x| matches!(x, Diagnostic::InitialNotNormalized { .. })));
    }

    #[test]
    fn duplicate_eigenvalues_flagged() {
        let l = SpaceLayout::qubits(&["a"]).unwrap();
        let obs = ObservableDecomposition::from_bases(
            "dup",
            vec![
                (1.0, vec![StateVector::basis(&l, 0).unwrap()]),
                (1.0, vec![StateVector::basis(&l, 1).unwrap()]),
            ],
        )
        .unwrap();
        let mut p = Protocol::new(StateVector::basis(&l, 0).unwrap());
        p.add_full_measurement(1.0, "A", &obs, true).unwrap();
        assert!(p.validate().iter().any(|x| matches!(x, Diagnostic::DuplicateEigenvalue { .. })));
    }

    #[test]
    fn hermitian_helper_groups_degenerate_eigenvalues() {
        let l = SpaceLayout::new([("x", 3)]).unwrap();
        let op = OperatorMatrix::from_fn(&l, |r, c| {
            if r == c {
                C64::new(if r == 2 { 5.0 } else { 2.0 }, 0.0)
            } else {
                ZERO
            }
        });
        let obs = ObservableDecomposition::from_hermitian_approx("h", &op, EIGENVALUE_GAP).unwrap();
        assert_eq!(obs.branches().len(), 2);
        assert_eq!(obs.branches()[0].basis.len(), 2);
        assert!(obs.operator().max_abs_diff(&op) < 1e-12);
    }

    #[test]
    fn relabel_keeps_projectors() {
        let obs = projector_observable("F", &q(H, H)).unwrap();
        let r = obs.relabel_eigenvalues(|e| 3.0 * e - 7.0);
        for (a, b) in obs.branches().iter().zip(r.branches()) {
            assert_eq!(a.projector, b.projector);
        }
        assert_eq!(r.branches()[0].eigenvalue, -4.0);
    }

    #[test]
    fn outcome_resolution() {
        let p = simple_protocol();
        assert_eq!(p.resolve_final("yes^A").unwrap().branch, 0);
        assert_eq!(p.resolve_final("no").unwrap().branch, 1);
        assert_eq!(p.resolve_final("0").unwrap().branch, 1);
        assert!(p.resolve_final("yes^B").is_err());
        assert!(p.resolve_final("maybe").is_err());
    }

    #[test]
    fn marginal_errors() {
        let d = Distribution::default();
        assert!(d.marginal(&[]).is_err());
    }
}
