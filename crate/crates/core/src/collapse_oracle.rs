//! Collapse-based reference engine.
//!
//! Density-matrix evolution with Lüders branching at registered events:
//! couplings act as `ρ → UρU†`, and a registered measurement splits `ρ` into
//! children `PρP / tr[PρP]` with weights `tr[PρP]`. Nothing here reuses the
//! path engine's amplitude code, so agreement between the two is a real test.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::exec::{map_ordered, Execution};
use crate::hilbert::{apply, OperatorMatrix, SpaceLayout, StateVector, C64, ZERO};
use crate::protocol::{outcome_of, Distribution, Event, Outcome, OutcomeSequence, Protocol};

/// Children lighter than this are dropped; their mass is not redistributed.
pub const BRANCH_DROP: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    layout: SpaceLayout,
    /// Row-major.
    entries: Vec<C64>,
}

impl DensityMatrix {
    pub fn from_pure(state: &StateVector) -> Self {
        let s = state.entries();
        let d = s.len();
        let mut entries = Vec::with_capacity(d * d);
        for r in 0..d {
            for c in 0..d {
                entries.push(s[r] * s[c].conj());
            }
        }
        Self {
            layout: state.layout().clone(),
            entries,
        }
    }

    pub fn zeros(layout: &SpaceLayout) -> Self {
        let d = layout.total_dim();
        Self {
            layout: layout.clone(),
            entries: vec![ZERO; d * d],
        }
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

    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.entries[r * self.dim() + c]
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.get(i, i).re).sum()
    }

    pub fn purity(&self) -> f64 {
        // tr ρ² = Σ |ρ_ij|² for Hermitian ρ
        self.entries.iter().map(|z| z.norm_sqr()).sum()
    }

    /// `tr[Pρ]`.
    pub fn expectation(&self, op: &OperatorMatrix) -> f64 {
        let d = self.dim();
        let mut acc = ZERO;
        for i in 0..d {
            for k in 0..d {
                acc += op.get(i, k) * self.entries[k * d + i];
            }
        }
        acc.re
    }

    /// `UρU†`.
    pub fn conjugated(&self, u: &OperatorMatrix) -> Self {
        let d = self.dim();
        let a = u.entries();
        let mut tmp = vec![ZERO; d * d];
        for i in 0..d {
            for k in 0..d {
                let aik = a[i * d + k];
                if aik == ZERO {
                    continue;
                }
                for j in 0..d {
                    tmp[i * d + j] += aik * self.entries[k * d + j];
                }
            }
        }
        let mut out = vec![ZERO; d * d];
        for i in 0..d {
            for j in 0..d {
                let mut acc = ZERO;
                for k in 0..d {
                    acc += tmp[i * d + k] * a[j * d + k].conj();
                }
                out[i * d + j] = acc;
            }
        }
        Self {
            layout: self.layout.clone(),
            entries: out,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            layout: self.layout.clone(),
            entries: self.entries.iter().map(|z| z * factor).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            layout: self.layout.clone(),
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let d = self.dim();
        let m = DMatrix::from_row_slice(d, d, &self.entries);
        m.symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Unit trace, Hermitian and positive semidefinite within the module
    /// tolerances.
    pub fn is_physical(&self) -> bool {
        let d = self.dim();
        let hermitian = (0..d).all(|i| (i..d).all(|j| (self.get(i, j) - self.get(j, i).conj()).norm() <= 1e-12));
        (self.trace() - 1.0).abs() <= 1e-10 && hermitian && self.min_eigenvalue() >= -1e-9
    }
}

/// One node of the collapse tree.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchNode {
    /// The registered outcome that created this node (`None` at the root).
    pub outcome: Option<Outcome>,
    /// Probability conditioned on the parent.
    pub probability: f64,
    /// Normalized post-measurement state, after any couplings up to the next
    /// registered event.
    pub state: DensityMatrix,
    pub children: Vec<BranchNode>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchTree {
    pub root: BranchNode,
}

impl BranchTree {
    /// Leaves with their outcome sequences and joint probabilities, in
    /// depth-first branch order.
    pub fn leaves(&self) -> Vec<(Vec<Outcome>, f64, &DensityMatrix)> {
        let mut out = Vec::new();
        collect_leaves(&self.root, &mut Vec::new(), 1.0, &mut out);
        out
    }

    /// Total joint probability held by the nodes at each depth.
    pub fn mass_by_depth(&self) -> Vec<f64> {
        let mut out = Vec::new();
        mass(&self.root, 0, 1.0, &mut out);
        out
    }
}

fn collect_leaves<'a>(
    node: &'a BranchNode,
    path: &mut Vec<Outcome>,
    weight: f64,
    out: &mut Vec<(Vec<Outcome>, f64, &'a DensityMatrix)>,
) {
    let weight = weight * node.probability;
    if let Some(o) = &node.outcome {
        path.push(o.clone());
    }
    if node.children.is_empty() {
        out.push((path.clone(), weight, &node.state));
    } else {
        for c in &node.children {
            collect_leaves(c, path, weight, out);
        }
    }
    if node.outcome.is_some() {
        path.pop();
    }
}

fn mass(node: &BranchNode, depth: usize, weight: f64, out: &mut Vec<f64>) {
    let weight = weight * node.probability;
    if out.len() <= depth {
        out.push(0.0);
    }
    out[depth] += weight;
    for c in &node.children {
        mass(c, depth + 1, weight, out);
    }
}

/// Apply couplings until the next registered measurement, then branch.
fn grow(events: &[Event], mut rho: DensityMatrix, exec: Execution) -> (DensityMatrix, Vec<BranchNode>) {
    for (i, ev) in events.iter().enumerate() {
        match ev {
            Event::Coupling(c) => rho = rho.conjugated(&c.unitary),
            Event::Measurement(m) if m.registered => {
                let rest = &events[i + 1..];
                let branches: Vec<usize> = (0..m.observable.branches().len()).collect();
                let children = map_ordered(exec, &branches, |&b| {
                    let p = &m.observable.branches()[b].projector;
                    let projected = rho.conjugated(p);
                    let weight = projected.trace();
                    if weight < BRANCH_DROP {
                        return None;
                    }
                    let (state, children) = grow(rest, projected.scaled(1.0 / weight), exec);
                    Some(BranchNode {
                        outcome: Some(outcome_of(m, b)),
                        probability: weight,
                        state,
                        children,
                    })
                });
                return (rho, children.into_iter().flatten().collect());
            }
            Event::Measurement(_) => {}
        }
    }
    (rho, Vec::new())
}

pub fn branch_tree(protocol: &Protocol) -> Result<BranchTree> {
    branch_tree_with(protocol, Execution::default())
}

pub fn branch_tree_with(protocol: &Protocol, exec: Execution) -> Result<BranchTree> {
    protocol.ensure_valid()?;
    let (state, children) = grow(&protocol.events, DensityMatrix::from_pure(&protocol.initial), exec);
    Ok(BranchTree {
        root: BranchNode {
            outcome: None,
            probability: 1.0,
            state,
            children,
        },
    })
}

pub fn evolve_collapse(protocol: &Protocol) -> Result<Distribution> {
    evolve_collapse_with(protocol, Execution::default())
}

pub fn evolve_collapse_with(protocol: &Protocol, exec: Execution) -> Result<Distribution> {
    let tree = branch_tree_with(protocol, exec)?;
    let report = protocol.tolerances.report;
    Ok(Distribution {
        entries: tree
            .leaves()
            .into_iter()
            .filter(|(_, p, _)| *p > report)
            .map(|(outcomes, p, _)| (OutcomeSequence { outcomes }, p))
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateMode {
    /// Unitary evolution only; requires no registered event up to the time.
    Pure,
    /// Branch-averaged Lüders state.
    Mixture,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StateSnapshot {
    Pure(StateVector),
    Mixture(DensityMatrix),
}

/// State of the whole layout just after every event with `event.time ≤ time`.
pub fn state_after(protocol: &Protocol, time: f64, mode: StateMode) -> Result<StateSnapshot> {
    protocol.ensure_valid()?;
    let first = protocol.events.first().map_or(f64::INFINITY, Event::time);
    if time < first {
        return Err(Error::TimeBeforeEvents(time));
    }
    let cut = protocol.events.iter().take_while(|e| e.time() <= time).count();
    let events = &protocol.events[..cut];
    match mode {
        StateMode::Pure => {
            if events.iter().any(Event::is_registered) {
                return Err(Error::ShapeMismatch(
                    "pure state requested after a registered event".into(),
                ));
            }
            let mut psi = protocol.initial.clone();
            for ev in events {
                if let Event::Coupling(c) = ev {
                    psi = apply(&c.unitary, &psi)?;
                }
            }
            Ok(StateSnapshot::Pure(psi))
        }
        StateMode::Mixture => {
            let (state, children) = grow(events, DensityMatrix::from_pure(&protocol.initial), Execution::Sequential);
            let root = BranchTree {
                root: BranchNode {
                    outcome: None,
                    probability: 1.0,
                    state,
                    children,
                },
            };
            let mut acc = DensityMatrix::zeros(&protocol.layout);
            for (_, p, rho) in root.leaves() {
                acc = acc.add(&rho.scaled(p));
            }
            Ok(StateSnapshot::Mixture(acc))
        }
    }
}

/// Probability of a final outcome of W computed two ways, from the state
/// ascribed just after F's event: `p_pure = ⟨φ|U†PU|φ⟩` with F not registering,
/// `p_mixture = tr[P UρU†]` with F registering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WignerComparison {
    pub p_pure: f64,
    pub p_mixture: f64,
}

/// `protocol` must contain exactly two measurement events: F's first and W's
/// (registered) last. F's `registered` flag is overridden for each mode.
pub fn wigner_comparison(protocol: &Protocol, final_outcome: &Outcome) -> Result<WignerComparison> {
    let measurements = protocol.measurement_indices();
    let [f_idx, w_idx] = measurements[..] else {
        return Err(Error::ShapeMismatch(format!(
            "expected two measurement events, found {}",
            measurements.len()
        )));
    };
    let w = protocol.events[w_idx].as_measurement().expect("measurement");
    if !w.registered {
        return Err(Error::ShapeMismatch("the final measurement must be registered".into()));
    }
    if final_outcome.observer != w.observer || final_outcome.branch >= w.observable.branches().len() {
        return Err(Error::UnknownOutcome(final_outcome.to_string()));
    }
    let projector = &w.observable.branches()[final_outcome.branch].projector;
    let f_time = protocol.events[f_idx].time();
    let later: Vec<&OperatorMatrix> = protocol.events[f_idx + 1..w_idx]
        .iter()
        .filter_map(Event::as_coupling)
        .map(|c| &c.unitary)
        .collect();

    let pure = protocol.with_registered(f_idx, false)?;
    let StateSnapshot::Pure(mut phi) = state_after(&pure, f_time, StateMode::Pure)? else {
        unreachable!("pure mode returns a vector");
    };
    for u in &later {
        phi = apply(u, &phi)?;
    }
    let p_pure = DensityMatrix::from_pure(&phi).expectation(projector);

    let mixed = protocol.with_registered(f_idx, true)?;
    let StateSnapshot::Mixture(mut rho) = state_after(&mixed, f_time, StateMode::Mixture)? else {
        unreachable!("mixture mode returns a density matrix");
    };
    for u in &later {
        rho = rho.conjugated(u);
    }
    let p_mixture = rho.expectation(projector);

    Ok(WignerComparison { p_pure, p_mixture })
}
