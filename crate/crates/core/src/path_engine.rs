//! Outcome probabilities from sums over virtual paths.
//!
//! A virtual path picks one basis vector `|q_n⟩` inside some branch at every
//! registered event. Its amplitude is the product of transfer elements
//! `⟨q_next|U|q_prev⟩`, starting from `⟨q¹|U₀|ψ₀⟩`, where each `U` is the ordered
//! product of the couplings between consecutive registered events.
//! Unregistered measurements contribute no node.
//!
//! Amplitudes of paths that agree on the branch at every intermediate event and
//! end on the same final basis vector are added coherently; the squared moduli
//! are then summed over the final branch's basis.
//!
//! Summation order: paths are produced depth-first, lexicographically in
//! (branch, basis index) at each slot, and every sum is taken sequentially
//! in that order. Parallel evaluation splits on the first slot and
//! concatenates in order, so both execution policies give identical bits.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::exec::{map_ordered, Execution};
use crate::hilbert::{apply, compose, inner, OperatorMatrix, StateVector, C64, ZERO};
use crate::protocol::{Distribution, Event, Outcome, OutcomeSequence, Protocol};

/// A node of a virtual path: basis vector `basis` of branch `branch`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PathNode {
    pub branch: usize,
    pub basis: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VirtualPath {
    /// One node per registered event.
    pub nodes: Vec<PathNode>,
    pub amplitude: C64,
}

impl VirtualPath {
    pub fn branches(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.branch).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RealPathRecord {
    pub outcome: OutcomeSequence,
    /// Coherent amplitude for each basis vector of the final branch.
    pub coherent_amplitudes: Vec<C64>,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterferenceReport {
    pub final_outcome: Outcome,
    /// Virtual paths of the protocol as given that end in the final branch.
    pub paths: Vec<VirtualPath>,
    /// Real-path amplitudes per intermediate outcome sequence (final slot
    /// included), one per final basis vector.
    pub real_paths: Vec<(OutcomeSequence, Vec<C64>)>,
    /// Probability with intermediate events registered: `Σₖ Σₙ |aₖₙ|²`.
    pub incoherent_sum: f64,
    /// Probability with intermediate events demoted: `Σₙ |Σₖ aₖₙ|²`.
    pub coherent_sum: f64,
    /// `coherent_sum − incoherent_sum`.
    pub interference_term: f64,
    /// `Σₙ 2 Σ_{k<j} Re[aₖₙ* aⱼₙ]`, the same quantity from pair products.
    pub pairwise_term: f64,
}

/// Precomputed transfer elements between the branch bases of consecutive
/// registered events.
struct PathSpace {
    /// Per slot, the flattened (branch, basis) nodes.
    nodes: Vec<Vec<PathNode>>,
    /// `⟨q¹ₙ|U₀|ψ₀⟩` for every node of the first slot.
    start: Vec<C64>,
    /// `transfer[l][m * prev + n] = ⟨q^{l+1}_m|U_l|q^l_n⟩`, for `l ≥ 1`
    /// stored at index `l − 1`.
    transfer: Vec<Vec<C64>>,
    prune: f64,
}

/// Ordered coupling products between registered events: `segments[0]` acts
/// before the first registered event, `segments[l]` between slots `l−1` and `l`.
fn segment_unitaries(protocol: &Protocol) -> Vec<OperatorMatrix> {
    let mut segments = Vec::new();
    let mut current = OperatorMatrix::identity(&protocol.layout);
    for ev in &protocol.events {
        match ev {
            Event::Coupling(c) => {
                current = compose(&c.unitary, &current).expect("validated layout");
            }
            Event::Measurement(m) if m.registered => {
                segments.push(std::mem::replace(
                    &mut current,
                    OperatorMatrix::identity(&protocol.layout),
                ));
            }
            Event::Measurement(_) => {}
        }
    }
    segments
}

impl PathSpace {
    fn build(protocol: &Protocol) -> Result<Self> {
        protocol.ensure_valid()?;
        let events = protocol.registered_events();
        let segments = segment_unitaries(protocol);
        let flat: Vec<Vec<(PathNode, &StateVector)>> = events
            .iter()
            .map(|m| {
                m.observable
                    .branches()
                    .iter()
                    .enumerate()
                    .flat_map(|(b, br)| {
                        br.basis
                            .iter()
                            .enumerate()
                            .map(move |(n, v)| (PathNode { branch: b, basis: n }, v))
                    })
                    .collect()
            })
            .collect();

        let evolved = apply(&segments[0], &protocol.initial)?;
        let start = flat[0]
            .iter()
            .map(|(_, q)| inner(q, &evolved))
            .collect::<Result<Vec<_>>>()?;

        let mut transfer = Vec::with_capacity(flat.len().saturating_sub(1));
        for l in 1..flat.len() {
            let moved: Vec<StateVector> = flat[l - 1]
                .iter()
                .map(|(_, q)| apply(&segments[l], q))
                .collect::<Result<_>>()?;
            let prev = moved.len();
            let mut t = vec![ZERO; flat[l].len() * prev];
            for (m, (_, target)) in flat[l].iter().enumerate() {
                for (n, src) in moved.iter().enumerate() {
                    t[m * prev + n] = inner(target, src)?;
                }
            }
            transfer.push(t);
        }

        Ok(Self {
            nodes: flat
                .into_iter()
                .map(|slot| slot.into_iter().map(|(n, _)| n).collect())
                .collect(),
            start,
            transfer,
            prune: protocol.tolerances.prune,
        })
    }

    fn slots(&self) -> usize {
        self.nodes.len()
    }

    /// All paths whose branch at slot `l` is allowed by `filter[l]`
    /// (`None` allows every branch), in depth-first lexicographic order.
    fn enumerate(&self, filter: &[Option<usize>], exec: Execution) -> Vec<VirtualPath> {
        let firsts: Vec<usize> = (0..self.nodes[0].len())
            .filter(|&n| allowed(filter, 0, self.nodes[0][n].branch))
            .collect();
        let chunks = map_ordered(exec, &firsts, |&n| {
            let mut out = Vec::new();
            let amp = self.start[n];
            if amp.norm() > self.prune {
                let mut prefix = vec![n];
                self.descend(&mut prefix, amp, filter, &mut out);
            }
            out
        });
        chunks.into_iter().flatten().collect()
    }

    fn descend(&self, prefix: &mut Vec<usize>, amp: C64, filter: &[Option<usize>], out: &mut Vec<VirtualPath>) {
        let depth = prefix.len();
        if depth == self.slots() {
            out.push(VirtualPath {
                nodes: prefix
                    .iter()
                    .enumerate()
                    .map(|(slot, &i)| self.nodes[slot][i])
                    .collect(),
                amplitude: amp,
            });
            return;
        }
        let t = &self.transfer[depth - 1];
        let prev = self.nodes[depth - 1].len();
        let last = *prefix.last().expect("non-empty prefix");
        for (m, node) in self.nodes[depth].iter().enumerate() {
            if !allowed(filter, depth, node.branch) {
                continue;
            }
            let element = t[m * prev + last];
            if element == ZERO {
                continue;
            }
            let next = amp * element;
            if next.norm() <= self.prune {
                continue;
            }
            prefix.push(m);
            self.descend(prefix, next, filter, out);
            prefix.pop();
        }
    }

    fn final_rank(&self, branch: usize) -> usize {
        self.nodes[self.slots() - 1]
            .iter()
            .filter(|n| n.branch == branch)
            .count()
    }
}

fn allowed(filter: &[Option<usize>], slot: usize, branch: usize) -> bool {
    filter.get(slot).copied().flatten().map_or(true, |b| b == branch)
}

/// Group path amplitudes by branch sequence; amplitudes for the same final
/// basis vector are added in path order.
fn group(space: &PathSpace, paths: &[VirtualPath]) -> BTreeMap<Vec<usize>, Vec<C64>> {
    let mut groups: BTreeMap<Vec<usize>, Vec<C64>> = BTreeMap::new();
    for p in paths {
        let last = *p.nodes.last().expect("at least one slot");
        let amps = groups
            .entry(p.branches())
            .or_insert_with(|| vec![ZERO; space.final_rank(last.branch)]);
        amps[last.basis] += p.amplitude;
    }
    groups
}

fn squared_sum(amps: &[C64]) -> f64 {
    amps.iter().map(|a| a.norm_sqr()).sum()
}

pub fn enumerate_virtual_paths(protocol: &Protocol) -> Result<Vec<VirtualPath>> {
    enumerate_virtual_paths_with(protocol, Execution::default())
}

pub fn enumerate_virtual_paths_with(protocol: &Protocol, exec: Execution) -> Result<Vec<VirtualPath>> {
    let space = PathSpace::build(protocol)?;
    Ok(space.enumerate(&[], exec))
}

/// Coherent amplitudes of a real path, one per basis vector of the final
/// branch.
pub fn real_path_amplitude(protocol: &Protocol, outcome: &OutcomeSequence) -> Result<Vec<C64>> {
    let space = PathSpace::build(protocol)?;
    check_sequence(protocol, outcome)?;
    let filter: Vec<Option<usize>> = outcome.outcomes.iter().map(|o| Some(o.branch)).collect();
    let paths = space.enumerate(&filter, Execution::default());
    let final_branch = outcome.outcomes.last().expect("checked non-empty").branch;
    let mut amps = vec![ZERO; space.final_rank(final_branch)];
    for p in &paths {
        amps[p.nodes.last().expect("non-empty").basis] += p.amplitude;
    }
    Ok(amps)
}

fn check_sequence(protocol: &Protocol, outcome: &OutcomeSequence) -> Result<()> {
    let events = protocol.registered_events();
    if outcome.len() != events.len() {
        return Err(Error::OutcomeLength {
            expected: events.len(),
            actual: outcome.len(),
        });
    }
    for (o, m) in outcome.outcomes.iter().zip(&events) {
        if o.observer != m.observer || o.branch >= m.observable.branches().len() {
            return Err(Error::UnknownOutcome(o.to_string()));
        }
    }
    Ok(())
}

pub fn sequence_probability(protocol: &Protocol, outcome: &OutcomeSequence) -> Result<f64> {
    Ok(squared_sum(&real_path_amplitude(protocol, outcome)?))
}

pub fn full_distribution(protocol: &Protocol) -> Result<Vec<RealPathRecord>> {
    full_distribution_with(protocol, Execution::default())
}

pub fn full_distribution_with(protocol: &Protocol, exec: Execution) -> Result<Vec<RealPathRecord>> {
    let space = PathSpace::build(protocol)?;
    let paths = space.enumerate(&[], exec);
    let report = protocol.tolerances.report;
    group(&space, &paths)
        .into_iter()
        .filter_map(|(key, amps)| {
            let probability = squared_sum(&amps);
            (probability > report).then(|| {
                protocol.outcome_sequence(&key).map(|outcome| RealPathRecord {
                    outcome,
                    coherent_amplitudes: amps,
                    probability,
                })
            })
        })
        .collect()
}

/// The path-sum distribution as plain probabilities.
pub fn distribution(protocol: &Protocol) -> Result<Distribution> {
    distribution_with(protocol, Execution::default())
}

pub fn distribution_with(protocol: &Protocol, exec: Execution) -> Result<Distribution> {
    Ok(to_distribution(full_distribution_with(protocol, exec)?))
}

pub fn to_distribution(records: Vec<RealPathRecord>) -> Distribution {
    Distribution {
        entries: records.into_iter().map(|r| (r.outcome, r.probability)).collect(),
    }
}

/// Classical marginal over the registered slots in `keep`.
pub fn marginal(distribution: &Distribution, keep: &[usize]) -> Result<Distribution> {
    distribution.marginal(keep)
}

/// Path amplitude for an explicit chain of node states, one per registered event:
/// `⟨n_L|U|n_{L−1}⟩ ⋯ ⟨n_1|U₀|ψ₀⟩`.
pub fn chain_amplitude(protocol: &Protocol, nodes: &[StateVector]) -> Result<C64> {
    protocol.ensure_valid()?;
    let segments = segment_unitaries(protocol);
    if nodes.len() != segments.len() {
        return Err(Error::OutcomeLength {
            expected: segments.len(),
            actual: nodes.len(),
        });
    }
    let mut amp = inner(&nodes[0], &apply(&segments[0], &protocol.initial)?)?;
    for l in 1..nodes.len() {
        amp *= inner(&nodes[l], &apply(&segments[l], &nodes[l - 1])?)?;
    }
    Ok(amp)
}

/// Coherent vs incoherent accounting for one outcome of the last registered
/// event: the protocol as given against the same protocol with every
/// intermediate registered event demoted.
pub fn interference_report(protocol: &Protocol, final_outcome: &Outcome) -> Result<InterferenceReport> {
    let space = PathSpace::build(protocol)?;
    let slots = space.slots();
    let last_event = *protocol.registered_events().last().expect("validated");
    if final_outcome.observer != last_event.observer
        || final_outcome.branch >= last_event.observable.branches().len()
    {
        return Err(Error::UnknownOutcome(final_outcome.to_string()));
    }
    let mut filter = vec![None; slots];
    filter[slots - 1] = Some(final_outcome.branch);
    let paths = space.enumerate(&filter, Execution::default());
    let groups = group(&space, &paths);

    let rank = space.final_rank(final_outcome.branch);
    let incoherent_sum: f64 = groups.values().map(|a| squared_sum(a)).sum();
    let mut pairwise_term = 0.0;
    let amps: Vec<&Vec<C64>> = groups.values().collect();
    for n in 0..rank {
        for k in 0..amps.len() {
            for j in (k + 1)..amps.len() {
                pairwise_term += 2.0 * (amps[k][n].conj() * amps[j][n]).re;
            }
        }
    }

    let demoted = protocol.with_intermediates_demoted();
    let coherent_sum = if slots == 1 {
        incoherent_sum
    } else {
        let seq = demoted.outcome_sequence(&[final_outcome.branch])?;
        sequence_probability(&demoted, &seq)?
    };

    let real_paths = groups
        .into_iter()
        .map(|(key, a)| protocol.outcome_sequence(&key).map(|s| (s, a)))
        .collect::<Result<Vec<_>>>()?;

    Ok(InterferenceReport {
        final_outcome: final_outcome.clone(),
        paths,
        real_paths,
        incoherent_sum,
        coherent_sum,
        interference_term: coherent_sum - incoherent_sum,
        pairwise_term,
    })
}

/// Where a certainty claim comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum CertaintyReference {
    /// The initial state, `{1: |ψ₀⟩⟨ψ₀|, 0: I − |ψ₀⟩⟨ψ₀|}`.
    Preparation,
    /// The registered event at this index of [`Protocol::events`].
    Event(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForcedOutcome {
    /// Outcome of the reference event this row is conditioned on (`None` for
    /// the preparation).
    pub given: Option<Outcome>,
    pub forced: Outcome,
    /// Conditional probability of `forced` given `given`.
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CertaintyClaim {
    pub reference: CertaintyReference,
    pub forced: Vec<ForcedOutcome>,
}

/// Detect a final observable equal (entrywise within `1e-10` on `Σ eig·P`) to
/// the Heisenberg-evolved reference observable, `U Q U†`. The reference is the
/// registered event just before the final one or, when the final event is the
/// only registered one, the preparation. Returns the outcomes forced by that
/// match together with their computed probabilities.
pub fn certainty_check(protocol: &Protocol) -> Result<Option<CertaintyClaim>> {
    protocol.ensure_valid()?;
    let reg = protocol.registered_indices();
    let final_idx = *reg.last().expect("validated");
    let final_event = protocol.events[final_idx].as_measurement().expect("registered measurement");
    let final_op = final_event.observable.operator();

    if reg.len() == 1 {
        let u = protocol.evolution(0..final_idx);
        let prep = OperatorMatrix::projector(&protocol.initial);
        let evolved = Protocol::conjugate(&u, &prep)?;
        if evolved.max_abs_diff(&final_op) > 1e-10 {
            return Ok(None);
        }
        let Some(branch) = final_event.observable.branches().iter().position(|b| b.eigenvalue == 1.0) else {
            return Ok(None);
        };
        let dist = distribution(protocol)?;
        let forced = protocol.outcome_sequence(&[branch])?.outcomes.remove(0);
        return Ok(Some(CertaintyClaim {
            reference: CertaintyReference::Preparation,
            forced: vec![ForcedOutcome {
                given: None,
                probability: dist.probability(&[branch]),
                forced,
            }],
        }));
    }

    let ref_idx = reg[reg.len() - 2];
    let reference = protocol.events[ref_idx].as_measurement().expect("registered measurement");
    let u = protocol.evolution(ref_idx + 1..final_idx);
    let evolved = Protocol::conjugate(&u, &reference.observable.operator())?;
    if evolved.max_abs_diff(&final_op) > 1e-10 {
        return Ok(None);
    }
    let slots = reg.len();
    let joint = distribution(protocol)?.marginal(&[slots - 2, slots - 1])?;
    let mut forced = Vec::new();
    for (rb, rbranch) in reference.observable.branches().iter().enumerate() {
        let Some(fb) = final_event
            .observable
            .branches()
            .iter()
            .position(|b| b.eigenvalue == rbranch.eigenvalue)
        else {
            return Ok(None);
        };
        let given_mass: f64 = joint
            .entries
            .iter()
            .filter(|(s, _)| s.outcomes[0].branch == rb)
            .map(|(_, p)| p)
            .sum();
        if given_mass <= 0.0 {
            continue;
        }
        let pair = joint.probability(&[rb, fb]);
        let given = crate::protocol::outcome_of(reference, rb);
        let forced_outcome = crate::protocol::outcome_of(final_event, fb);
        forced.push(ForcedOutcome {
            given: Some(given),
            forced: forced_outcome,
            probability: pair / given_mass,
        });
    }
    Ok(Some(CertaintyClaim {
        reference: CertaintyReference::Event(ref_idx),
        forced,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::SpaceLayout;
    use crate::protocol::{projector_observable, ObservableDecomposition};
    use approx::assert_abs_diff_eq;

    fn zero_qubit() -> Protocol {
        let l = SpaceLayout::qubits(&["q"]).unwrap();
        Protocol::new(StateVector::basis(&l, 0).unwrap())
    }

    #[test]
    fn single_event_identity_evolution() {
        let mut p = zero_qubit();
        let obs = projector_observable("q", &StateVector::real("q", &[1.0, 0.0]).unwrap()).unwrap();
        p.add_measurement(1.0, "A", &obs, &["q"], true).unwrap();
        let paths = enumerate_virtual_paths(&p).unwrap();
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].amplitude, C64::new(1.0, 0.0));
    }

    #[test]
    fn identity_observable_single_record() {
        let mut p = zero_qubit();
        let l = p.layout.clone();
        p.add_full_measurement(1.0, "A", &ObservableDecomposition::identity("I", &l), true)
            .unwrap();
        let d = full_distribution(&p).unwrap();
        assert_eq!(d.len(), 1);
        assert_abs_diff_eq!(d[0].probability, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn orthogonal_preparation_gives_zero_amplitudes() {
        let mut p = zero_qubit();
        let obs = projector_observable("q", &StateVector::real("q", &[0.0, 1.0]).unwrap()).unwrap();
        p.add_measurement(1.0, "A", &obs, &["q"], true).unwrap();
        let yes = p.parse_sequence(&["yes^A"]).unwrap();
        let amps = real_path_amplitude(&p, &yes).unwrap();
        assert!(amps.iter().all(|a| *a == ZERO));
        assert_eq!(sequence_probability(&p, &yes).unwrap(), 0.0);
    }

    #[test]
    fn no_registered_events_is_an_error() {
        let mut p = zero_qubit();
        let obs = projector_observable("q", &StateVector::real("q", &[0.0, 1.0]).unwrap()).unwrap();
        p.add_measurement(1.0, "A", &obs, &["q"], false).unwrap();
        assert!(matches!(enumerate_virtual_paths(&p), Err(Error::NoRegisteredEvents)));
    }

    #[test]
    fn single_event_has_no_interference() {
        let mut p = zero_qubit();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let obs = projector_observable("q", &StateVector::real("q", &[h, h]).unwrap()).unwrap();
        p.add_measurement(1.0, "A", &obs, &["q"], true).unwrap();
        let r = interference_report(&p, &p.resolve_final("yes").unwrap()).unwrap();
        assert_eq!(r.interference_term, 0.0);
        assert_abs_diff_eq!(r.coherent_sum, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn repeated_measurement_is_certain() {
        let mut p = zero_qubit();
        let obs = projector_observable("q", &StateVector::real("q", &[1.0, 0.0]).unwrap()).unwrap();
        p.add_measurement(1.0, "A", &obs, &["q"], true).unwrap();
        let claim = certainty_check(&p).unwrap().expect("claim");
        assert_eq!(claim.reference, CertaintyReference::Preparation);
        assert_eq!(claim.forced[0].forced.label, "yes");
        assert_abs_diff_eq!(claim.forced[0].probability, 1.0, epsilon = 1e-15);

        let mut two = p.clone();
        two.add_measurement(2.0, "B", &obs, &["q"], true).unwrap();
        let claim = certainty_check(&two).unwrap().expect("claim");
        assert_eq!(claim.reference, CertaintyReference::Event(0));
        assert!(claim.forced.iter().all(|f| (f.probability - 1.0).abs() < 1e-12));
    }

    #[test]
    fn generic_final_observable_has_no_claim() {
        let mut p = zero_qubit();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let obs = projector_observable("q", &StateVector::real("q", &[h, h]).unwrap()).unwrap();
        p.add_measurement(1.0, "A", &obs, &["q"], true).unwrap();
        assert!(certainty_check(&p).unwrap().is_none());
    }

    #[test]
    fn chain_amplitude_matches_enumeration() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let l = SpaceLayout::qubits(&["q"]).unwrap();
        let mut p = Protocol::new(StateVector::real("q", &[h, h]).unwrap().with_layout(&l).unwrap());
        let z = projector_observable("q", &StateVector::real("q", &[0.0, 1.0]).unwrap()).unwrap();
        let x = projector_observable("q", &StateVector::real("q", &[h, h]).unwrap()).unwrap();
        p.add_measurement(1.0, "A", &z, &["q"], true).unwrap();
        p.add_measurement(2.0, "B", &x, &["q"], true).unwrap();
        for path in enumerate_virtual_paths(&p).unwrap() {
            let nodes: Vec<StateVector> = path
                .nodes
                .iter()
                .zip(p.registered_events())
                .map(|(n, m)| m.observable.branches()[n.branch].basis[n.basis].clone())
                .collect();
            let direct = chain_amplitude(&p, &nodes).unwrap();
            assert!((direct - path.amplitude).norm() < 1e-12);
        }
    }
}
