use pathwig::collapse_oracle::{branch_tree, evolve_collapse, evolve_collapse_with};
use pathwig::hilbert::{apply, inner, StateVector, C64};
use pathwig::path_engine::{distribution, distribution_with, enumerate_virtual_paths_with, full_distribution};
use pathwig::protocol::{Distribution, Event, ObservableDecomposition, Protocol};
use pathwig::random::{random_basis, random_protocol, rng, ProtocolShape};
use pathwig::{Execution, OperatorMatrix, SpaceLayout};
use proptest::prelude::*;

/// Probability of every outcome sequence by projecting the unnormalized state
/// through the registered events in turn: `‖P_L U ⋯ P_1 U ψ₀‖²`.
fn projection_oracle(p: &Protocol) -> Vec<(Vec<usize>, f64)> {
    let regs: Vec<usize> = p.registered_indices();
    let sizes: Vec<usize> = regs
        .iter()
        .map(|&i| p.events[i].as_measurement().unwrap().observable.branches().len())
        .collect();
    let mut out = Vec::new();
    let mut key = vec![0; regs.len()];
    loop {
        let mut psi = p.initial.clone();
        let mut slot = 0;
        for ev in &p.events {
            match ev {
                Event::Coupling(c) => psi = apply(&c.unitary, &psi).unwrap(),
                Event::Measurement(m) if m.registered => {
                    psi = apply(&m.observable.branches()[key[slot]].projector, &psi).unwrap();
                    slot += 1;
                }
                Event::Measurement(_) => {}
            }
        }
        out.push((key.clone(), psi.norm().powi(2)));
        // odometer
        let mut k = regs.len();
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            key[k] += 1;
            if key[k] < sizes[k] {
                break;
            }
            key[k] = 0;
        }
    }
}

fn shape() -> ProtocolShape {
    ProtocolShape::default()
}

fn replace_observable(p: &mut Protocol, idx: usize, f: impl Fn(&ObservableDecomposition) -> ObservableDecomposition) {
    if let Event::Measurement(m) = &mut p.events[idx] {
        m.observable = f(&m.observable);
        m.local = f(&m.local);
    }
}

/// Random unitary mix of a branch's basis vectors.
fn rebased(obs: &ObservableDecomposition, branch: usize, seed: u64) -> ObservableDecomposition {
    let basis = &obs.branches()[branch].basis;
    let k = basis.len();
    let mut r = rng(seed);
    let v = random_basis(&SpaceLayout::new([("k", k.max(2))]).unwrap(), &mut r);
    let new: Vec<StateVector> = (0..k)
        .map(|i| {
            basis.iter().enumerate().fold(StateVector::zeros(obs.layout()), |acc, (j, b)| {
                acc.add_scaled(v[i].entries()[j], b).unwrap()
            })
        })
        .collect();
    if k == 1 {
        // a phase is the only freedom
        let phase = C64::from_polar(1.0, 0.7);
        return obs.with_branch_basis(branch, vec![basis[0].scaled(phase)]).unwrap();
    }
    obs.with_branch_basis(branch, new).unwrap()
}

fn max_diff(a: &Distribution, b: &Distribution) -> f64 {
    a.max_abs_diff(b)
}

#[test]
fn path_sum_matches_projection_oracle() {
    let mut r = rng(2024);
    for _ in 0..100 {
        let p = random_protocol(shape(), &mut r).unwrap();
        let dist = distribution(&p).unwrap();
        for (key, want) in projection_oracle(&p) {
            let got = dist.probability(&key);
            assert!((got - want).abs() <= 1e-10, "key {key:?}: {got} vs {want}");
        }
    }
}

#[test]
fn execution_policies_agree_bitwise() {
    let mut r = rng(99);
    for _ in 0..40 {
        let p = random_protocol(shape(), &mut r).unwrap();
        let seq = distribution_with(&p, Execution::Sequential).unwrap();
        let par = distribution_with(&p, Execution::Parallel).unwrap();
        assert_eq!(seq, par);
        let a = enumerate_virtual_paths_with(&p, Execution::Sequential).unwrap();
        let b = enumerate_virtual_paths_with(&p, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            evolve_collapse_with(&p, Execution::Sequential).unwrap(),
            evolve_collapse_with(&p, Execution::Parallel).unwrap()
        );
    }
}

#[test]
fn unregistered_event_is_transparent() {
    let mut r = rng(5);
    let mut checked = 0;
    while checked < 20 {
        let p = random_protocol(shape(), &mut r).unwrap();
        let Some(&idx) = p
            .measurement_indices()
            .iter()
            .find(|&&i| !p.events[i].is_registered())
        else {
            continue;
        };
        let d1 = distribution(&p).unwrap();
        let d2 = distribution(&p.without_event(idx)).unwrap();
        assert_eq!(d1, d2);
        checked += 1;
    }
}

#[test]
fn collapse_tree_conserves_mass_and_purity() {
    let mut r = rng(17);
    for _ in 0..30 {
        let p = random_protocol(shape(), &mut r).unwrap();
        let tree = branch_tree(&p).unwrap();
        for m in tree.mass_by_depth() {
            assert!((m - 1.0).abs() <= 1e-10);
        }
        for (_, _, rho) in tree.leaves() {
            assert!((rho.purity() - 1.0).abs() <= 1e-9);
        }
    }
}

#[test]
fn records_carry_amplitudes_consistent_with_probabilities() {
    let mut r = rng(8);
    for _ in 0..20 {
        let p = random_protocol(shape(), &mut r).unwrap();
        for rec in full_distribution(&p).unwrap() {
            let s: f64 = rec.coherent_amplitudes.iter().map(|a| a.norm_sqr()).sum();
            assert!((s - rec.probability).abs() <= 1e-14);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn oracles_agree(seed in any::<u64>()) {
        let p = random_protocol(shape(), &mut rng(seed)).unwrap();
        let a = distribution(&p).unwrap();
        let b = evolve_collapse(&p).unwrap();
        prop_assert!(max_diff(&a, &b) <= 1e-9);
    }

    #[test]
    fn distributions_are_normalized(seed in any::<u64>()) {
        let p = random_protocol(shape(), &mut rng(seed)).unwrap();
        prop_assert!((distribution(&p).unwrap().total() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn dropping_the_last_event_marginalizes_it(seed in any::<u64>()) {
        let p = random_protocol(shape(), &mut rng(seed)).unwrap();
        let regs = p.registered_indices();
        prop_assume!(regs.len() >= 2);
        let full = distribution(&p).unwrap();
        let keep: Vec<usize> = (0..regs.len() - 1).collect();
        let marg = full.marginal(&keep).unwrap();
        let cut = distribution(&p.without_event(*regs.last().unwrap())).unwrap();
        prop_assert!(max_diff(&marg, &cut) <= 1e-12);
    }

    #[test]
    fn identity_event_changes_nothing(seed in any::<u64>(), at in 0usize..8) {
        let p = random_protocol(shape(), &mut rng(seed)).unwrap();
        let at = at % (p.events.len() + 1);
        let t = if at == 0 { p.events[0].time() - 0.5 } else { p.events[at - 1].time() + 0.5 };
        let mut q = p.clone();
        let id = ObservableDecomposition::identity("I", &p.layout);
        q.add_full_measurement(t, "id", &id, true).unwrap();
        let ev = q.events.pop().unwrap();
        q.events.insert(at, ev);
        let slot = q.registered_indices().iter().position(|&i| i == at).unwrap();
        let keep: Vec<usize> = (0..q.registered_indices().len()).filter(|&s| s != slot).collect();
        let with = distribution(&q).unwrap().marginal(&keep).unwrap();
        prop_assert!(max_diff(&with, &distribution(&p).unwrap()) <= 1e-12);
    }

    #[test]
    fn eigenstate_event_changes_nothing(seed in any::<u64>()) {
        let p = random_protocol(shape(), &mut rng(seed)).unwrap();
        let first = p.registered_indices()[0];
        let mut psi = p.initial.clone();
        for ev in &p.events[..first] {
            if let Event::Coupling(c) = ev {
                psi = apply(&c.unitary, &psi).unwrap();
            }
        }
        let proj = OperatorMatrix::projector(&psi);
        let rest = OperatorMatrix::identity(&p.layout).sub(&proj).unwrap();
        let full = ObservableDecomposition::from_projectors("eig", vec![(1.0, proj), (0.0, rest)]).unwrap();
        let t = p.events[first].time() - 0.5;
        let mut q = p.clone();
        q.add_full_measurement(t, "eig", &full, true).unwrap();
        let ev = q.events.pop().unwrap();
        q.events.insert(first, ev);
        let n = q.registered_indices().len();
        let dq = distribution(&q).unwrap();
        prop_assert!((dq.marginal(&[0]).unwrap().probability(&[0]) - 1.0).abs() <= 1e-12);
        let keep: Vec<usize> = (1..n).collect();
        prop_assert!(max_diff(&dq.marginal(&keep).unwrap(), &distribution(&p).unwrap()) <= 1e-12);
    }

    #[test]
    fn eigenvalue_relabeling_keeps_probabilities(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let p = random_protocol(shape(), &mut rng(seed)).unwrap();
        let mut q = p.clone();
        for i in q.measurement_indices() {
            replace_observable(&mut q, i, |o| o.relabel_eigenvalues(|e| 3.0 * e + shift.round()));
        }
        let a = distribution(&p).unwrap();
        let b = distribution(&q).unwrap();
        prop_assert_eq!(a.entries.len(), b.entries.len());
        for ((sa, pa), (sb, pb)) in a.entries.iter().zip(&b.entries) {
            prop_assert_eq!(sa.key(), sb.key());
            prop_assert_eq!(pa, pb);
        }
        for i in q.measurement_indices() {
            let (m0, m1) = (p.events[i].as_measurement().unwrap(), q.events[i].as_measurement().unwrap());
            for (b0, b1) in m0.observable.branches().iter().zip(m1.observable.branches()) {
                prop_assert_eq!(&b0.projector, &b1.projector);
            }
        }
    }

    #[test]
    fn branch_basis_choice_is_irrelevant(seed in any::<u64>(), which in any::<u64>()) {
        let p = random_protocol(shape(), &mut rng(seed)).unwrap();
        let mut q = p.clone();
        for (n, i) in q.registered_indices().into_iter().enumerate() {
            let branches = q.events[i].as_measurement().unwrap().observable.branches().len();
            for b in 0..branches {
                let s = which ^ ((n as u64) << 8) ^ b as u64;
                if let Event::Measurement(m) = &mut q.events[i] {
                    m.observable = rebased(&m.observable, b, s);
                }
            }
        }
        let a = distribution(&p).unwrap();
        let b = distribution(&q).unwrap();
        prop_assert!(max_diff(&a, &b) <= 1e-10);
    }
}

#[test]
fn rebased_bases_stay_orthonormal() {
    let mut r = rng(3);
    let p = random_protocol(shape(), &mut r).unwrap();
    let i = p.registered_indices()[0];
    let obs = &p.events[i].as_measurement().unwrap().observable;
    let q = rebased(obs, 0, 4);
    let b = &q.branches()[0].basis;
    for x in b {
        for y in b {
            let v = inner(x, y).unwrap();
            let want = if std::ptr::eq(x, y) { 1.0 } else { 0.0 };
            assert!((v - C64::new(want, 0.0)).norm() < 1e-12);
        }
    }
}

mod certainty {
    use super::*;
    use pathwig::path_engine::{certainty_check, CertaintyReference};
    use pathwig::random::{random_layout, random_observable, random_state, random_unitary};

    fn evolved_projector_observable(u: &OperatorMatrix, proj: &OperatorMatrix) -> ObservableDecomposition {
        let yes = Protocol::conjugate(u, proj).unwrap();
        let no = OperatorMatrix::identity(u.layout()).sub(&yes).unwrap();
        ObservableDecomposition::from_projectors("UQU†", vec![(1.0, yes), (0.0, no)]).unwrap()
    }

    #[test]
    fn evolved_preparation_is_certain() {
        let mut r = rng(808);
        for _ in 0..50 {
            let l = random_layout(16, &mut r);
            let psi = random_state(&l, &mut r);
            let u = random_unitary(&l, &mut r);
            let mut p = Protocol::new(psi.clone());
            let names: Vec<String> = l.names().map(str::to_string).collect();
            p.add_coupling(1.0, &u, &names).unwrap();
            let obs = evolved_projector_observable(&u, &OperatorMatrix::projector(&psi));
            p.add_full_measurement(2.0, "A", &obs, true).unwrap();
            let claim = certainty_check(&p).unwrap().expect("claim");
            assert_eq!(claim.reference, CertaintyReference::Preparation);
            assert!(claim.forced[0].probability >= 1.0 - 1e-10);
        }
    }

    #[test]
    fn evolved_previous_event_is_certain() {
        let mut r = rng(809);
        for _ in 0..20 {
            let l = random_layout(16, &mut r);
            let mut p = Protocol::new(random_state(&l, &mut r));
            let q = random_observable("Q", &l, &mut r);
            p.add_full_measurement(1.0, "A", &q, true).unwrap();
            let u = random_unitary(&l, &mut r);
            let names: Vec<String> = l.names().map(str::to_string).collect();
            p.add_coupling(2.0, &u, &names).unwrap();
            let branches = q
                .branches()
                .iter()
                .map(|b| (b.eigenvalue, Protocol::conjugate(&u, &b.projector).unwrap()))
                .collect();
            let evolved = ObservableDecomposition::from_projectors("UQU†", branches).unwrap();
            p.add_full_measurement(3.0, "B", &evolved, true).unwrap();
            let claim = certainty_check(&p).unwrap().expect("claim");
            assert_eq!(claim.reference, CertaintyReference::Event(0));
            for f in &claim.forced {
                assert!(f.probability >= 1.0 - 1e-10);
            }
        }
    }
}
