//! Seeded random states, unitaries, observables and protocols for property
//! tests, oracle cross-checks and benchmarks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::hilbert::{OperatorMatrix, SpaceLayout, StateVector, C64};
use crate::protocol::{ObservableDecomposition, Protocol};

pub type ProtocolRng = ChaCha8Rng;

pub fn rng(seed: u64) -> ProtocolRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(rng: &mut impl Rng) -> C64 {
    C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
}

pub fn random_state(layout: &SpaceLayout, rng: &mut impl Rng) -> StateVector {
    loop {
        let entries = (0..layout.total_dim()).map(|_| gaussian(rng)).collect();
        let s = StateVector::new(layout.clone(), entries).expect("dimension matches");
        if s.norm() > 1e-6 {
            return s.normalized().expect("non-zero");
        }
    }
}

/// Orthonormal basis from Gram-Schmidt on Gaussian vectors (Haar measure).
pub fn random_basis(layout: &SpaceLayout, rng: &mut impl Rng) -> Vec<StateVector> {
    let d = layout.total_dim();
    let mut basis: Vec<Vec<C64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<C64> = (0..d).map(|_| gaussian(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let c: C64 = b.iter().zip(&v).map(|(x, y)| x.conj() * y).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= c * bi;
                }
            }
        }
        let n = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
        .into_iter()
        .map(|e| StateVector::new(layout.clone(), e).expect("dimension matches"))
        .collect()
}

/// Unitary whose columns are a random orthonormal basis.
pub fn random_unitary(layout: &SpaceLayout, rng: &mut impl Rng) -> OperatorMatrix {
    let cols = random_basis(layout, rng);
    OperatorMatrix::from_fn(layout, |r, c| cols[c].entries()[r])
}

/// Random basis split into 2..=d branches of random rank, with distinct
/// integer eigenvalues.
pub fn random_observable(label: &str, layout: &SpaceLayout, rng: &mut impl Rng) -> ObservableDecomposition {
    let mut basis = random_basis(layout, rng);
    let d = basis.len();
    let k = rng.gen_range(2..=d);
    // each branch gets one vector, the rest are scattered
    let mut owner: Vec<usize> = (0..k).collect();
    owner.extend((k..d).map(|_| rng.gen_range(0..k)));
    owner.shuffle(rng);
    let mut eigenvalues: Vec<i32> = (-(k as i32)..=(k as i32)).collect();
    eigenvalues.shuffle(rng);
    let mut branches: Vec<(f64, Vec<StateVector>)> =
        eigenvalues[..k].iter().map(|&e| (f64::from(e), Vec::new())).collect();
    for (v, o) in basis.drain(..).zip(owner) {
        branches[o].1.push(v);
    }
    ObservableDecomposition::from_bases(label, branches).expect("orthonormal branches")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProtocolShape {
    pub max_total_dim: usize,
    pub max_registered: usize,
    /// Chance that an extra unregistered measurement precedes a registered one.
    pub unregistered_percent: u32,
}

impl Default for ProtocolShape {
    fn default() -> Self {
        Self {
            max_total_dim: 16,
            max_registered: 4,
            unregistered_percent: 25,
        }
    }
}

const SHAPES: &[&[usize]] = &[
    &[2],
    &[3],
    &[4],
    &[2, 2],
    &[2, 3],
    &[3, 2],
    &[2, 4],
    &[3, 3],
    &[2, 2, 2],
    &[4, 4],
    &[2, 2, 3],
    &[2, 2, 2, 2],
];

pub fn random_layout(max_total_dim: usize, rng: &mut impl Rng) -> SpaceLayout {
    let fitting: Vec<&&[usize]> = SHAPES
        .iter()
        .filter(|s| s.iter().product::<usize>() <= max_total_dim)
        .collect();
    let dims = fitting.choose(rng).copied().copied().unwrap_or(&[2]);
    SpaceLayout::new(dims.iter().enumerate().map(|(i, &d)| (format!("q{i}"), d))).expect("valid shape")
}

fn random_targets(layout: &SpaceLayout, rng: &mut impl Rng) -> Vec<String> {
    let mut names: Vec<String> = layout.names().map(str::to_string).collect();
    names.shuffle(rng);
    let k = rng.gen_range(1..=names.len());
    names.truncate(k);
    names
}

fn random_measurement(p: &mut Protocol, time: f64, observer: &str, registered: bool, rng: &mut impl Rng) -> Result<()> {
    let targets = random_targets(&p.layout, rng);
    let local = p.layout.sub_layout(&targets)?;
    let obs = random_observable(&format!("O{time}"), &local, rng);
    p.add_measurement(time, observer, &obs, &targets, registered)?;
    Ok(())
}

/// Random valid protocol: product-or-entangled preparation, then per
/// registered event up to two random couplings and possibly an unregistered
/// measurement.
pub fn random_protocol(shape: ProtocolShape, rng: &mut impl Rng) -> Result<Protocol> {
    let layout = random_layout(shape.max_total_dim, rng);
    let initial = random_state(&layout, rng);
    let mut p = Protocol::new(initial);
    let n_reg = rng.gen_range(1..=shape.max_registered.max(1));
    let mut t = 0.0;
    for k in 0..n_reg {
        for _ in 0..rng.gen_range(0..=2) {
            t += 1.0;
            let targets = random_targets(&p.layout, rng);
            let local = p.layout.sub_layout(&targets)?;
            let u = random_unitary(&local, rng);
            p.add_coupling(t, &u, &targets)?;
        }
        if rng.gen_range(0..100) < shape.unregistered_percent {
            t += 1.0;
            random_measurement(&mut p, t, "X", false, rng)?;
        }
        t += 1.0;
        random_measurement(&mut p, t, &format!("O{k}"), true, rng)?;
    }
    Ok(p)
}

/// Random orthonormal qubit pair.
pub fn random_qubit_pair(rng: &mut impl Rng) -> [StateVector; 2] {
    let l = SpaceLayout::qubits(&["q"]).expect("valid");
    let mut b = random_basis(&l, rng);
    let second = b.pop().expect("two vectors");
    [b.pop().expect("two vectors"), second]
}

pub fn random_qubit_state(rng: &mut impl Rng) -> StateVector {
    random_state(&SpaceLayout::qubits(&["q"]).expect("valid"), rng)
}
