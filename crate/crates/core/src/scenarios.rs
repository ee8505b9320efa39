//! Wigner-Friend protocols on a spin, F's probe and W's probe, with optional
//! record chains copied from F's probe.
//!
//! Layout: `(W, F, S, R1, …, RK)`, all qubits, prepared in `|0⟩|0⟩|s₀⟩|0…0⟩`.
//! Event times:
//!
//! | time          | event                                             |
//! |---------------|---------------------------------------------------|
//! | 1             | F couples its probe to the spin                   |
//! | (1, 2)        | record copies `Rk ← F`                            |
//! | 2             | F looks at its probe (registered or not)          |
//! | (2, 3)        | W uncomputes the erased records                   |
//! | 3             | W couples its probe (spin, F's probe, or F+spin)  |
//! | 4             | W looks at its probe                              |

use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};
use crate::hilbert::{ensure_orthonormal, inner, kron_states, orthonormal_completion, SpaceLayout, StateVector, Unitary, C64};
use crate::path_engine::{chain_amplitude, distribution, interference_report};
use crate::protocol::{
    composite_basis_coupling, controlled_flip_coupling, projector_observable, CouplingEvent, Event,
    ObservableDecomposition, Protocol,
};

pub const W_PROBE: &str = "W";
pub const F_PROBE: &str = "F";
pub const SPIN: &str = "S";

pub const TAU_F: f64 = 1.0;
pub const T_F: f64 = 2.0;
pub const TAU_W: f64 = 3.0;
pub const T_W: f64 = 4.0;

/// Tolerance for the registering-invariance assertion in the spin and probe
/// cases.
pub const INVARIANCE_TOL: f64 = 1e-12;
/// Tolerance for the surviving-record assertion.
pub const RECORD_TOL: f64 = 1e-10;

pub fn record_name(k: usize) -> String {
    format!("R{k}")
}

fn qubit(amplitudes: [C64; 2]) -> StateVector {
    StateVector::on("q", amplitudes.to_vec()).expect("two entries")
}

pub fn ket0() -> StateVector {
    qubit([C64::new(1.0, 0.0), C64::new(0.0, 0.0)])
}

pub fn ket1() -> StateVector {
    qubit([C64::new(0.0, 0.0), C64::new(1.0, 0.0)])
}

pub fn ket_plus() -> StateVector {
    qubit([C64::new(FRAC_1_SQRT_2, 0.0), C64::new(FRAC_1_SQRT_2, 0.0)])
}

pub fn ket_minus() -> StateVector {
    qubit([C64::new(FRAC_1_SQRT_2, 0.0), C64::new(-FRAC_1_SQRT_2, 0.0)])
}

/// What W's probe is coupled to, with the basis used.
#[derive(Clone, Debug, PartialEq)]
pub enum WMode {
    /// `|sᵢ^W⟩`, a spin basis.
    Spin([StateVector; 2]),
    /// `|φᵢ^F⟩ = u_{i1}|1^F⟩ + u_{i0}|0^F⟩`, a basis of F's probe (entries
    /// `[u_{i0}, u_{i1}]`).
    Probe([StateVector; 2]),
    /// `|1^{FS}⟩, |2^{FS}⟩` on `(F, S)`; W's probe flips on `|1^{FS}⟩` only.
    Composite([StateVector; 2]),
}

impl WMode {
    pub fn name(&self) -> &'static str {
        match self {
            WMode::Spin(_) => "spin",
            WMode::Probe(_) => "probe",
            WMode::Composite(_) => "composite",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WignerFriendConfig {
    pub spin_init: StateVector,
    /// `(|s₁^F⟩, |s₂^F⟩)`.
    pub f_basis: [StateVector; 2],
    pub w_mode: WMode,
    pub f_registered: bool,
    /// Number of record qubits copied from F's probe.
    pub chain_length: usize,
    /// 1-based record indices W uncomputes before coupling.
    pub erasure: Vec<usize>,
}

/// `|1^{FS}⟩, |2^{FS}⟩ = (|1^F s₁⟩ ± |0^F s₂⟩)/√2`.
pub fn composite_pair(f_basis: &[StateVector; 2]) -> Result<[StateVector; 2]> {
    let one = kron_states(&ket1().with_layout(&SpaceLayout::qubits(&[F_PROBE])?)?, &f_basis[0].with_layout(&SpaceLayout::qubits(&[SPIN])?)?)?;
    let two = kron_states(&ket0().with_layout(&SpaceLayout::qubits(&[F_PROBE])?)?, &f_basis[1].with_layout(&SpaceLayout::qubits(&[SPIN])?)?)?;
    let h = C64::new(FRAC_1_SQRT_2, 0.0);
    Ok([
        one.add_scaled(C64::new(1.0, 0.0), &two)?.scaled(h),
        one.add_scaled(C64::new(-1.0, 0.0), &two)?.scaled(h),
    ])
}

impl WignerFriendConfig {
    /// `s₀ = |+⟩`, F measures along z, W along x.
    pub fn canonical_c() -> Self {
        Self {
            spin_init: ket_plus(),
            f_basis: [ket0(), ket1()],
            w_mode: WMode::Spin([ket_plus(), ket_minus()]),
            f_registered: true,
            chain_length: 0,
            erasure: Vec::new(),
        }
    }

    /// As case C, but W reads F's probe in its computational basis
    /// (`φ₁ = |1^F⟩`, `φ₂ = |0^F⟩`).
    pub fn canonical_d() -> Self {
        Self {
            w_mode: WMode::Probe([ket1(), ket0()]),
            ..Self::canonical_c()
        }
    }

    /// `s₀ = (|s₁^F⟩ + |s₂^F⟩)/√2` with W engaging F's probe and the spin in
    /// the `(|1^F s₁⟩ ± |0^F s₂⟩)/√2` basis.
    pub fn canonical_f() -> Self {
        let f_basis = [ket0(), ket1()];
        let pair = composite_pair(&f_basis).expect("fixed qubit states");
        Self {
            spin_init: ket_plus(),
            w_mode: WMode::Composite(pair),
            f_basis,
            f_registered: true,
            chain_length: 0,
            erasure: Vec::new(),
        }
    }

    pub fn with_registered(mut self, registered: bool) -> Self {
        self.f_registered = registered;
        self
    }

    pub fn with_chain(mut self, k: usize, erasure: Vec<usize>) -> Self {
        self.chain_length = k;
        self.erasure = erasure;
        self
    }

    pub fn check(&self) -> Result<()> {
        let spin = SpaceLayout::qubits(&[SPIN])?;
        let s0 = self.spin_init.with_layout(&spin)?;
        s0.ensure_normalized(1e-10)?;
        let fb = [self.f_basis[0].with_layout(&spin)?, self.f_basis[1].with_layout(&spin)?];
        ensure_orthonormal(&fb, 1e-10)?;
        match &self.w_mode {
            WMode::Spin(pair) | WMode::Probe(pair) => {
                let l = SpaceLayout::qubits(&["x"])?;
                ensure_orthonormal(&[pair[0].with_layout(&l)?, pair[1].with_layout(&l)?], 1e-10)?;
            }
            WMode::Composite(pair) => {
                let l = SpaceLayout::qubits(&[F_PROBE, SPIN])?;
                ensure_orthonormal(&[pair[0].with_layout(&l)?, pair[1].with_layout(&l)?], 1e-10)?;
            }
        }
        if let Some(&bad) = self.erasure.iter().find(|&&k| k == 0 || k > self.chain_length) {
            return Err(Error::Config(format!(
                "erasure index {bad} outside 1..={}",
                self.chain_length
            )));
        }
        Ok(())
    }
}

/// A Wigner-Friend protocol, the config it was built from and the names of
/// its record qubits.
///
/// The branch bases of F's and W's observables are aligned with the case's
/// shorthand states, so path listings show the paths named in the cases.
#[derive(Clone, Debug, PartialEq)]
pub struct WignerFriendSetup {
    pub protocol: Protocol,
    pub config: WignerFriendConfig,
    pub records: Vec<String>,
}

impl WignerFriendSetup {
    fn event_at(&self, time: f64) -> Result<usize> {
        self.protocol
            .events
            .iter()
            .position(|e| e.time() == time)
            .ok_or_else(|| Error::ShapeMismatch(format!("no event at t = {time}")))
    }

    pub fn f_event(&self) -> Result<usize> {
        self.event_at(T_F)
    }

    pub fn w_coupling(&self) -> Result<usize> {
        self.event_at(TAU_W)
    }

    pub fn w_event(&self) -> Result<usize> {
        self.event_at(T_W)
    }

    pub fn with_f_registered(&self, registered: bool) -> Result<Self> {
        let mut out = self.clone();
        out.protocol = self.protocol.with_registered(self.f_event()?, registered)?;
        out.config.f_registered = registered;
        Ok(out)
    }

    /// Probability of W's `yes`, marginalized over F when F registers.
    pub fn p_yes_w(&self) -> Result<f64> {
        let dist = distribution(&self.protocol)?;
        let slots = self.protocol.registered_events().len();
        Ok(dist.marginal(&[slots - 1])?.probability(&[0]))
    }
}

fn mode_mismatch(expected: &str, config: &WignerFriendConfig) -> Error {
    Error::Config(format!(
        "builder expects W mode `{expected}`, config has `{}`",
        config.w_mode.name()
    ))
}

pub fn build_case_c(config: &WignerFriendConfig) -> Result<WignerFriendSetup> {
    if !matches!(config.w_mode, WMode::Spin(_)) {
        return Err(mode_mismatch("spin", config));
    }
    build(config)
}

pub fn build_case_d(config: &WignerFriendConfig) -> Result<WignerFriendSetup> {
    if !matches!(config.w_mode, WMode::Probe(_)) {
        return Err(mode_mismatch("probe", config));
    }
    build(config)
}

pub fn build_case_f(config: &WignerFriendConfig) -> Result<WignerFriendSetup> {
    if !matches!(config.w_mode, WMode::Composite(_)) {
        return Err(mode_mismatch("composite", config));
    }
    build(config)
}

/// Dispatch on the config's W mode.
pub fn build(config: &WignerFriendConfig) -> Result<WignerFriendSetup> {
    config.check()?;
    let layout = SpaceLayout::qubits(&[W_PROBE, F_PROBE, SPIN])?;
    let initial = product(
        &layout,
        &[(W_PROBE, ket0()), (F_PROBE, ket0()), (SPIN, config.spin_init.clone())],
    )?;
    let mut p = Protocol::new(initial);

    let f_coupling = controlled_flip_coupling(F_PROBE, SPIN, [&config.f_basis[0], &config.f_basis[1]])?;
    p.add_coupling(TAU_F, f_coupling.matrix(), &[F_PROBE, SPIN])?;
    let f_obs = projector_observable(F_PROBE, &ket1())?;
    p.add_measurement(T_F, "F", &f_obs, &[F_PROBE], config.f_registered)?;

    match &config.w_mode {
        WMode::Spin(pair) => {
            let u = controlled_flip_coupling(W_PROBE, SPIN, [&pair[0], &pair[1]])?;
            p.add_coupling(TAU_W, u.matrix(), &[W_PROBE, SPIN])?;
        }
        WMode::Probe(pair) => {
            let u = controlled_flip_coupling(W_PROBE, F_PROBE, [&pair[0], &pair[1]])?;
            p.add_coupling(TAU_W, u.matrix(), &[W_PROBE, F_PROBE])?;
        }
        WMode::Composite(pair) => {
            let fs = SpaceLayout::qubits(&[F_PROBE, SPIN])?;
            let first = pair[0].with_layout(&fs)?;
            let mut family = vec![first.clone(), pair[1].with_layout(&fs)?];
            family.extend(orthonormal_completion(&family, &fs)?);
            let u = composite_basis_coupling(W_PROBE, &[F_PROBE, SPIN], &first, &family[1..])?;
            p.add_coupling(TAU_W, u.matrix(), &[W_PROBE, F_PROBE, SPIN])?;
        }
    }
    let w_obs = projector_observable(W_PROBE, &ket1())?;
    p.add_measurement(T_W, "W", &w_obs, &[W_PROBE], true)?;

    let mut base = config.clone();
    base.chain_length = 0;
    base.erasure.clear();
    let setup = WignerFriendSetup {
        protocol: p,
        config: base,
        records: Vec::new(),
    };
    let setup = align(setup)?;
    let setup = extend_chain(&setup, config.chain_length)?;
    erase_records(&setup, &config.erasure)
}

/// `Rk ← F`: flips the record when F's probe reads `|1⟩`.
fn record_copy(record: &str) -> Result<Unitary> {
    controlled_flip_coupling(record, F_PROBE, [&ket1(), &ket0()])
}

fn insert_sorted(protocol: &mut Protocol, event: Event) {
    let at = protocol
        .events
        .iter()
        .position(|e| e.time() > event.time())
        .unwrap_or(protocol.events.len());
    protocol.events.insert(at, event);
}

/// Evenly spaced times strictly between the latest event in `[lo, hi)` (or
/// `lo`) and `hi`.
fn slot_times(protocol: &Protocol, lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let start = protocol
        .events
        .iter()
        .map(Event::time)
        .filter(|&t| t >= lo && t < hi)
        .fold(lo, f64::max);
    (1..=n)
        .map(|k| start + (hi - start) * k as f64 / (n + 1) as f64)
        .collect()
}

/// Append `k` record qubits, each copied from F's probe right after F's
/// coupling.
pub fn extend_chain(setup: &WignerFriendSetup, k: usize) -> Result<WignerFriendSetup> {
    if k == 0 {
        return Ok(setup.clone());
    }
    let first = setup.records.len() + 1;
    let names: Vec<String> = (first..first + k).map(record_name).collect();
    let mut layout = setup.protocol.layout.clone();
    let mut extra = Vec::with_capacity(k);
    for n in &names {
        let l = SpaceLayout::qubits(&[n.as_str()])?;
        layout = layout.concat(&l)?;
        extra.push(ket0().with_layout(&l)?);
    }
    let mut protocol = setup.protocol.relayout(&layout, &extra)?;
    let times = slot_times(&protocol, TAU_F, T_F, k);
    for (name, t) in names.iter().zip(times) {
        let u = record_copy(name)?;
        let ev = CouplingEvent::new(t, u.into_matrix(), &[name.as_str(), F_PROBE], &layout)?;
        insert_sorted(&mut protocol, Event::Coupling(ev));
    }
    let mut records = setup.records.clone();
    records.extend(names);
    let mut config = setup.config.clone();
    config.chain_length += k;
    align(WignerFriendSetup {
        protocol,
        config,
        records,
    })
}

/// Before W's coupling, uncompute the listed records (1-based).
pub fn erase_records(setup: &WignerFriendSetup, subset: &[usize]) -> Result<WignerFriendSetup> {
    if subset.is_empty() {
        return Ok(setup.clone());
    }
    for (i, &k) in subset.iter().enumerate() {
        if k == 0 || k > setup.records.len() {
            return Err(Error::Config(format!("unknown record index {k}")));
        }
        if subset[..i].contains(&k) || setup.config.erasure.contains(&k) {
            return Err(Error::Config(format!("record index {k} erased twice")));
        }
    }
    let mut protocol = setup.protocol.clone();
    let times = slot_times(&protocol, T_F, TAU_W, subset.len());
    for (&k, t) in subset.iter().zip(times) {
        let name = &setup.records[k - 1];
        let u = record_copy(name)?.inverse();
        let ev = CouplingEvent::new(t, u.into_matrix(), &[name.as_str(), F_PROBE], &protocol.layout)?;
        insert_sorted(&mut protocol, Event::Coupling(ev));
    }
    let mut config = setup.config.clone();
    config.erasure.extend_from_slice(subset);
    align(WignerFriendSetup {
        protocol,
        config,
        records: setup.records.clone(),
    })
}

/// Reorder the layout's subsystems. Global state and couplings are unchanged,
/// only the grouping of tensor factors differs.
pub fn regroup(setup: &WignerFriendSetup, order: &[&str]) -> Result<WignerFriendSetup> {
    let layout = setup.protocol.layout.permuted(order)?;
    align(WignerFriendSetup {
        protocol: setup.protocol.relayout(&layout, &[])?,
        config: setup.config.clone(),
        records: setup.records.clone(),
    })
}

/// Records that still hold F's outcome when W engages: copied from F's probe
/// an odd number of times before W's coupling, and not touched by it.
pub fn surviving_records(setup: &WignerFriendSetup) -> Result<Vec<String>> {
    let w_idx = setup.w_coupling()?;
    let w_targets = &setup.protocol.events[w_idx]
        .as_coupling()
        .expect("W's coupling")
        .targets;
    let mut out = Vec::new();
    for r in &setup.records {
        let copies = setup.protocol.events[..w_idx]
            .iter()
            .filter_map(Event::as_coupling)
            .filter(|c| c.time > TAU_F && c.targets.len() == 2 && &c.targets[0] == r && c.targets[1] == F_PROBE)
            .count();
        if copies % 2 == 1 && !w_targets.contains(r) {
            out.push(r.clone());
        }
    }
    Ok(out)
}

/// True when at least one record survives W's engagement. In that case W's
/// `yes` probability must equal its F-registering value; a mismatch beyond
/// [`RECORD_TOL`] is reported as an error.
pub fn surviving_record_check(setup: &WignerFriendSetup) -> Result<bool> {
    if surviving_records(setup)?.is_empty() {
        return Ok(false);
    }
    let reg = setup.with_f_registered(true)?.p_yes_w()?;
    let not_reg = setup.with_f_registered(false)?.p_yes_w()?;
    if (reg - not_reg).abs() > RECORD_TOL {
        return Err(Error::Consistency(format!(
            "a record survives but P(yes^W) differs: registering {reg}, not registering {not_reg}"
        )));
    }
    Ok(true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioReport {
    pub mode: &'static str,
    /// Path amplitudes `A₁…A₄` through the shorthand states of each case.
    pub amplitudes: [C64; 4],
    /// Joint `(W, F)` outcome probabilities with F registering.
    pub table: Vec<(String, f64)>,
    pub p_yes_registered: f64,
    pub p_yes_not_registered: f64,
    /// `p_yes_not_registered − p_yes_registered`.
    pub gap: f64,
    pub interference_term: f64,
    /// `2 Σ Re[aₖ* aⱼ]` over virtual-path amplitudes sharing a final basis
    /// state.
    pub pairwise_term: f64,
    pub record_survival: bool,
}

/// Run both settings of F's `registered` flag and compare W's statistics.
pub fn registering_gap(config: &WignerFriendConfig) -> Result<ScenarioReport> {
    let reg = build(&config.clone().with_registered(true))?;
    let not_reg = reg.with_f_registered(false)?;

    let dist = distribution(&reg.protocol)?;
    let table = dist
        .entries
        .iter()
        .map(|(seq, p)| {
            let labels: Vec<String> = seq.outcomes.iter().rev().map(ToString::to_string).collect();
            (format!("P({})", labels.join(", ")), *p)
        })
        .collect();
    let p_yes_registered = reg.p_yes_w()?;
    let p_yes_not_registered = not_reg.p_yes_w()?;
    let gap = p_yes_not_registered - p_yes_registered;

    let yes_w = reg.protocol.resolve_final("yes^W")?;
    let interference = interference_report(&reg.protocol, &yes_w)?;

    if !matches!(config.w_mode, WMode::Composite(_)) && gap.abs() > INVARIANCE_TOL {
        return Err(Error::Consistency(format!(
            "W's statistics depend on F registering in the {} case (gap {gap:e})",
            config.w_mode.name()
        )));
    }

    Ok(ScenarioReport {
        mode: config.w_mode.name(),
        amplitudes: shorthand_amplitudes(&reg)?,
        table,
        p_yes_registered,
        p_yes_not_registered,
        gap,
        interference_term: interference.interference_term,
        pairwise_term: interference.pairwise_term,
        record_survival: surviving_record_check(&reg)?,
    })
}

/// Full-layout product state from per-subsystem factors.
fn product(layout: &SpaceLayout, factors: &[(&str, StateVector)]) -> Result<StateVector> {
    let mut acc: Option<StateVector> = None;
    for (name, s) in factors {
        let s = s.with_layout(&SpaceLayout::new([(*name, s.dim())])?)?;
        acc = Some(match acc {
            None => s,
            Some(a) => kron_states(&a, &s)?,
        });
    }
    acc.expect("non-empty").permuted_to(layout)
}

/// The states each case's amplitudes are written in.
struct Shorthand {
    /// `|1⟩, |2⟩` at F's measurement.
    mid: [StateVector; 2],
    /// Final states at W's measurement.
    finals: [StateVector; 4],
    /// `(mid, final)` index pairs of `A₁…A₄`.
    routes: [(usize, usize); 4],
    /// Indices into `finals` in W's `yes` and `no` branches.
    yes: [usize; 2],
    no: [usize; 2],
}

/// Records hold F's reading at `t₁` and return to `|0⟩` once erased.
fn shorthand(setup: &WignerFriendSetup) -> Result<Shorthand> {
    let config = &setup.config;
    let layout = &setup.protocol.layout;
    let [s1, s2] = &config.f_basis;
    let state = |base: [(&str, StateVector); 3], f_bit: u8, at_end: bool| -> Result<StateVector> {
        let mut all: Vec<(&str, StateVector)> = base.to_vec();
        for (i, r) in setup.records.iter().enumerate() {
            let erased = at_end && config.erasure.contains(&(i + 1));
            all.push((r.as_str(), if f_bit == 1 && !erased { ket1() } else { ket0() }));
        }
        product(layout, &all)
    };
    let mid = [
        state([(W_PROBE, ket0()), (F_PROBE, ket1()), (SPIN, s1.clone())], 1, false)?,
        state([(W_PROBE, ket0()), (F_PROBE, ket0()), (SPIN, s2.clone())], 0, false)?,
    ];
    let spin_like = |w: &[StateVector; 2], on_spin: bool| -> Result<[StateVector; 4]> {
        // spin: |1^W 1^F sᵢ^W⟩ for i = 1, 2 from |1⟩ and with |0^F⟩ from |2⟩
        // probe: |1^W φᵢ sⱼ^F⟩ with j fixed by the intermediate state
        let mut out = Vec::with_capacity(4);
        for (f_bit, f_state, s_state) in [(1, ket1(), s1), (0, ket0(), s2)] {
            for (i, w_bit) in [(0, ket1()), (1, ket0())] {
                let base = if on_spin {
                    [(W_PROBE, w_bit), (F_PROBE, f_state.clone()), (SPIN, w[i].clone())]
                } else {
                    [(W_PROBE, w_bit), (F_PROBE, w[i].clone()), (SPIN, s_state.clone())]
                };
                out.push(state(base, f_bit, true)?);
            }
        }
        Ok(out.try_into().expect("four states"))
    };
    Ok(match &config.w_mode {
        WMode::Spin(w) => Shorthand {
            mid,
            finals: spin_like(w, true)?,
            routes: [(0, 0), (0, 1), (1, 2), (1, 3)],
            yes: [0, 2],
            no: [1, 3],
        },
        WMode::Probe(phi) => Shorthand {
            mid,
            finals: spin_like(phi, false)?,
            routes: [(0, 0), (0, 1), (1, 2), (1, 3)],
            yes: [0, 2],
            no: [1, 3],
        },
        WMode::Composite([fs1, fs2]) => {
            // |1′⟩ = |1^W⟩|1^{FS}⟩, |2′⟩ = |0^W⟩|2^{FS}⟩, each with the record
            // factor of the route it ends; A₁, A₂ end in |1′⟩, A₃, A₄ in |2′⟩
            let with_records = |w: StateVector, fs: &StateVector, f_bit: u8| -> Result<StateVector> {
                let mut acc = kron_states(
                    &w.with_layout(&SpaceLayout::qubits(&[W_PROBE])?)?,
                    &fs.with_layout(&SpaceLayout::qubits(&[F_PROBE, SPIN])?)?,
                )?;
                for (i, r) in setup.records.iter().enumerate() {
                    let erased = config.erasure.contains(&(i + 1));
                    let s = if f_bit == 1 && !erased { ket1() } else { ket0() };
                    acc = kron_states(&acc, &s.with_layout(&SpaceLayout::qubits(&[r.as_str()])?)?)?;
                }
                acc.permuted_to(layout)
            };
            Shorthand {
                mid,
                finals: [
                    with_records(ket1(), fs1, 1)?,
                    with_records(ket1(), fs1, 0)?,
                    with_records(ket0(), fs2, 1)?,
                    with_records(ket0(), fs2, 0)?,
                ],
                routes: [(0, 0), (1, 1), (0, 2), (1, 3)],
                yes: [0, 1],
                no: [2, 3],
            }
        }
    })
}

/// `A₁…A₄` through the case's shorthand states.
pub fn shorthand_amplitudes(setup: &WignerFriendSetup) -> Result<[C64; 4]> {
    let p = setup.with_f_registered(true)?.protocol;
    let sh = shorthand(setup)?;
    let mut out = [C64::new(0.0, 0.0); 4];
    for (a, &(m, f)) in out.iter_mut().zip(&sh.routes) {
        *a = chain_amplitude(&p, &[sh.mid[m].clone(), sh.finals[f].clone()])?;
    }
    Ok(out)
}

/// Basis of branch `branch` that starts with `preferred` (after
/// orthogonalization, dependent vectors dropped) and is completed from the
/// branch's current basis.
fn preferring(obs: &ObservableDecomposition, branch: usize, preferred: &[StateVector]) -> Result<ObservableDecomposition> {
    let current = &obs.branches()[branch].basis;
    let rank = current.len();
    let mut out: Vec<StateVector> = Vec::with_capacity(rank);
    for v in preferred.iter().chain(current) {
        let mut w = v.clone();
        for _ in 0..2 {
            for u in &out {
                w = w.add_scaled(-inner(u, &w)?, u)?;
            }
        }
        if w.norm() > 1e-8 {
            out.push(w.normalized()?);
        }
        if out.len() == rank {
            break;
        }
    }
    obs.with_branch_basis(branch, out)
}

fn align(mut setup: WignerFriendSetup) -> Result<WignerFriendSetup> {
    let sh = shorthand(&setup)?;
    let f_idx = setup.f_event()?;
    let w_idx = setup.w_event()?;
    let pick = |idx: [usize; 2]| [sh.finals[idx[0]].clone(), sh.finals[idx[1]].clone()];
    if let Event::Measurement(m) = &mut setup.protocol.events[f_idx] {
        let obs = preferring(&m.observable, 0, &sh.mid[..1])?;
        m.observable = preferring(&obs, 1, &sh.mid[1..])?;
    }
    if let Event::Measurement(m) = &mut setup.protocol.events[w_idx] {
        let obs = preferring(&m.observable, 0, &pick(sh.yes))?;
        m.observable = preferring(&obs, 1, &pick(sh.no))?;
    }
    Ok(setup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path_engine::enumerate_virtual_paths;
    use approx::assert_abs_diff_eq;

    #[test]
    fn case_c_has_four_paths() {
        let s = build_case_c(&WignerFriendConfig::canonical_c()).unwrap();
        assert_eq!(enumerate_virtual_paths(&s.protocol).unwrap().len(), 4);
    }

    #[test]
    fn case_f_has_four_paths() {
        let s = build_case_f(&WignerFriendConfig::canonical_f()).unwrap();
        let paths = enumerate_virtual_paths(&s.protocol).unwrap();
        assert_eq!(paths.len(), 4);
        let a = shorthand_amplitudes(&s).unwrap();
        for (x, want) in a.iter().zip([0.5, 0.5, 0.5, -0.5]) {
            assert_abs_diff_eq!(x.re, want, epsilon = 1e-14);
            assert_abs_diff_eq!(x.im, 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn builders_check_mode() {
        assert!(matches!(build_case_c(&WignerFriendConfig::canonical_f()), Err(Error::Config(_))));
        assert!(matches!(build_case_d(&WignerFriendConfig::canonical_c()), Err(Error::Config(_))));
        assert!(matches!(build_case_f(&WignerFriendConfig::canonical_d()), Err(Error::Config(_))));
    }

    #[test]
    fn eigenstate_preparation_zeroes_second_branch() {
        let cfg = WignerFriendConfig {
            spin_init: ket0(),
            ..WignerFriendConfig::canonical_c()
        };
        let s = build_case_c(&cfg).unwrap();
        let a = shorthand_amplitudes(&s).unwrap();
        assert_eq!(a[2].norm(), 0.0);
        assert_eq!(a[3].norm(), 0.0);
    }

    #[test]
    fn case_d_identity_u_is_certain() {
        let cfg = WignerFriendConfig {
            spin_init: ket0(),
            ..WignerFriendConfig::canonical_d()
        };
        let s = build_case_d(&cfg).unwrap();
        assert_abs_diff_eq!(s.p_yes_w().unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn chain_zero_is_identity() {
        let s = build_case_c(&WignerFriendConfig::canonical_c()).unwrap();
        assert_eq!(extend_chain(&s, 0).unwrap(), s);
        assert_eq!(erase_records(&s, &[]).unwrap(), s);
        assert!(erase_records(&s, &[1]).is_err());
        assert!(!surviving_record_check(&s).unwrap());
    }

    #[test]
    fn erasure_bounds_checked() {
        let cfg = WignerFriendConfig::canonical_f().with_chain(2, vec![3]);
        assert!(matches!(build(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn chain_events_stay_ordered() {
        let s = build(&WignerFriendConfig::canonical_f().with_chain(3, vec![1, 3])).unwrap();
        assert!(s.protocol.validate().is_empty());
        let times: Vec<f64> = s.protocol.events.iter().map(Event::time).collect();
        assert!(times.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(surviving_records(&s).unwrap(), vec!["R2".to_string()]);
        assert_eq!(s.config.chain_length, 3);
    }
}
