//! The JSON scenario document: parsing with path-anchored errors, conversion
//! to and from [`Protocol`], and canonical emission.

use serde::{Deserialize, Serialize};

use pathwig::hilbert::{OperatorMatrix, SpaceLayout, StateVector, C64};
use pathwig::protocol::{composite_basis_coupling, controlled_flip_coupling, CouplingEvent, MeasurementEvent};
use pathwig::{Event, ObservableDecomposition, Protocol};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// `[re, im]`.
pub type Cx = [f64; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDocument {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub subsystems: Vec<SubsystemSpec>,
    pub initial: InitialSpec,
    pub events: Vec<EventSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub queries: Vec<QuerySpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsystemSpec {
    pub name: String,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialSpec {
    Product(Vec<FactorSpec>),
    Vector(Vec<Cx>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub subsystem: String,
    pub amplitudes: Vec<Cx>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventSpec {
    Couple(CoupleSpec),
    Measure(MeasureSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupleSpec {
    pub time: f64,
    pub targets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<Cx>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSpec {
    /// `targets = [control, target]`, both qubits.
    Cnot {},
    /// `targets = [pointer, system]`; flips the pointer on `basis[0]`.
    ControlledFlip { basis: [Vec<Cx>; 2] },
    /// `targets = [pointer, t₁, …]`; flips the pointer on `distinguished`,
    /// identity on `completion`.
    CompositeFlip {
        distinguished: Vec<Cx>,
        completion: Vec<Vec<Cx>>,
    },
}

fn default_true() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureSpec {
    pub time: f64,
    pub observer: String,
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub registered: bool,
    /// Defaults to every subsystem in layout order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<String>>,
    pub observable: ObservableSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub branches: Vec<BranchSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub eigenvalue: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis_states: Option<Vec<Vec<Cx>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projector: Option<Vec<Vec<Cx>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySpec {
    Distribution {},
    Paths {
        #[serde(rename = "final")]
        final_outcome: String,
    },
    Interference {
        #[serde(rename = "final")]
        final_outcome: String,
    },
    CompareOracle {},
    WignerComparison {
        #[serde(rename = "final")]
        final_outcome: String,
    },
}

/// Parse `text`. Unknown fields are an error unless `lenient`, in which case
/// they are returned as warnings.
pub fn parse_scenario(text: &str, lenient: bool) -> Result<(ScenarioDocument, Vec<String>), CliError> {
    // syntax first, so malformed JSON never reports as a schema problem
    serde_json::from_str::<serde_json::Value>(text).map_err(|e| {
        CliError::Syntax(format!("line {}, column {}: {e}", e.line(), e.column()))
    })?;
    let mut unknown = Vec::new();
    let mut de = serde_json::Deserializer::from_str(text);
    let mut track = |path: serde_ignored::Path<'_>| unknown.push(path.to_string());
    let tracked = serde_ignored::Deserializer::new(&mut de, &mut track);
    let doc: ScenarioDocument = serde_path_to_error::deserialize(tracked).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        CliError::Schema(format!(
            "at `{path}` (line {}, column {}): {inner}",
            inner.line(),
            inner.column()
        ))
    })?;
    if !unknown.is_empty() && !lenient {
        return Err(CliError::Schema(format!(
            "unknown field{} {}",
            if unknown.len() == 1 { "" } else { "s" },
            unknown.iter().map(|u| format!("`{u}`")).collect::<Vec<_>>().join(", ")
        )));
    }
    if doc.schema_version != SCHEMA_VERSION {
        return Err(CliError::Schema(format!(
            "at `schema_version`: unsupported version {} (expected {SCHEMA_VERSION})",
            doc.schema_version
        )));
    }
    let warnings = unknown.into_iter().map(|u| format!("ignoring unknown field `{u}`")).collect();
    Ok((doc, warnings))
}

fn cx(v: &Cx) -> C64 {
    C64::new(v[0], v[1])
}

fn from_cx(c: C64) -> Cx {
    [c.re, c.im]
}

fn vector(layout: &SpaceLayout, entries: &[Cx], at: &str) -> Result<StateVector, CliError> {
    StateVector::new(layout.clone(), entries.iter().map(cx).collect())
        .map_err(|e| CliError::Schema(format!("at `{at}`: {e}")))
}

fn matrix(layout: &SpaceLayout, rows: &[Vec<Cx>], at: &str) -> Result<OperatorMatrix, CliError> {
    let rows: Vec<Vec<C64>> = rows.iter().map(|r| r.iter().map(cx).collect()).collect();
    OperatorMatrix::from_rows(layout.clone(), &rows).map_err(|e| CliError::Schema(format!("at `{at}`: {e}")))
}

fn schema<E: std::fmt::Display>(at: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Schema(format!("at `{at}`: {e}"))
}

impl ScenarioDocument {
    /// Build the protocol and run full validation.
    pub fn to_protocol(&self) -> Result<Protocol, CliError> {
        let layout = SpaceLayout::new(self.subsystems.iter().map(|s| (s.name.clone(), s.dim)))
            .map_err(schema("subsystems"))?;
        let initial = match &self.initial {
            InitialSpec::Vector(v) => vector(&layout, v, "initial.vector")?,
            InitialSpec::Product(factors) => {
                let mut named = Vec::with_capacity(factors.len());
                for (i, f) in factors.iter().enumerate() {
                    let at = format!("initial.product[{i}]");
                    let sub = layout.sub_layout(&[f.subsystem.as_str()]).map_err(schema(&at))?;
                    named.push(vector(&sub, &f.amplitudes, &at)?);
                }
                let mut acc = named[..].first().cloned().ok_or_else(|| {
                    CliError::Schema("at `initial.product`: no factors".into())
                })?;
                for s in &named[1..] {
                    acc = pathwig::hilbert::kron_states(&acc, s).map_err(schema("initial.product"))?;
                }
                acc.permuted_to(&layout).map_err(schema("initial.product"))?
            }
        };
        let mut p = Protocol::new(initial);
        for (i, ev) in self.events.iter().enumerate() {
            match ev {
                EventSpec::Couple(c) => {
                    let at = format!("events[{i}].couple");
                    let local = coupling_matrix(c, &layout, &at)?;
                    let ev = CouplingEvent::new(c.time, local, &c.targets, &layout).map_err(schema(&at))?;
                    p.events.push(Event::Coupling(ev));
                }
                EventSpec::Measure(m) => {
                    let at = format!("events[{i}].measure");
                    let targets: Vec<String> = match &m.targets {
                        Some(t) => t.clone(),
                        None => layout.names().map(str::to_string).collect(),
                    };
                    let local_layout = layout.sub_layout(&targets).map_err(schema(&at))?;
                    let obs = observable(&m.observable, &local_layout, &format!("{at}.observable"))?;
                    let ev = MeasurementEvent::new(m.time, &m.observer, obs, &targets, &layout, m.registered)
                        .map_err(schema(&at))?;
                    p.events.push(Event::Measurement(ev));
                }
            }
        }
        let diagnostics = p.validate();
        if !diagnostics.is_empty() {
            return Err(CliError::Validation(diagnostics.iter().map(ToString::to_string).collect()));
        }
        Ok(p)
    }

    /// Canonical document for `protocol`: full initial vector, explicit local
    /// coupling matrices, observables as basis states.
    pub fn from_protocol(protocol: &Protocol, description: Option<String>) -> Self {
        let layout = &protocol.layout;
        let events = protocol
            .events
            .iter()
            .map(|ev| match ev {
                Event::Coupling(c) => EventSpec::Couple(CoupleSpec {
                    time: c.time,
                    targets: c.targets.clone(),
                    matrix: Some(c.local.rows().map(|r| r.iter().copied().map(from_cx).collect()).collect()),
                    gate: None,
                }),
                Event::Measurement(m) => {
                    // keep bases chosen on the full layout when re-embedding
                    // the local form would not reproduce them
                    let rederived = MeasurementEvent::new(m.time, &m.observer, m.local.clone(), &m.targets, layout, m.registered)
                        .map(|e| e.observable == m.observable)
                        .unwrap_or(false);
                    let (targets, obs) = if rederived {
                        (m.targets.clone(), &m.local)
                    } else {
                        (layout.names().map(str::to_string).collect(), &m.observable)
                    };
                    EventSpec::Measure(MeasureSpec {
                        time: m.time,
                        observer: m.observer.clone(),
                        registered: m.registered,
                        targets: Some(targets),
                        observable: observable_spec(obs),
                    })
                }
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            description,
            subsystems: layout
                .subsystems()
                .iter()
                .map(|s| SubsystemSpec {
                    name: s.name.clone(),
                    dim: s.dim,
                })
                .collect(),
            initial: InitialSpec::Vector(protocol.initial.entries().iter().copied().map(from_cx).collect()),
            events,
            queries: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("documents always serialize");
        s.push('\n');
        s
    }
}

fn observable_spec(obs: &ObservableDecomposition) -> ObservableSpec {
    ObservableSpec {
        label: Some(obs.label.clone()),
        branches: obs
            .branches()
            .iter()
            .map(|b| BranchSpec {
                eigenvalue: b.eigenvalue,
                label: Some(b.label.clone()),
                basis_states: Some(
                    b.basis
                        .iter()
                        .map(|v| v.entries().iter().copied().map(from_cx).collect())
                        .collect(),
                ),
                projector: None,
            })
            .collect(),
    }
}

fn observable(spec: &ObservableSpec, layout: &SpaceLayout, at: &str) -> Result<ObservableDecomposition, CliError> {
    let label = spec.label.clone().unwrap_or_else(|| "observable".into());
    let mut by_basis = Vec::new();
    let mut by_projector = Vec::new();
    for (i, b) in spec.branches.iter().enumerate() {
        let bat = format!("{at}.branches[{i}]");
        match (&b.basis_states, &b.projector) {
            (Some(states), None) => {
                let states = states
                    .iter()
                    .enumerate()
                    .map(|(j, s)| vector(layout, s, &format!("{bat}.basis_states[{j}]")))
                    .collect::<Result<Vec<_>, _>>()?;
                by_basis.push((b.eigenvalue, states));
            }
            (None, Some(rows)) => by_projector.push((b.eigenvalue, matrix(layout, rows, &format!("{bat}.projector"))?)),
            _ => {
                return Err(CliError::Schema(format!(
                    "at `{bat}`: give exactly one of `basis_states` or `projector`"
                )))
            }
        }
    }
    if !by_basis.is_empty() && !by_projector.is_empty() {
        return Err(CliError::Schema(format!(
            "at `{at}`: branches mix `basis_states` and `projector`"
        )));
    }
    let obs = if by_projector.is_empty() {
        ObservableDecomposition::from_bases(&label, by_basis)
    } else {
        ObservableDecomposition::from_projectors(&label, by_projector)
    }
    .map_err(schema(at))?;
    if spec.branches.iter().any(|b| b.label.is_some()) {
        let labels: Vec<String> = spec
            .branches
            .iter()
            .zip(obs.branches())
            .map(|(s, b)| s.label.clone().unwrap_or_else(|| b.label.clone()))
            .collect();
        return obs.with_branch_labels(&labels).map_err(schema(at));
    }
    Ok(obs)
}

fn coupling_matrix(c: &CoupleSpec, layout: &SpaceLayout, at: &str) -> Result<OperatorMatrix, CliError> {
    let local_layout = layout.sub_layout(&c.targets).map_err(schema(at))?;
    match (&c.matrix, &c.gate) {
        (Some(rows), None) => matrix(&local_layout, rows, &format!("{at}.matrix")),
        (None, Some(gate)) => {
            let gat = format!("{at}.gate");
            let names: Vec<&str> = c.targets.iter().map(String::as_str).collect();
            let u = match gate {
                GateSpec::Cnot {} => {
                    let [control, target] = names[..] else {
                        return Err(CliError::Schema(format!("at `{gat}`: cnot needs [control, target]")));
                    };
                    let sys = SpaceLayout::new([(control, local_layout.dim_of(control).map_err(schema(&gat))?)])
                        .map_err(schema(&gat))?;
                    let one = StateVector::basis(&sys, 1).map_err(schema(&gat))?;
                    let zero = StateVector::basis(&sys, 0).map_err(schema(&gat))?;
                    // built on (target, control), then laid out in the listed order
                    let u = controlled_flip_coupling(target, control, [&one, &zero]).map_err(schema(&gat))?;
                    pathwig::hilbert::embed_operator(u.matrix(), &[target, control], &local_layout)
                        .map_err(schema(&gat))?
                }
                GateSpec::ControlledFlip { basis } => {
                    let [pointer, system] = names[..] else {
                        return Err(CliError::Schema(format!(
                            "at `{gat}`: controlled_flip needs [pointer, system]"
                        )));
                    };
                    let sys = local_layout.sub_layout(&[system]).map_err(schema(&gat))?;
                    let b0 = vector(&sys, &basis[0], &format!("{gat}.basis[0]"))?;
                    let b1 = vector(&sys, &basis[1], &format!("{gat}.basis[1]"))?;
                    controlled_flip_coupling(pointer, system, [&b0, &b1])
                        .map_err(schema(&gat))?
                        .into_matrix()
                }
                GateSpec::CompositeFlip {
                    distinguished,
                    completion,
                } => {
                    let Some((pointer, rest)) = names.split_first() else {
                        return Err(CliError::Schema(format!("at `{gat}`: composite_flip needs targets")));
                    };
                    let sys = local_layout.sub_layout(rest).map_err(schema(&gat))?;
                    let d = vector(&sys, distinguished, &format!("{gat}.distinguished"))?;
                    let comp = completion
                        .iter()
                        .enumerate()
                        .map(|(j, s)| vector(&sys, s, &format!("{gat}.completion[{j}]")))
                        .collect::<Result<Vec<_>, _>>()?;
                    composite_basis_coupling(pointer, rest, &d, &comp)
                        .map_err(schema(&gat))?
                        .into_matrix()
                }
            };
            Ok(u)
        }
        _ => Err(CliError::Schema(format!(
            "at `{at}`: give exactly one of `matrix` or `gate`"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "subsystems": [{"name": "q", "dim": 2}],
        "initial": {"vector": [[1, 0], [0, 0]]},
        "events": [
            {"measure": {"time": 1, "observer": "A", "observable": {"branches": [
                {"eigenvalue": 1, "basis_states": [[[1, 0], [0, 0]]]},
                {"eigenvalue": 0, "basis_states": [[[0, 0], [1, 0]]]}
            ]}}}
        ]
    }"#;

    #[test]
    fn minimal_document_builds() {
        let (doc, warnings) = parse_scenario(MINIMAL, false).unwrap();
        assert!(warnings.is_empty());
        let p = doc.to_protocol().unwrap();
        assert_eq!(p.registered_events().len(), 1);
    }

    #[test]
    fn unknown_field_strict_vs_lenient() {
        let text = MINIMAL.replacen("\"schema_version\": 1,", "\"schema_version\": 1, \"colour\": 3,", 1);
        assert!(matches!(parse_scenario(&text, false), Err(CliError::Schema(m)) if m.contains("colour")));
        let (_, warnings) = parse_scenario(&text, true).unwrap();
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn syntax_and_schema_are_distinct() {
        assert!(matches!(parse_scenario("{", false), Err(CliError::Syntax(_))));
        let wrong = MINIMAL.replace("\"dim\": 2", "\"dim\": \"two\"");
        assert!(matches!(parse_scenario(&wrong, false), Err(CliError::Schema(m)) if m.contains("subsystems[0].dim")));
    }

    #[test]
    fn cnot_gate_flips_target() {
        let text = r#"{
            "schema_version": 1,
            "subsystems": [{"name": "t", "dim": 2}, {"name": "c", "dim": 2}],
            "initial": {"product": [
                {"subsystem": "c", "amplitudes": [[0, 0], [1, 0]]},
                {"subsystem": "t", "amplitudes": [[1, 0], [0, 0]]}
            ]},
            "events": [
                {"couple": {"time": 1, "targets": ["c", "t"], "gate": {"cnot": {}}}},
                {"measure": {"time": 2, "observer": "A", "targets": ["t"], "observable": {"branches": [
                    {"eigenvalue": 1, "label": "one", "basis_states": [[[0, 0], [1, 0]]]},
                    {"eigenvalue": 0, "label": "zero", "basis_states": [[[1, 0], [0, 0]]]}
                ]}}}
            ]
        }"#;
        let (doc, _) = parse_scenario(text, false).unwrap();
        let p = doc.to_protocol().unwrap();
        let d = pathwig::path_engine::distribution(&p).unwrap();
        assert!((d.probability(&[0]) - 1.0).abs() < 1e-15);
    }
}
