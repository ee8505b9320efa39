//! Commands behind the CLI, usable without a process boundary.

use std::path::Path;

use pathwig::collapse_oracle::{evolve_collapse, wigner_comparison};
use pathwig::path_engine::{distribution, enumerate_virtual_paths, interference_report};
use pathwig::random::{random_protocol, rng, ProtocolShape};
use pathwig::scenarios::{
    build, registering_gap, surviving_records, WignerFriendConfig,
};
use pathwig::{Distribution, Protocol};

use crate::document::{parse_scenario, QuerySpec, ScenarioDocument};
use crate::error::CliError;
use crate::report::*;

/// Oracle-comparison tolerance when neither `--tolerance` nor
/// `PATHWIG_TOLERANCE` is given.
pub const DEFAULT_TOLERANCE: f64 = 1e-9;

/// A report plus the failure to signal after printing it.
#[derive(Debug)]
pub struct CommandOutput {
    pub report: RunReport,
    pub failure: Option<CliError>,
}

impl From<RunReport> for CommandOutput {
    fn from(report: RunReport) -> Self {
        Self { report, failure: None }
    }
}

pub struct Loaded {
    pub document: ScenarioDocument,
    pub protocol: Protocol,
    pub warnings: Vec<String>,
}

pub fn load(path: &Path, lenient: bool) -> Result<Loaded, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    load_str(&text, lenient)
}

pub fn load_str(text: &str, lenient: bool) -> Result<Loaded, CliError> {
    let (document, warnings) = parse_scenario(text, lenient)?;
    let protocol = document.to_protocol()?;
    Ok(Loaded {
        document,
        protocol,
        warnings,
    })
}

fn labels(seq: &pathwig::OutcomeSequence) -> Vec<String> {
    seq.outcomes.iter().map(ToString::to_string).collect()
}

pub fn distribution_table(protocol: &Protocol, dist: &Distribution) -> DistributionTable {
    DistributionTable {
        observers: protocol.registered_events().iter().map(|m| m.observer.clone()).collect(),
        rows: dist
            .entries
            .iter()
            .map(|(seq, p)| DistributionRow {
                outcomes: labels(seq),
                key: seq.key(),
                probability: *p,
            })
            .collect(),
        total: dist.total(),
    }
}

pub fn simulate(protocol: &Protocol) -> Result<QueryResult, CliError> {
    let dist = distribution(protocol)?;
    Ok(QueryResult::Distribution(distribution_table(protocol, &dist)))
}

pub fn paths(protocol: &Protocol, final_label: &str) -> Result<QueryResult, CliError> {
    let fin = protocol.resolve_final(final_label)?;
    let rows = enumerate_virtual_paths(protocol)?
        .into_iter()
        .filter(|p| p.nodes.last().is_some_and(|n| n.branch == fin.branch))
        .enumerate()
        .map(|(index, p)| {
            let seq = protocol.outcome_sequence(&p.branches())?;
            Ok(PathRow {
                index,
                outcomes: labels(&seq),
                nodes: p.nodes.iter().map(|n| [n.branch, n.basis]).collect(),
                amplitude: [p.amplitude.re, p.amplitude.im],
            })
        })
        .collect::<Result<Vec<_>, pathwig::Error>>()?;
    Ok(QueryResult::Paths(PathListing {
        final_outcome: fin.to_string(),
        paths: rows,
    }))
}

pub fn interference(protocol: &Protocol, final_label: &str) -> Result<QueryResult, CliError> {
    let fin = protocol.resolve_final(final_label)?;
    let r = interference_report(protocol, &fin)?;
    Ok(QueryResult::Interference(InterferenceResult {
        final_outcome: fin.to_string(),
        real_paths: r
            .real_paths
            .iter()
            .map(|(seq, amps)| RealPathRow {
                outcomes: labels(seq),
                amplitudes: amps.iter().map(|a| [a.re, a.im]).collect(),
            })
            .collect(),
        incoherent_sum: r.incoherent_sum,
        coherent_sum: r.coherent_sum,
        interference_term: r.interference_term,
        pairwise_term: r.pairwise_term,
    }))
}

/// Per-outcome comparison over the union of reported outcomes.
pub fn compare_oracle(protocol: &Protocol, tolerance: f64) -> Result<(QueryResult, Option<CliError>), CliError> {
    let a = distribution(protocol)?;
    let b = evolve_collapse(protocol)?;
    let mut keys: Vec<(Vec<usize>, Vec<String>)> = a
        .entries
        .iter()
        .chain(&b.entries)
        .map(|(s, _)| (s.key(), labels(s)))
        .collect();
    keys.sort();
    keys.dedup();
    let rows: Vec<OracleRow> = keys
        .into_iter()
        .map(|(k, outcomes)| {
            let (pa, pb) = (a.probability(&k), b.probability(&k));
            OracleRow {
                outcomes,
                path_engine: pa,
                collapse_oracle: pb,
                delta: (pa - pb).abs(),
            }
        })
        .collect();
    let max_delta = rows.iter().map(|r| r.delta).fold(0.0, f64::max);
    let failure = (max_delta > tolerance).then(|| {
        let worst = rows.iter().find(|r| r.delta == max_delta).expect("non-empty");
        CliError::OracleMismatch(format!(
            "P({}) path engine {} vs collapse oracle {} (delta {:e} > {:e})",
            worst.outcomes.join(", "),
            worst.path_engine,
            worst.collapse_oracle,
            max_delta,
            tolerance
        ))
    });
    Ok((
        QueryResult::CompareOracle(OracleComparison {
            tolerance,
            max_delta,
            rows,
        }),
        failure,
    ))
}

pub fn oracle_sweep(count: usize, seed: u64, tolerance: f64) -> Result<(QueryResult, Option<CliError>), CliError> {
    let mut r = rng(seed);
    let mut max_delta = 0.0;
    let mut worst = 0;
    for i in 0..count {
        let p = random_protocol(ProtocolShape::default(), &mut r)?;
        let d = distribution(&p)?.max_abs_diff(&evolve_collapse(&p)?);
        if d > max_delta {
            max_delta = d;
            worst = i;
        }
    }
    let failure = (max_delta > tolerance).then(|| {
        CliError::OracleMismatch(format!(
            "random protocol #{worst} (seed {seed}) differs by {max_delta:e} > {tolerance:e}"
        ))
    });
    Ok((
        QueryResult::OracleSweep(OracleSweep {
            seed,
            protocols: count,
            tolerance,
            max_delta,
            worst,
        }),
        failure,
    ))
}

pub fn pure_vs_mixture(protocol: &Protocol, final_label: &str) -> Result<QueryResult, CliError> {
    let fin = protocol.resolve_final(final_label)?;
    let w = wigner_comparison(protocol, &fin)?;
    Ok(QueryResult::WignerComparison(WignerComparisonResult {
        final_outcome: fin.to_string(),
        p_pure: w.p_pure,
        p_mixture: w.p_mixture,
        difference: w.p_pure - w.p_mixture,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    C,
    D,
    F,
}

impl Case {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().trim_start_matches("case-") {
            "c" => Some(Case::C),
            "d" => Some(Case::D),
            "f" => Some(Case::F),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Case::C => "C",
            Case::D => "D",
            Case::F => "F",
        }
    }

    pub fn preset_name(self) -> &'static str {
        match self {
            Case::C => "case-c",
            Case::D => "case-d",
            Case::F => "case-f",
        }
    }

    pub const ALL: [Case; 3] = [Case::C, Case::D, Case::F];
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct PresetOptions {
    pub no_register: bool,
    pub chain: usize,
    pub erase: Vec<usize>,
}

pub fn preset_config(case: Case, opts: &PresetOptions) -> WignerFriendConfig {
    let base = match case {
        Case::C => WignerFriendConfig::canonical_c(),
        Case::D => WignerFriendConfig::canonical_d(),
        Case::F => WignerFriendConfig::canonical_f(),
    };
    base.with_registered(!opts.no_register)
        .with_chain(opts.chain, opts.erase.clone())
}

pub fn wigner(case: Case, opts: &PresetOptions) -> Result<QueryResult, CliError> {
    let config = preset_config(case, opts);
    let setup = build(&config)?;
    let report = registering_gap(&config)?;
    let dist = distribution(&setup.protocol)?;
    Ok(QueryResult::Wigner(WignerReport {
        case: case.name().into(),
        w_mode: report.mode.into(),
        f_registered: config.f_registered,
        chain_length: config.chain_length,
        erasure: config.erasure.clone(),
        amplitudes: report.amplitudes.iter().map(|a| [a.re, a.im]).collect(),
        table: distribution_table(&setup.protocol, &dist),
        p_yes_registered: report.p_yes_registered,
        p_yes_not_registered: report.p_yes_not_registered,
        gap: report.gap,
        interference_term: report.interference_term,
        pairwise_term: report.pairwise_term,
        record_survival: report.record_survival,
        surviving_records: surviving_records(&setup)?,
    }))
}

/// Canonical document for a preset, with the queries worth running on it.
pub fn preset_document(case: Case, opts: &PresetOptions) -> Result<ScenarioDocument, CliError> {
    let config = preset_config(case, opts);
    let setup = build(&config)?;
    let mut doc = ScenarioDocument::from_protocol(
        &setup.protocol,
        Some(format!(
            "Wigner-Friend case {}: W engages {}; F {}; {} record(s), erased {:?}",
            case.name(),
            config.w_mode.name(),
            if config.f_registered { "registering" } else { "not registering" },
            config.chain_length,
            config.erasure
        )),
    );
    doc.queries = vec![
        QuerySpec::Distribution {},
        QuerySpec::Paths {
            final_outcome: "yes^W".into(),
        },
        QuerySpec::Interference {
            final_outcome: "yes^W".into(),
        },
        QuerySpec::CompareOracle {},
        QuerySpec::WignerComparison {
            final_outcome: "yes^W".into(),
        },
    ];
    Ok(doc)
}

/// Re-emit a loaded document in canonical form, keeping its description and
/// queries.
pub fn normalize(loaded: &Loaded) -> ScenarioDocument {
    let mut doc = ScenarioDocument::from_protocol(&loaded.protocol, loaded.document.description.clone());
    doc.queries = loaded.document.queries.clone();
    doc
}

/// Run every query in the document (a distribution when there are none).
/// The first oracle mismatch is returned alongside the full report.
pub fn run_queries(loaded: &Loaded, tolerance: f64) -> Result<(Vec<QueryResult>, Option<CliError>), CliError> {
    let p = &loaded.protocol;
    let default = [QuerySpec::Distribution {}];
    let queries = if loaded.document.queries.is_empty() {
        &default[..]
    } else {
        &loaded.document.queries[..]
    };
    let mut out = Vec::with_capacity(queries.len());
    let mut failure = None;
    for q in queries {
        out.push(match q {
            QuerySpec::Distribution {} => simulate(p)?,
            QuerySpec::Paths { final_outcome } => paths(p, final_outcome)?,
            QuerySpec::Interference { final_outcome } => interference(p, final_outcome)?,
            QuerySpec::WignerComparison { final_outcome } => pure_vs_mixture(p, final_outcome)?,
            QuerySpec::CompareOracle {} => {
                let (r, f) = compare_oracle(p, tolerance)?;
                if failure.is_none() {
                    failure = f;
                }
                r
            }
        });
    }
    Ok((out, failure))
}
