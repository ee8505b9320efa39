//! Machine-readable run reports and their aligned-table rendering.

use std::fmt::Write as _;

use serde::Serialize;

use crate::document::Cx;

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RunReport {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    pub results: Vec<QueryResult>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum QueryResult {
    Distribution(DistributionTable),
    Paths(PathListing),
    Interference(InterferenceResult),
    CompareOracle(OracleComparison),
    OracleSweep(OracleSweep),
    WignerComparison(WignerComparisonResult),
    Wigner(WignerReport),
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct DistributionTable {
    /// One per registered event, in time order.
    pub observers: Vec<String>,
    pub rows: Vec<DistributionRow>,
    pub total: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct DistributionRow {
    pub outcomes: Vec<String>,
    pub key: Vec<usize>,
    pub probability: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct PathListing {
    #[serde(rename = "final")]
    pub final_outcome: String,
    pub paths: Vec<PathRow>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct PathRow {
    pub index: usize,
    pub outcomes: Vec<String>,
    /// `(branch, basis index)` per registered event.
    pub nodes: Vec<[usize; 2]>,
    pub amplitude: Cx,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct InterferenceResult {
    #[serde(rename = "final")]
    pub final_outcome: String,
    pub real_paths: Vec<RealPathRow>,
    pub incoherent_sum: f64,
    pub coherent_sum: f64,
    pub interference_term: f64,
    pub pairwise_term: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RealPathRow {
    pub outcomes: Vec<String>,
    /// Coherent amplitude per basis state of the final branch.
    pub amplitudes: Vec<Cx>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct OracleComparison {
    pub tolerance: f64,
    pub max_delta: f64,
    pub rows: Vec<OracleRow>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct OracleRow {
    pub outcomes: Vec<String>,
    pub path_engine: f64,
    pub collapse_oracle: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct OracleSweep {
    pub seed: u64,
    pub protocols: usize,
    pub tolerance: f64,
    pub max_delta: f64,
    /// Index of the protocol with the largest delta.
    pub worst: usize,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct WignerComparisonResult {
    #[serde(rename = "final")]
    pub final_outcome: String,
    pub p_pure: f64,
    pub p_mixture: f64,
    pub difference: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct WignerReport {
    pub case: String,
    pub w_mode: String,
    pub f_registered: bool,
    pub chain_length: usize,
    pub erasure: Vec<usize>,
    pub amplitudes: Vec<Cx>,
    /// Distribution of the protocol as run (F's flag as selected).
    pub table: DistributionTable,
    pub p_yes_registered: f64,
    pub p_yes_not_registered: f64,
    pub gap: f64,
    pub interference_term: f64,
    pub pairwise_term: f64,
    pub record_survival: bool,
    pub surviving_records: Vec<String>,
}

fn p12(x: f64) -> String {
    format!("{x:.12}")
}

fn cx12(c: &Cx) -> String {
    format!("{:.12} {:+.12}i", c[0], c[1])
}

/// Left-aligned first column, right-aligned rest.
fn table(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let cols = header.len();
    let mut w: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate().take(cols) {
            w[i] = w[i].max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::from("  ");
        for (i, c) in cells.iter().enumerate() {
            let pad = w[i] - c.chars().count();
            if i == 0 {
                s.push_str(c);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str("   ");
                s.push_str(&" ".repeat(pad));
                s.push_str(c);
            }
        }
        s.trim_end().to_string()
    };
    let _ = writeln!(out, "{}", line(header.to_vec()));
    let _ = writeln!(out, "  {}", "-".repeat(w.iter().sum::<usize>() + 3 * (cols - 1)));
    for r in rows {
        let _ = writeln!(out, "{}", line(r.iter().map(String::as_str).collect()));
    }
}

fn kv(out: &mut String, pairs: &[(&str, String)]) {
    let w = pairs.iter().map(|(k, _)| k.chars().count()).max().unwrap_or(0);
    for (k, v) in pairs {
        let _ = writeln!(out, "{k}{}   {v}", " ".repeat(w - k.chars().count()));
    }
}

fn distribution(out: &mut String, t: &DistributionTable) {
    let rows: Vec<Vec<String>> = t
        .rows
        .iter()
        .map(|r| vec![format!("P({})", r.outcomes.join(", ")), p12(r.probability)])
        .collect();
    table(out, &[&format!("outcome ({})", t.observers.join(", ")), "probability"], &rows);
    let _ = writeln!(out, "  total {}", p12(t.total));
}

impl QueryResult {
    pub fn render(&self, out: &mut String) {
        match self {
            QueryResult::Distribution(t) => {
                let _ = writeln!(out, "distribution");
                distribution(out, t);
            }
            QueryResult::Paths(l) => {
                let _ = writeln!(out, "virtual paths ending in {} ({})", l.final_outcome, l.paths.len());
                let rows: Vec<Vec<String>> = l
                    .paths
                    .iter()
                    .map(|p| {
                        let nodes: Vec<String> = p.nodes.iter().map(|[b, i]| format!("{b}.{i}")).collect();
                        vec![
                            p.index.to_string(),
                            p.outcomes.join(" → "),
                            nodes.join(" "),
                            cx12(&p.amplitude),
                        ]
                    })
                    .collect();
                table(out, &["#", "outcomes", "nodes", "amplitude"], &rows);
            }
            QueryResult::Interference(r) => {
                let _ = writeln!(out, "interference for {}", r.final_outcome);
                let rows: Vec<Vec<String>> = r
                    .real_paths
                    .iter()
                    .map(|p| {
                        let weight: f64 = p.amplitudes.iter().map(|a| a[0] * a[0] + a[1] * a[1]).sum();
                        vec![p.outcomes.join(" → "), p12(weight)]
                    })
                    .collect();
                table(out, &["real path", "probability"], &rows);
                kv(
                    out,
                    &[
                        ("incoherent sum", p12(r.incoherent_sum)),
                        ("coherent sum", p12(r.coherent_sum)),
                        ("interference term", p12(r.interference_term)),
                        ("2 Σ Re[a_k* a_j]", p12(r.pairwise_term)),
                    ],
                );
            }
            QueryResult::CompareOracle(c) => {
                let _ = writeln!(out, "path engine vs collapse oracle");
                let rows: Vec<Vec<String>> = c
                    .rows
                    .iter()
                    .map(|r| {
                        vec![
                            format!("P({})", r.outcomes.join(", ")),
                            p12(r.path_engine),
                            p12(r.collapse_oracle),
                            format!("{:.3e}", r.delta),
                        ]
                    })
                    .collect();
                table(out, &["outcome", "path engine", "collapse", "delta"], &rows);
                kv(
                    out,
                    &[
                        ("max delta", format!("{:.3e}", c.max_delta)),
                        ("tolerance", format!("{:.3e}", c.tolerance)),
                    ],
                );
            }
            QueryResult::OracleSweep(s) => {
                let _ = writeln!(out, "path engine vs collapse oracle over random protocols");
                kv(
                    out,
                    &[
                        ("seed", s.seed.to_string()),
                        ("protocols", s.protocols.to_string()),
                        ("max delta", format!("{:.3e}", s.max_delta)),
                        ("worst protocol", s.worst.to_string()),
                        ("tolerance", format!("{:.3e}", s.tolerance)),
                    ],
                );
            }
            QueryResult::WignerComparison(w) => {
                let _ = writeln!(out, "pure vs mixture for {}", w.final_outcome);
                kv(
                    out,
                    &[
                        ("p_pure", p12(w.p_pure)),
                        ("p_mixture", p12(w.p_mixture)),
                        ("difference", p12(w.difference)),
                    ],
                );
            }
            QueryResult::Wigner(w) => {
                let erased = if w.erasure.is_empty() {
                    "none".to_string()
                } else {
                    w.erasure.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
                };
                let _ = writeln!(
                    out,
                    "case {} (W engages {}), F {}, K = {}, erased: {}",
                    w.case,
                    w.w_mode,
                    if w.f_registered { "registering" } else { "not registering" },
                    w.chain_length,
                    erased
                );
                let _ = writeln!(out);
                distribution(out, &w.table);
                let _ = writeln!(out);
                let rows: Vec<Vec<String>> = w
                    .amplitudes
                    .iter()
                    .enumerate()
                    .map(|(i, a)| vec![format!("A{}", i + 1), cx12(a)])
                    .collect();
                table(out, &["path", "amplitude"], &rows);
                let _ = writeln!(out);
                kv(
                    out,
                    &[
                        ("P(yes^W | F registering)", p12(w.p_yes_registered)),
                        ("P(yes^W | F not registering)", p12(w.p_yes_not_registered)),
                        ("gap", p12(w.gap)),
                        ("interference term", p12(w.interference_term)),
                        ("2 Σ Re[A_i* A_j]", p12(w.pairwise_term)),
                        (
                            "surviving records",
                            if w.surviving_records.is_empty() {
                                "none".into()
                            } else {
                                w.surviving_records.join(", ")
                            },
                        ),
                    ],
                );
            }
        }
    }
}

impl RunReport {
    pub fn human(&self) -> String {
        let mut out = String::new();
        if let Some(src) = &self.source {
            let _ = writeln!(out, "{}: {src}", self.command);
            let _ = writeln!(out);
        }
        for (i, r) in self.results.iter().enumerate() {
            if i > 0 {
                let _ = writeln!(out);
            }
            r.render(&mut out);
        }
        out
    }

    pub fn json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports always serialize");
        s.push('\n');
        s
    }
}
