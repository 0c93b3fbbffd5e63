//! Results tables assembled from finished run directories.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use moeulab::analytics::Strategy;
use moeulab::unlearn::{Algorithm, Selection};

use crate::config::ReportRow;
use crate::error::{HarnessError, HarnessResult};

pub const ABSENT: &str = "absent";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableKind {
    Main,
    TopM,
    Alpha,
    Overlap,
}

impl std::str::FromStr for TableKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> HarnessResult<Self> {
        match s {
            "main" => Ok(TableKind::Main),
            "topm" => Ok(TableKind::TopM),
            "alpha" => Ok(TableKind::Alpha),
            "overlap" => Ok(TableKind::Overlap),
            other => Err(HarnessError::Usage(format!("unknown table `{other}`"))),
        }
    }
}

impl TableKind {
    pub fn name(self) -> &'static str {
        match self {
            TableKind::Main => "main",
            TableKind::TopM => "topm",
            TableKind::Alpha => "alpha",
            TableKind::Overlap => "overlap",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub warnings: Vec<String>,
}

impl Table {
    pub fn markdown(&self) -> String {
        let mut s = format!("| {} |\n", self.headers.join(" | "));
        s.push_str(&format!("|{}\n", "---|".repeat(self.headers.len())));
        for r in &self.rows {
            s.push_str(&format!("| {} |\n", r.join(" | ")));
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = self.headers.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

/// A run directory's report row plus its evaluation curve, if present.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub row: ReportRow,
    /// `(step, overlap)` pairs from `evals.csv`.
    pub overlap: Vec<(u64, f64)>,
}

pub fn load_runs(dirs: &[PathBuf], warnings: &mut Vec<String>) -> Vec<RunRecord> {
    let mut out = Vec::new();
    for d in dirs {
        match load_run(d) {
            Ok(r) => out.push(r),
            Err(e) => warnings.push(format!("{}: {e}", d.display())),
        }
    }
    out
}

fn load_run(dir: &Path) -> HarnessResult<RunRecord> {
    let text = std::fs::read_to_string(dir.join("report.json"))
        .map_err(|e| HarnessError::Run(format!("no report.json ({e})")))?;
    let row: ReportRow = serde_json::from_str(&text).map_err(|e| HarnessError::Run(e.to_string()))?;
    let mut overlap = Vec::new();
    if let Ok(evals) = std::fs::read_to_string(dir.join("evals.csv")) {
        for line in evals.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if let (Some(s), Some(o)) = (f.first().and_then(|x| x.parse().ok()), f.get(3).and_then(|x| x.parse().ok())) {
                overlap.push((s, o));
            }
        }
    }
    Ok(RunRecord {
        dir: dir.to_path_buf(),
        row,
        overlap,
    })
}

fn num(x: f64) -> String {
    format!("{x:.4}")
}

/// The first run satisfying `pred`, warning when several do.
fn pick<'a>(runs: &'a [RunRecord], what: &str, warnings: &mut Vec<String>, pred: impl Fn(&ReportRow) -> bool) -> Option<&'a RunRecord> {
    let hits: Vec<&RunRecord> = runs.iter().filter(|r| pred(&r.row)).collect();
    if hits.len() > 1 {
        warnings.push(format!("{what}: {} candidate runs, using {}", hits.len(), hits[0].dir.display()));
    }
    hits.first().copied()
}

fn is_default_seuf(r: &ReportRow) -> bool {
    r.seuf && r.selection == Selection::Affinity && r.alpha == 1.0
}

pub fn build(kind: TableKind, runs: &[RunRecord], mut warnings: Vec<String>) -> Table {
    let w = &mut warnings;
    let (headers, rows) = match kind {
        TableKind::Main => {
            let headers = ["method", "fe", "ut", "param_fraction", "matched"];
            let mut rows = Vec::new();
            for alg in Algorithm::ALL {
                for seuf in [false, true] {
                    let label = ReportRow::method_label(alg, seuf, Selection::Affinity);
                    let found = pick(runs, &label, w, |r| {
                        r.algorithm == alg
                            && if seuf {
                                is_default_seuf(r) && r.m == 1
                            } else {
                                !r.seuf
                            }
                    });
                    rows.push(match found {
                        Some(f) => vec![
                            label,
                            num(f.row.fe),
                            num(f.row.ut),
                            format!("{:.6}", f.row.param_fraction),
                            f.row.matched.to_string(),
                        ],
                        None => {
                            w.push(format!("main: no run for {label}"));
                            vec![label, ABSENT.into(), ABSENT.into(), ABSENT.into(), ABSENT.into()]
                        }
                    });
                }
            }
            (headers.iter().map(|h| h.to_string()).collect(), rows)
        }
        TableKind::TopM => {
            let cols: Vec<(usize, Strategy)> = [1, 3, 6]
                .into_iter()
                .flat_map(|m| [(m, Strategy::SameLayer), (m, Strategy::CrossLayer)])
                .collect();
            let mut headers = vec!["algorithm".to_string()];
            headers.extend(cols.iter().map(|(m, s)| format!("top-{m} {s}")));
            let algs: BTreeSet<&'static str> = runs.iter().filter(|r| is_default_seuf(&r.row)).map(|r| r.row.algorithm.label()).collect();
            let mut rows = Vec::new();
            for alg in Algorithm::ALL.into_iter().filter(|a| algs.contains(a.label())) {
                let mut row = vec![alg.label().to_string()];
                for &(m, s) in &cols {
                    // With one target the two strategies pick the same expert.
                    let found = pick(runs, &format!("{alg} top-{m} {s}"), w, |r| {
                        is_default_seuf(r) && r.algorithm == alg && r.m == m && (m == 1 || r.strategy == s)
                    });
                    row.push(match found {
                        Some(f) => num(f.row.ut),
                        None => {
                            w.push(format!("topm: no {} run for top-{m} {s}", alg.label()));
                            ABSENT.into()
                        }
                    });
                }
                rows.push(row);
            }
            if rows.is_empty() {
                w.push("topm: no selected-expert runs".into());
            }
            (headers, rows)
        }
        TableKind::Alpha => {
            let alphas = [0.0, 1.0, 100.0];
            let mut headers = vec!["algorithm".to_string(), "metric".to_string()];
            headers.extend(alphas.iter().map(|a| format!("alpha={a}")));
            let algs: BTreeSet<&'static str> = runs
                .iter()
                .filter(|r| r.row.seuf && r.row.selection == Selection::Affinity)
                .map(|r| r.row.algorithm.label())
                .collect();
            let mut rows = Vec::new();
            for alg in Algorithm::ALL.into_iter().filter(|a| algs.contains(a.label())) {
                let found: Vec<Option<&RunRecord>> = alphas
                    .iter()
                    .map(|&a| {
                        let hit = pick(runs, &format!("{alg} alpha={a}"), w, |r| {
                            r.seuf && r.selection == Selection::Affinity && r.algorithm == alg && r.m == 1 && r.alpha == a
                        });
                        if hit.is_none() {
                            w.push(format!("alpha: no {} run for alpha={a}", alg.label()));
                        }
                        hit
                    })
                    .collect();
                for (metric, get) in [("fe", (|r: &ReportRow| r.fe) as fn(&ReportRow) -> f64), ("ut", |r: &ReportRow| r.ut)] {
                    let mut row = vec![alg.label().to_string(), metric.to_string()];
                    row.extend(found.iter().map(|f| f.map_or(ABSENT.to_string(), |f| num(get(&f.row)))));
                    rows.push(row);
                }
            }
            if rows.is_empty() {
                w.push("alpha: no selected-expert runs".into());
            }
            (headers, rows)
        }
        TableKind::Overlap => {
            let mut headers = vec!["step".to_string()];
            headers.extend(runs.iter().map(|r| r.row.method.clone()));
            let steps: BTreeSet<u64> = runs.iter().flat_map(|r| r.overlap.iter().map(|p| p.0)).collect();
            for r in runs.iter().filter(|r| r.overlap.is_empty()) {
                w.push(format!("overlap: {} has no evaluation curve", r.dir.display()));
            }
            let rows = steps
                .into_iter()
                .map(|s| {
                    let mut row = vec![s.to_string()];
                    row.extend(runs.iter().map(|r| {
                        r.overlap.iter().find(|p| p.0 == s).map_or(ABSENT.to_string(), |p| num(p.1))
                    }));
                    row
                })
                .collect();
            if runs.is_empty() {
                w.push("overlap: no runs".into());
            }
            (headers, rows)
        }
    };
    Table { headers, rows, warnings }
}
