//! Result rows, CSV persistence, and the summary table.
//!
//! The results file is UTF-8 CSV with a header row; floats are written
//! with six decimals so write -> read -> write is stable. Timing is
//! deliberately not part of the file: with a fixed master seed the file is
//! bitwise deterministic, which would not survive wall-clock columns.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

pub const RESULTS_HEADER: &str = "arch,init,aggregation,seed,round,accuracy,balanced_accuracy,gap_to_central,drift,bn_mismatch,cumulative_bytes,status";

/// One measured round of one grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub arch: String,
    pub init: String,
    pub aggregation: String,
    pub seed: u64,
    pub round: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    /// Federated minus centralized balanced accuracy at the same round.
    pub gap_to_central: f64,
    pub drift: f64,
    pub bn_mismatch: Option<f64>,
    pub cumulative_bytes: u64,
    /// "ok", or "error: ..." when the cell failed.
    pub status: String,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

fn sanitize(field: &str) -> String {
    field.replace([',', '\n', '\r'], ";")
}

/// Writes `rows` as CSV; an empty list produces a header-only file.
pub fn write_results(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        let bn = match r.bn_mismatch {
            Some(v) => format!("{v:.6}"),
            None => String::new(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{}\n",
            sanitize(&r.arch),
            sanitize(&r.init),
            sanitize(&r.aggregation),
            r.seed,
            r.round,
            r.accuracy,
            r.balanced_accuracy,
            r.gap_to_central,
            r.drift,
            bn,
            r.cumulative_bytes,
            sanitize(&r.status),
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(format!("writing results to {}", path.display()), e))
}

fn parse_field<T: std::str::FromStr>(raw: &str, what: &str, path: &Path, line: usize) -> Result<T> {
    raw.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("cannot parse {what} from `{raw}`"),
    })
}

/// Reads a results file written by [`write_results`].
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading results from {}", path.display()), e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == RESULTS_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("unexpected header `{header}`"),
            })
        }
        None => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "empty file".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("expected 12 fields, found {}", fields.len()),
            });
        }
        let bn_mismatch = if fields[9].is_empty() {
            None
        } else {
            Some(parse_field(fields[9], "bn_mismatch", path, lineno)?)
        };
        rows.push(ResultRow {
            arch: fields[0].to_string(),
            init: fields[1].to_string(),
            aggregation: fields[2].to_string(),
            seed: parse_field(fields[3], "seed", path, lineno)?,
            round: parse_field(fields[4], "round", path, lineno)?,
            accuracy: parse_field(fields[5], "accuracy", path, lineno)?,
            balanced_accuracy: parse_field(fields[6], "balanced_accuracy", path, lineno)?,
            gap_to_central: parse_field(fields[7], "gap_to_central", path, lineno)?,
            drift: parse_field(fields[8], "drift", path, lineno)?,
            bn_mismatch,
            cumulative_bytes: parse_field(fields[10], "cumulative_bytes", path, lineno)?,
            status: fields[11].to_string(),
        });
    }
    Ok(rows)
}

/// Final-round metrics of one grid cell, averaged across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub arch: String,
    pub init: String,
    pub aggregation: String,
    pub seeds: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub gap_to_central: f64,
}

/// Collapses rows to per-cell summaries: the last round of every seed,
/// averaged across seeds. Error rows are skipped. Output order and the
/// seed-summation order are canonical, so summaries are identical no
/// matter how the rows were ordered.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    use std::collections::BTreeMap;
    // (cell) -> seed -> best (latest-round) row
    let mut cells: BTreeMap<(String, String, String), BTreeMap<u64, &ResultRow>> = BTreeMap::new();
    for row in rows.iter().filter(|r| r.is_ok()) {
        let key = (row.arch.clone(), row.init.clone(), row.aggregation.clone());
        let per_seed = cells.entry(key).or_default();
        match per_seed.get(&row.seed) {
            Some(existing) if existing.round >= row.round => {}
            _ => {
                per_seed.insert(row.seed, row);
            }
        }
    }
    let mut out = Vec::with_capacity(cells.len());
    for ((arch, init, aggregation), per_seed) in cells {
        let n = per_seed.len() as f64;
        let mut acc = 0.0;
        let mut bal = 0.0;
        let mut gap = 0.0;
        for row in per_seed.values() {
            acc += row.accuracy;
            bal += row.balanced_accuracy;
            gap += row.gap_to_central;
        }
        out.push(SummaryRow {
            arch,
            init,
            aggregation,
            seeds: per_seed.len(),
            accuracy: acc / n,
            balanced_accuracy: bal / n,
            gap_to_central: gap / n,
        });
    }
    out
}

/// Formats summaries as an aligned table; each cell shows the mean
/// balanced accuracy in percent with the gap to the centralized model in
/// parentheses, arrow giving the direction.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    let headers = [
        "arch",
        "init",
        "aggregation",
        "balanced_acc (gap)",
        "accuracy",
        "seeds",
    ];
    let mut table: Vec<[String; 6]> = Vec::with_capacity(rows.len());
    for r in rows {
        let arrow = if r.gap_to_central >= 0.0 {
            '\u{2191}'
        } else {
            '\u{2193}'
        };
        table.push([
            r.arch.clone(),
            r.init.clone(),
            r.aggregation.clone(),
            format!(
                "{:.2} ({} {:.2})",
                100.0 * r.balanced_accuracy,
                arrow,
                100.0 * r.gap_to_central.abs()
            ),
            format!("{:.2}", 100.0 * r.accuracy),
            r.seeds.to_string(),
        ]);
    }
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in &table {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let emit = |out: &mut String, cells: &[String]| {
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            out.push_str(&format!("{:<width$}", cell, width = widths[i]));
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    emit(
        &mut out,
        &headers.iter().map(|h| h.to_string()).collect::<Vec<_>>(),
    );
    for row in &table {
        emit(&mut out, row);
    }
    out
}
