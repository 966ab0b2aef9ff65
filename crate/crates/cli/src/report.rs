//! Markdown report and plot-ready `.dat` files from the CSVs of a run.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use recast_core::persist::write_atomic;

use crate::{CliError, CliResult};

/// Files the other commands produce; listed when a run directory is empty.
pub const KNOWN_INPUTS: [&str; 7] = [
    "reconstruction.csv",
    "loss_curve.csv",
    "diagnostics.csv",
    "similarity.csv",
    "accuracy.csv",
    "tasks.csv",
    "adapters.csv",
];

/// Rows shown per table before eliding the middle.
const PREVIEW_ROWS: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Parses a headered CSV. Every row must have the header's width.
pub fn parse_table(text: &str) -> CliResult<Table> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(CliError::usage("CSV has no header"));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_owned).collect());
    }
    Ok(Table { header, rows })
}

fn numeric_column(t: &Table, c: usize) -> Option<Vec<f64>> {
    let vals: Vec<f64> = t
        .rows
        .iter()
        .filter(|r| !r[c].is_empty())
        .map(|r| r[c].parse::<f64>().ok())
        .collect::<Option<_>>()?;
    (!vals.is_empty()).then_some(vals)
}

fn md_cell(s: &str) -> String {
    s.replace('|', "\\|")
}

fn md_row(cells: &[String]) -> String {
    let body: Vec<String> = cells.iter().map(|c| md_cell(c)).collect();
    format!("| {} |\n", body.join(" | "))
}

/// Whitespace-separated columns with a `#` header; blanks become `nan`.
pub fn to_dat(t: &Table) -> String {
    let cell = |s: &str| {
        if s.is_empty() {
            "nan".to_owned()
        } else {
            s.split_whitespace().collect::<Vec<_>>().join("_")
        }
    };
    let mut out = format!("# {}\n", t.header.iter().map(|h| cell(h)).collect::<Vec<_>>().join(" "));
    for r in &t.rows {
        out.push_str(&r.iter().map(|c| cell(c)).collect::<Vec<_>>().join(" "));
        out.push('\n');
    }
    out
}

/// One section per table, in the given order.
pub fn render_report(tables: &[(String, Table)]) -> String {
    let mut md = String::from("# Run report\n");
    for (name, t) in tables {
        let stem = name.trim_end_matches(".csv");
        let _ = write!(
            md,
            "\n## {name}\n\n{} rows, {} columns. Plot data: `{stem}.dat`.\n\n",
            t.rows.len(),
            t.header.len()
        );
        md.push_str(&md_row(&t.header));
        md.push_str(&format!("|{}\n", "---|".repeat(t.header.len())));
        let n = t.rows.len();
        if n <= PREVIEW_ROWS {
            t.rows.iter().for_each(|r| md.push_str(&md_row(r)));
        } else {
            let half = PREVIEW_ROWS / 2;
            t.rows[..half].iter().for_each(|r| md.push_str(&md_row(r)));
            let gap = vec!["…".to_owned(); t.header.len()];
            md.push_str(&md_row(&gap));
            t.rows[n - half..].iter().for_each(|r| md.push_str(&md_row(r)));
        }
        let stats: Vec<(usize, Vec<f64>)> =
            (0..t.header.len()).filter_map(|c| numeric_column(t, c).map(|v| (c, v))).collect();
        if !stats.is_empty() && n > 1 {
            md.push_str("\n| column | min | max | mean |\n|---|---|---|---|\n");
            for (c, v) in stats {
                let min = v.iter().copied().fold(f64::INFINITY, f64::min);
                let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                md.push_str(&md_row(&[t.header[c].clone(), min.to_string(), max.to_string(), mean.to_string()]));
            }
        }
    }
    md
}

pub fn cmd_report(run_dir: &Path, out: &Path, stdout: &mut dyn Write) -> CliResult {
    if !run_dir.is_dir() {
        return Err(CliError::usage(format!("run directory not found: {}", run_dir.display())));
    }
    let mut names: Vec<String> = fs::read_dir(run_dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    if names.is_empty() {
        return Err(CliError::usage(format!(
            "missing inputs in {}: no result CSVs (expected any of {})",
            run_dir.display(),
            KNOWN_INPUTS.join(", ")
        )));
    }
    names.sort();
    let mut tables = Vec::with_capacity(names.len());
    for name in names {
        let text = fs::read_to_string(run_dir.join(&name))?;
        let table = parse_table(&text).map_err(|e| CliError::usage(format!("{name}: {e}")))?;
        tables.push((name, table));
    }
    fs::create_dir_all(out)?;
    for (name, t) in &tables {
        write_atomic(&out.join(format!("{}.dat", name.trim_end_matches(".csv"))), to_dat(t).as_bytes())?;
    }
    write_atomic(&out.join("report.md"), render_report(&tables).as_bytes())?;
    writeln!(stdout, "sections={}", tables.len())?;
    Ok(())
}
