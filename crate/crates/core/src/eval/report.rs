//! Report emission: machine-readable summary tables and plot-data files.
//!
//! Everything written here is byte-deterministic for a given input: stable
//! column order, fixed float formatting in CSV, serde field order in JSONL.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::util::append_jsonl;

use super::stats::{RatioBin, SummaryStats};
use super::EvalError;

fn csv_field(value: &str) -> String {
    if value.contains([',', '"', '\n']) {
        format!("\"{}\"", value.replace('"', "\"\""))
    } else {
        value.to_string()
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `summary.csv`, `summary.jsonl` and one `plot_<task>.csv` per task
/// (x = countermeasure, y = failure rate, ci columns). Returns the written
/// paths. Re-emission over the same stats is byte-identical.
pub fn emit_summary(stats: &[SummaryStats], dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    if stats.is_empty() {
        return Err(EvalError::InvalidMatrix(
            "cannot emit a report from empty stats".into(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();

    let csv_path = dir.join("summary.csv");
    {
        let mut file = BufWriter::new(File::create(&csv_path).map_err(io_err(&csv_path))?);
        writeln!(
            file,
            "attacker,countermeasure,task,n,failures,errors,failure_rate,ci_low,ci_high"
        )
        .map_err(io_err(&csv_path))?;
        for row in stats {
            writeln!(
                file,
                "{},{},{},{},{},{},{:.6},{:.6},{:.6}",
                csv_field(&row.attacker),
                csv_field(&row.countermeasure),
                csv_field(&row.task),
                row.n,
                row.failures,
                row.errors,
                row.failure_rate,
                row.ci_low,
                row.ci_high
            )
            .map_err(io_err(&csv_path))?;
        }
        file.flush().map_err(io_err(&csv_path))?;
    }
    written.push(csv_path);

    let jsonl_path = dir.join("summary.jsonl");
    {
        let mut file = BufWriter::new(File::create(&jsonl_path).map_err(io_err(&jsonl_path))?);
        for row in stats {
            append_jsonl(&mut file, row).map_err(io_err(&jsonl_path))?;
        }
    }
    written.push(jsonl_path);

    let mut tasks: Vec<&str> = Vec::new();
    for row in stats {
        if !tasks.contains(&row.task.as_str()) {
            tasks.push(&row.task);
        }
    }
    for task in tasks {
        let plot_path = dir.join(format!("plot_{task}.csv"));
        let mut file = BufWriter::new(File::create(&plot_path).map_err(io_err(&plot_path))?);
        writeln!(file, "x,attacker,y,ci_low,ci_high").map_err(io_err(&plot_path))?;
        for row in stats.iter().filter(|r| r.task == task) {
            writeln!(
                file,
                "{},{},{:.6},{:.6},{:.6}",
                csv_field(&row.countermeasure),
                csv_field(&row.attacker),
                row.failure_rate,
                row.ci_low,
                row.ci_high
            )
            .map_err(io_err(&plot_path))?;
        }
        file.flush().map_err(io_err(&plot_path))?;
        written.push(plot_path);
    }
    Ok(written)
}

/// Write the intrusiveness table as `intrusiveness.csv`.
pub fn emit_intrusiveness(bins: &[RatioBin], dir: &Path) -> Result<PathBuf, EvalError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("intrusiveness.csv");
    let mut file = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    writeln!(file, "bin,lo,hi,n,failures,failure_rate,ci_low,ci_high").map_err(io_err(&path))?;
    for bin in bins {
        writeln!(
            file,
            "{},{},{},{},{},{:.6},{:.6},{:.6}",
            csv_field(&bin.label),
            bin.lo,
            bin.hi,
            bin.n,
            bin.failures,
            bin.failure_rate,
            bin.ci_low,
            bin.ci_high
        )
        .map_err(io_err(&path))?;
    }
    file.flush().map_err(io_err(&path))?;
    Ok(path)
}

/// Render the summary as an aligned text table for terminal output.
pub fn format_summary_table(stats: &[SummaryStats]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:<18} {:<14} {:>5} {:>9} {:>7} {:>13} {:>17}\n",
        "attacker", "countermeasure", "task", "n", "failures", "errors", "failure_rate", "95% CI"
    ));
    for row in stats {
        out.push_str(&format!(
            "{:<16} {:<18} {:<14} {:>5} {:>9} {:>7} {:>13.4} [{:.4}, {:.4}]\n",
            row.attacker,
            row.countermeasure,
            row.task,
            row.n,
            row.failures,
            row.errors,
            row.failure_rate,
            row.ci_low,
            row.ci_high
        ));
    }
    out
}
