//! Aggregation: failure rates with Wilson score intervals, and the
//! intrusiveness (length-ratio) binning.

use serde::{Deserialize, Serialize};

use crate::harness::AttackOutcome;
use crate::SCHEMA_VERSION;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// Wilson score interval for `failures` out of `n` at 95% confidence.
/// Behaves sensibly at the 0 and 1 endpoints where the interesting
/// results live, unlike the Wald interval.
pub fn wilson_interval(failures: u64, n: u64) -> (f64, f64) {
    assert!(n > 0, "wilson interval needs n > 0");
    assert!(failures <= n, "failures cannot exceed n");
    let n = n as f64;
    let p = failures as f64 / n;
    let z2 = Z_95 * Z_95;
    let denom = 1.0 + z2 / n;
    let center = p + z2 / (2.0 * n);
    let margin = Z_95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    (
        ((center - margin) / denom).clamp(0.0, 1.0),
        ((center + margin) / denom).clamp(0.0, 1.0),
    )
}

/// Aggregated attacker-failure rate for one (attacker, countermeasure,
/// task) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    #[serde(rename = "v")]
    pub version: u32,
    pub attacker: String,
    pub countermeasure: String,
    pub task: String,
    /// Judged outcomes in the cell; errors are excluded from `n` and
    /// reported separately.
    pub n: u64,
    pub failures: u64,
    pub errors: u64,
    pub failure_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Group outcomes into cells (first-appearance order, which is the matrix
/// declaration order) and compute per-cell failure rates with 95% Wilson
/// intervals. Cells containing only errors are omitted with a warning.
pub fn summarize(outcomes: &[AttackOutcome]) -> Vec<SummaryStats> {
    struct Cell {
        attacker: String,
        countermeasure: String,
        task: String,
        n: u64,
        failures: u64,
        errors: u64,
    }
    let mut order: Vec<String> = Vec::new();
    let mut cells: std::collections::HashMap<String, Cell> = std::collections::HashMap::new();
    for outcome in outcomes {
        let key = format!(
            "{}|{}|{}",
            outcome.attacker,
            outcome.countermeasure,
            outcome.task.as_str()
        );
        let cell = cells.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            Cell {
                attacker: outcome.attacker.clone(),
                countermeasure: outcome.countermeasure.clone(),
                task: outcome.task.as_str().to_string(),
                n: 0,
                failures: 0,
                errors: 0,
            }
        });
        if outcome.error.is_some() {
            cell.errors += 1;
        } else {
            cell.n += 1;
            if outcome.attack_failed == Some(true) {
                cell.failures += 1;
            }
        }
    }

    let mut stats = Vec::with_capacity(order.len());
    for key in order {
        let cell = &cells[&key];
        if cell.n == 0 {
            log::warn!(
                "cell {} has no judged outcomes ({} errors); omitted from the summary",
                key,
                cell.errors
            );
            continue;
        }
        let (ci_low, ci_high) = wilson_interval(cell.failures, cell.n);
        stats.push(SummaryStats {
            version: SCHEMA_VERSION,
            attacker: cell.attacker.clone(),
            countermeasure: cell.countermeasure.clone(),
            task: cell.task.clone(),
            n: cell.n,
            failures: cell.failures,
            errors: cell.errors,
            failure_rate: cell.failures as f64 / cell.n as f64,
            ci_low,
            ci_high,
        });
    }
    stats
}

/// Default length-ratio bin edges; the interesting comparisons are below
/// 10x, between 10-50x, 50-100x, and above 100x.
pub const DEFAULT_RATIO_BIN_EDGES: [f64; 3] = [10.0, 50.0, 100.0];

/// One row of the intrusiveness table: defenses whose length ratio falls
/// in `[lo, hi)` and the attacker-failure rate among them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioBin {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
    pub n: u64,
    pub failures: u64,
    pub failure_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Bin judged outcomes that carry a defended document by length ratio and
/// compute per-bin failure rates. Empty bins are omitted.
pub fn intrusiveness_analysis(outcomes: &[AttackOutcome], edges: &[f64]) -> Vec<RatioBin> {
    assert!(
        edges.windows(2).all(|w| w[0] < w[1]),
        "bin edges must be increasing"
    );
    let mut bounds: Vec<(f64, f64)> = Vec::with_capacity(edges.len() + 1);
    let mut lo = 0.0;
    for &edge in edges {
        bounds.push((lo, edge));
        lo = edge;
    }
    bounds.push((lo, f64::INFINITY));

    let mut bins: Vec<(u64, u64)> = vec![(0, 0); bounds.len()];
    for outcome in outcomes {
        let (Some(ratio), None) = (outcome.length_ratio, &outcome.error) else {
            continue;
        };
        let idx = bounds
            .iter()
            .position(|&(lo, hi)| ratio >= lo && ratio < hi)
            .expect("bounds cover (0, inf)");
        bins[idx].0 += 1;
        if outcome.attack_failed == Some(true) {
            bins[idx].1 += 1;
        }
    }

    bounds
        .iter()
        .zip(&bins)
        .filter(|(_, &(n, _))| n > 0)
        .map(|(&(lo, hi), &(n, failures))| {
            let (ci_low, ci_high) = wilson_interval(failures, n);
            let label = if lo == 0.0 {
                format!("<{hi}")
            } else if hi.is_infinite() {
                format!(">{lo}")
            } else {
                format!("{lo}-{hi}")
            };
            RatioBin {
                label,
                lo,
                hi,
                n,
                failures,
                failure_rate: failures as f64 / n as f64,
                ci_low,
                ci_high,
            }
        })
        .collect()
}
