//! Metrics serialization: JSONL per-round records and CSV summaries.

use crate::error::{CliError, Result};
use pina::sim::RoundMetrics;
use std::io::Write;
use std::path::Path;

/// One JSON object per round, newline-delimited.
pub fn write_metrics_jsonl(path: &Path, rounds: &[RoundMetrics]) -> Result<()> {
    let mut out = Vec::new();
    for round in rounds {
        serde_json::to_writer(&mut out, round)
            .map_err(|e| CliError::runtime(format!("metrics serialization: {e}")))?;
        out.push(b'\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Spreadsheet-friendly per-round summary.
pub fn write_summary_csv(path: &Path, rounds: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::runtime(e.to_string()))?;
    w.write_record([
        "round",
        "phase",
        "sampled_clients",
        "clustering_accuracy",
        "mean_test_accuracy",
        "cumulative_epsilon",
    ])
    .map_err(|e| CliError::runtime(e.to_string()))?;
    for r in rounds {
        let eps = r
            .cumulative_epsilon
            .map(|v| v.to_string())
            .unwrap_or_default();
        w.write_record([
            r.round.to_string(),
            r.phase.clone(),
            r.sampled_clients.to_string(),
            r.clustering_accuracy.to_string(),
            r.mean_test_accuracy.to_string(),
            eps,
        ])
        .map_err(|e| CliError::runtime(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// One row per (algorithm, training round) with mean and population std of
/// the clustering and classification accuracy across seeds.
pub fn write_compare_csv(
    path: &Path,
    rows: &[(String, Vec<Vec<RoundMetrics>>)],
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(
        w,
        "algorithm,round,clustering_accuracy_mean,clustering_accuracy_std,\
         test_accuracy_mean,test_accuracy_std"
    )?;
    let stats = |xs: &[f64]| -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    for (algorithm, runs) in rows {
        let rounds = runs.iter().map(Vec::len).min().unwrap_or(0);
        for r in 0..rounds {
            let clustering: Vec<f64> = runs.iter().map(|m| m[r].clustering_accuracy).collect();
            let test: Vec<f64> = runs.iter().map(|m| m[r].mean_test_accuracy).collect();
            let (cm, cs) = stats(&clustering);
            let (tm, ts) = stats(&test);
            writeln!(w, "{algorithm},{},{cm},{cs},{tm},{ts}", r + 1)?;
        }
    }
    w.flush()?;
    Ok(())
}
