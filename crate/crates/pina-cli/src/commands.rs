//! The run, accountant, and compare commands.

use crate::config::{load_config, parse_config};
use crate::error::{CliError, Result};
use crate::manifest::{ResolvedPrivacy, RunManifest};
use crate::output::{write_compare_csv, write_metrics_jsonl, write_summary_csv};
use pina::privacy::{calibrate_z, spent_budget, PrivacySpec};
use pina::sim::{run_experiment, ExperimentConfig, RoundMetrics};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Output directory: flag, then `PINA_OUTPUT_DIR`, then `./pina-out`.
pub fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("PINA_OUTPUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("pina-out"))
}

/// One privatized sketch per line: client id, retained indices and values,
/// and the cluster the server assigned it to.
fn write_sketch_dump(path: &Path, stage1: &pina::sim::Stage1Output) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for sketch in &stage1.sketches {
        let indices: Vec<usize> = sketch.entries.iter().map(|(i, _)| *i).collect();
        let values: Vec<f64> = sketch.entries.iter().map(|(_, v)| *v).collect();
        let line = serde_json::json!({
            "client_id": sketch.client_id,
            "dim": sketch.dim,
            "indices": indices,
            "values": values,
            "cluster": stage1.prototypes.assignment.get(&sketch.client_id),
        });
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn config_from_sources(
    config: Option<&Path>,
    from_manifest: Option<&Path>,
    overrides: &[String],
) -> Result<ExperimentConfig> {
    match (config, from_manifest) {
        (Some(path), None) => load_config(path, overrides),
        (None, Some(path)) => {
            let manifest = RunManifest::read(path)?;
            // Round-trip the embedded snapshot through TOML so overrides use
            // the same dotted-path machinery as config files.
            let text = toml::to_string(&manifest.config)
                .map_err(|e| CliError::runtime(format!("manifest snapshot: {e}")))?;
            parse_config(&text, overrides)
        }
        _ => Err(CliError::config(
            "give exactly one of --config or --from-manifest",
        )),
    }
}

pub fn cmd_run(
    config: Option<&Path>,
    from_manifest: Option<&Path>,
    overrides: &[String],
    out: Option<PathBuf>,
    dump_sketches: bool,
) -> Result<()> {
    let cfg = config_from_sources(config, from_manifest, overrides)?;
    let out_dir = resolve_out_dir(out);
    std::fs::create_dir_all(&out_dir)?;

    let start = Instant::now();
    let result = run_experiment(&cfg)?;
    let elapsed = start.elapsed().as_secs_f64();

    if dump_sketches {
        if cfg.algorithm != pina::sim::Algorithm::Pina {
            return Err(CliError::config(
                "--dump-sketches requires the pina algorithm (no initialization stage otherwise)",
            ));
        }
        // Stage 1 is deterministic, so replaying it reproduces the exact
        // sketches the run used.
        let ctx = pina::sim::SimContext::prepare(cfg.clone())?;
        let stage1 = pina::sim::run_stage1(&ctx)?;
        write_sketch_dump(&out_dir.join("sketches.jsonl"), &stage1)?;
    }

    let metrics_path = out_dir.join("metrics.jsonl");
    let summary_path = out_dir.join("summary.csv");
    write_metrics_jsonl(&metrics_path, &result.rounds)?;
    write_summary_csv(&summary_path, &result.rounds)?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        resolved: ResolvedPrivacy {
            noise_multiplier: result.resolved_z,
            delta: result.resolved_delta,
            stage1_clip_threshold: result.resolved_s_in,
        },
        stage1: result.stage1.clone(),
        metrics_path: "metrics.jsonl".to_string(),
        summary_path: "summary.csv".to_string(),
        wall_clock_seconds: elapsed,
    };
    manifest.write(&out_dir.join("manifest.json"))?;

    let last = result.rounds.last();
    println!(
        "{} seed {}: {} training rounds in {elapsed:.1}s -> {}",
        cfg.algorithm.name(),
        cfg.seed,
        result.rounds.len(),
        out_dir.display()
    );
    if let Some(s1) = &result.stage1 {
        println!(
            "  stage 1: {} sketches, clustering accuracy {:.3}",
            s1.sketch_count, s1.clustering_accuracy
        );
    }
    if let Some(last) = last {
        println!(
            "  final round: clustering accuracy {:.3}, mean test accuracy {:.3}, spent epsilon {}",
            last.clustering_accuracy,
            last.mean_test_accuracy,
            last.cumulative_epsilon
                .map(|e| format!("{e:.4}"))
                .unwrap_or_else(|| "n/a (noiseless)".to_string())
        );
    }
    Ok(())
}

pub struct AccountantArgs {
    pub eps: Option<f64>,
    pub z: Option<f64>,
    pub delta: Option<f64>,
    pub clients: usize,
    pub q: f64,
    pub rounds: u32,
    pub stage1_participations: u32,
    pub json: bool,
}

pub fn cmd_accountant(args: &AccountantArgs) -> Result<()> {
    let delta = args
        .delta
        .unwrap_or_else(|| PrivacySpec::default_delta(args.clients));
    if !(delta > 0.0 && delta < 1.0) {
        return Err(CliError::config(format!("delta {delta} out of (0, 1)")));
    }
    match (args.eps, args.z) {
        (Some(eps), None) => {
            let z = calibrate_z(eps, delta, args.q, args.rounds).map_err(|e| match e {
                pina::Error::Infeasible(msg) => CliError::runtime(msg),
                other => CliError::from(other),
            })?;
            if args.json {
                println!(
                    "{}",
                    serde_json::json!({
                        "mode": "calibrate",
                        "epsilon": eps,
                        "delta": delta,
                        "q": args.q,
                        "rounds": args.rounds,
                        "z": z,
                    })
                );
            } else {
                println!(
                    "calibrated noise multiplier z = {z:.6} \
                     (epsilon {eps}, delta {delta:.3e}, q {}, {} rounds)",
                    args.q, args.rounds
                );
            }
            Ok(())
        }
        (None, Some(z)) => {
            if !(z > 0.0) {
                return Err(CliError::config("z must be positive to spend budget"));
            }
            let spec = PrivacySpec {
                epsilon: f64::NAN,
                delta,
                q: args.q,
                t_in: 0,
                t_tr: args.rounds,
                s: 1.0,
                s_in: 1.0,
                z,
            };
            let eps = spent_budget(&spec, args.stage1_participations, args.rounds)?;
            if args.json {
                println!(
                    "{}",
                    serde_json::json!({
                        "mode": "spend",
                        "z": z,
                        "delta": delta,
                        "q": args.q,
                        "rounds": args.rounds,
                        "stage1_participations": args.stage1_participations,
                        "epsilon": eps,
                    })
                );
            } else {
                println!(
                    "spent budget epsilon = {eps:.6} \
                     (z {z}, delta {delta:.3e}, q {}, {} rounds, {} stage-1 releases)",
                    args.q, args.rounds, args.stage1_participations
                );
            }
            Ok(())
        }
        _ => Err(CliError::config("give exactly one of --eps or --z")),
    }
}

pub fn cmd_compare(
    config: &Path,
    algorithms: &[String],
    seeds: &[u64],
    overrides: &[String],
    out: Option<PathBuf>,
) -> Result<()> {
    if algorithms.is_empty() || seeds.is_empty() {
        return Err(CliError::config("need at least one algorithm and one seed"));
    }
    let out_dir = resolve_out_dir(out);
    std::fs::create_dir_all(&out_dir)?;

    let mut rows: Vec<(String, Vec<Vec<RoundMetrics>>)> = Vec::new();
    for algorithm in algorithms {
        // Parse the algorithm name early so typos fail before any run.
        let _: pina::sim::Algorithm = algorithm
            .parse()
            .map_err(|e: pina::Error| CliError::config(e.to_string()))?;
        let mut runs = Vec::new();
        for &seed in seeds {
            let mut all = overrides.to_vec();
            all.push(format!("algorithm=\"{algorithm}\""));
            all.push(format!("seed={seed}"));
            let cfg = load_config(config, &all)?;
            let result = run_experiment(&cfg)?;
            write_metrics_jsonl(
                &out_dir.join(format!("metrics_{algorithm}_{seed}.jsonl")),
                &result.rounds,
            )?;
            println!(
                "{algorithm} seed {seed}: final clustering accuracy {:.3}",
                result
                    .rounds
                    .last()
                    .map(|r| r.clustering_accuracy)
                    .unwrap_or(0.0)
            );
            runs.push(result.rounds);
        }
        rows.push((algorithm.clone(), runs));
    }
    let merged = out_dir.join("compare.csv");
    write_compare_csv(&merged, &rows)?;
    println!("merged comparison -> {}", merged.display());
    Ok(())
}
