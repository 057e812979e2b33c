//! End-to-end round loops.
//!
//! The protocol runs `t = 1..=t_in` initialization rounds (clients train the
//! rank-1 adapter slice and release privatized sketches; the server clusters
//! the pool once afterwards) followed by `t_tr` training rounds (loss-based
//! cluster identification, local training, stacked secure-sum aggregation,
//! and phase-dispatched update scaling). Baselines reuse the same streams so
//! paired-seed comparisons are meaningful.
//!
//! Every random draw comes from a stream keyed by `(seed, entity, round)`;
//! client-level work runs under rayon but results are collected in client
//! order, so metrics are bit-identical for any worker count.

use super::config::{Algorithm, ExperimentConfig};
use super::metrics::{adjusted_rand_index, clustering_accuracy};
use super::population::{generate_population, generate_public_set, sample_round, Population};
use crate::aggregate::{
    aggregate_round, apply_round, build_stacked_update, cluster_normality, identify_cluster,
    normality_scale, normalize_updates, scaling_phase, ClusterModelSet, ScalingPhase,
    StackedClientUpdate,
};
use crate::error::{Error, Result};
use crate::model::{
    accuracy, local_train, model_delta, ClientDataset, FrozenBackbone, TrainConfig, SEG_HEAD_B,
    SEG_HEAD_W,
};
use crate::numeric::{ParamVector, RngStream, StreamId, StreamKind};
use crate::privacy::{local_dp, spent_budget, PrivacySpec};
use crate::sketch::{
    filter_top2, kmeans_cluster, materialize_cluster_models, privatize_sketch, PrototypeSet,
    Sketch,
};
use crate::stats;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

// Stream derivations are part of the reproducibility contract: a re-run (or
// an external reimplementation of one loop) that derives the same ids sees
// the same draws.

pub fn round_sample_stream(seed: u64, round: u32) -> RngStream {
    RngStream::derive(seed, StreamId::new(StreamKind::RoundSample, 0, u64::from(round)))
}

pub fn client_train_stream(seed: u64, client: usize, round: u32) -> RngStream {
    RngStream::derive(
        seed,
        StreamId::new(StreamKind::ClientTrain, client as u64, u64::from(round)),
    )
}

pub fn client_noise_stream(seed: u64, client: usize, round: u32) -> RngStream {
    RngStream::derive(
        seed,
        StreamId::new(StreamKind::ClientNoise, client as u64, u64::from(round)),
    )
}

pub fn subsample_stream(seed: u64, cluster: usize, round: u32) -> RngStream {
    RngStream::derive(
        seed,
        StreamId::new(StreamKind::Subsample, cluster as u64, u64::from(round)),
    )
}

pub fn kmeans_stream(seed: u64) -> RngStream {
    RngStream::derive(seed, StreamId::new(StreamKind::Kmeans, 0, 0))
}

pub fn server_init_stream(seed: u64, cluster: usize) -> RngStream {
    RngStream::derive(seed, StreamId::new(StreamKind::ServerInit, cluster as u64, 0))
}

/// Per-round record emitted by the training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// Global round index (initialization rounds included for `pina`).
    pub round: u32,
    /// Scaling rule used: `normalize`, `normality`, or `plain` (no scaling).
    pub phase: String,
    pub sampled_clients: usize,
    /// Identification accuracy over all clients at round start, under the
    /// best cluster-label permutation.
    pub clustering_accuracy: f64,
    /// Post-update test accuracy per ground-truth cluster, averaging each
    /// client's identified model on its cluster's held-out set.
    pub per_cluster_test_accuracy: Vec<f64>,
    pub mean_test_accuracy: f64,
    /// Aggregate norms per cluster before and after scaling.
    pub update_norms_pre: Vec<f64>,
    pub update_norms_post: Vec<f64>,
    /// Shapiro-Wilk statistic per cluster; only set in the normality phase.
    pub shapiro_w: Vec<Option<f64>>,
    /// Total spent budget after this round; `None` for noiseless runs.
    pub cumulative_epsilon: Option<f64>,
}

/// Outcome of the initialization stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub sketch_count: usize,
    pub rounds: u32,
    /// Sketch-assignment accuracy vs. ground truth over sketched clients.
    pub clustering_accuracy: f64,
    pub adjusted_rand_index: f64,
}

/// Full result of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub resolved_z: f64,
    pub resolved_delta: f64,
    pub resolved_s_in: f64,
    pub stage1: Option<Stage1Summary>,
    pub rounds: Vec<RoundMetrics>,
}

/// Prepared inputs shared by all round loops.
pub struct SimContext {
    pub config: ExperimentConfig,
    pub spec: PrivacySpec,
    pub backbone: Arc<FrozenBackbone>,
    pub base: ParamVector,
    pub population: Population,
}

impl SimContext {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.resolve_privacy()?;
        let backbone = Arc::new(FrozenBackbone::generate(config.model_spec(), config.seed)?);
        let mut base = backbone.init_params(config.seed);
        if config.pretrain_epochs > 0 {
            // Head warm-up on pooled public data; the adapter keeps its
            // zero-start so fine-tuning measures adaptation, not class
            // structure. The warmed-up base is what every client receives.
            let pool = generate_public_set(
                &config.population,
                config.seed,
                config.pretrain_samples,
            )?;
            let data = ClientDataset::new(pool, 0)?;
            let warmup = TrainConfig {
                epochs: config.pretrain_epochs,
                batch_size: config.train.batch_size,
                learning_rate: config.train.learning_rate,
            };
            let mut stream =
                RngStream::derive(config.seed, StreamId::new(StreamKind::Pretrain, 0, 1));
            base = local_train(
                &backbone,
                &base,
                &[SEG_HEAD_W, SEG_HEAD_B],
                &data,
                &warmup,
                &mut stream,
            )?;
        }
        let population = generate_population(&config.population, config.seed)?;
        Ok(Self {
            config,
            spec,
            backbone,
            base,
            population,
        })
    }

    fn stage2_mask(&self) -> Vec<&'static str> {
        self.backbone.spec.stage2_mask()
    }
}

/// Initialization stage: sampled clients (at most once each) train the
/// rank-1 adapter slice from the shared base model and release privatized
/// sketches; after the last round the pooled sketches are clustered and
/// materialized into `C` cluster models.
pub struct Stage1Output {
    pub sketches: Vec<Sketch>,
    pub prototypes: PrototypeSet,
    pub models: ClusterModelSet,
    pub summary: Stage1Summary,
}

pub fn run_stage1(ctx: &SimContext) -> Result<Stage1Output> {
    let cfg = &ctx.config;
    let spec = &ctx.spec;
    let clusters = cfg.effective_clusters();
    let k_all = ctx.population.num_clients();
    let mask = ctx.backbone.spec.stage1_mask();
    let mut sketched = vec![false; k_all];
    let mut sketches: Vec<Sketch> = Vec::new();
    for t in 1..=spec.t_in {
        let sampled = sample_round(k_all, spec.q, &mut round_sample_stream(cfg.seed, t));
        let fresh: Vec<usize> = sampled.into_iter().filter(|&i| !sketched[i]).collect();
        let new_sketches: Vec<Sketch> = fresh
            .par_iter()
            .map(|&i| -> Result<Sketch> {
                let trained = local_train(
                    &ctx.backbone,
                    &ctx.base,
                    &mask,
                    &ctx.population.clients[i],
                    &cfg.train,
                    &mut client_train_stream(cfg.seed, i, t),
                )?;
                let delta = model_delta(&ctx.base, &trained)?;
                let sub = delta.extract_segments(&mask)?;
                let sketch = filter_top2(&sub, i);
                privatize_sketch(
                    &sketch,
                    spec.z,
                    spec.s_in,
                    &mut client_noise_stream(cfg.seed, i, t),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        for s in &new_sketches {
            sketched[s.client_id] = true;
        }
        sketches.extend(new_sketches);
    }
    if sketches.len() < clusters {
        return Err(Error::NotEnough {
            need: clusters,
            got: sketches.len(),
        });
    }
    let prototypes = kmeans_cluster(&sketches, clusters, &mut kmeans_stream(cfg.seed))?;
    let models = materialize_cluster_models(&prototypes, &ctx.backbone, &ctx.base)?;

    let (pred, truth): (Vec<usize>, Vec<usize>) = prototypes
        .assignment
        .iter()
        .map(|(&client, &cluster)| (cluster, ctx.population.clients[client].truth_cluster))
        .unzip();
    let summary = Stage1Summary {
        sketch_count: sketches.len(),
        rounds: spec.t_in,
        clustering_accuracy: clustering_accuracy(&pred, &truth),
        adjusted_rand_index: adjusted_rand_index(&pred, &truth),
    };
    Ok(Stage1Output {
        sketches,
        prototypes,
        models,
        summary,
    })
}

/// Randomly perturbed initial cluster models: base model plus Gaussian
/// noise on the stage-1 segment, per-coordinate std `scale * S / sqrt(dim)`.
pub fn random_init_models(ctx: &SimContext) -> Result<ClusterModelSet> {
    let cfg = &ctx.config;
    let mask = ctx.backbone.spec.stage1_mask();
    let dim = ctx.backbone.spec.stage1_dim();
    let std = cfg.random_init_scale * ctx.spec.s / (dim as f64).sqrt();
    let models = (0..cfg.effective_clusters())
        .map(|i| {
            let mut m = ctx.base.clone();
            let shift = server_init_stream(cfg.seed, i).gaussian_vec(dim, std);
            m.add_into_segments(&mask, &shift)?;
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    ClusterModelSet::new(ctx.backbone.clone(), models)
}

/// Arbitrary restart initialization for the IFCA baseline: each cluster
/// model perturbs the whole trainable vector at weight scale
/// (`scale / sqrt(h)` per coordinate), the way restart-based clustered FL
/// seeds its models when no privileged data is available.
pub fn restart_init_models(ctx: &SimContext) -> Result<ClusterModelSet> {
    let cfg = &ctx.config;
    let mask = ctx.stage2_mask();
    let dim: usize = ctx
        .backbone
        .layout()
        .segments()
        .iter()
        .filter(|s| mask.contains(&s.name.as_str()))
        .map(|s| s.len)
        .sum();
    let std = cfg.random_init_scale / (ctx.backbone.spec.hidden_dim as f64).sqrt();
    let models = (0..cfg.effective_clusters())
        .map(|i| {
            let mut m = ctx.base.clone();
            let shift = server_init_stream(cfg.seed, i).gaussian_vec(dim, std);
            m.add_into_segments(&mask, &shift)?;
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    ClusterModelSet::new(ctx.backbone.clone(), models)
}

fn identify_all(ctx: &SimContext, models: &ClusterModelSet) -> Result<Vec<usize>> {
    ctx.population
        .clients
        .par_iter()
        .map(|data| identify_cluster(models, data))
        .collect()
}

/// Post-round test accuracy: each client evaluates its identified cluster
/// model on its ground-truth cluster's held-out set.
fn test_accuracies(
    ctx: &SimContext,
    models: &ClusterModelSet,
    assignments: &[usize],
) -> (Vec<f64>, f64) {
    let c = models.num_clusters();
    let c_true = ctx.population.test_sets.len();
    let table: Vec<Vec<f64>> = (0..c)
        .map(|m| {
            (0..c_true)
                .map(|t| accuracy(&ctx.backbone, models.model(m), &ctx.population.test_sets[t]))
                .collect()
        })
        .collect();
    let mut per_cluster = vec![0.0; c_true];
    let mut counts = vec![0usize; c_true];
    let mut total = 0.0;
    for (client, &sel) in assignments.iter().enumerate() {
        let truth = ctx.population.clients[client].truth_cluster;
        let acc = table[sel][truth];
        per_cluster[truth] += acc;
        counts[truth] += 1;
        total += acc;
    }
    for (acc, n) in per_cluster.iter_mut().zip(&counts) {
        if *n > 0 {
            *acc /= *n as f64;
        }
    }
    (per_cluster, total / assignments.len() as f64)
}

fn budget_option(spec: &PrivacySpec, stage1: u32, stage2: u32) -> Result<Option<f64>> {
    let eps = spent_budget(spec, stage1, stage2)?;
    Ok(eps.is_finite().then_some(eps))
}

fn phase_label(phase: ScalingPhase) -> &'static str {
    match phase {
        ScalingPhase::Normalize => "normalize",
        ScalingPhase::Normality => "normality",
    }
}

/// Training-stage rounds with secure-sum aggregation and scaling. Rounds run
/// at global indices `t_offset + 1 ..= t_offset + t_tr`; the first `t_no` of
/// them use norm equalization, the rest normality scaling.
pub fn run_stage2(
    ctx: &SimContext,
    models: &mut ClusterModelSet,
    stage1_participations: u32,
    t_offset: u32,
) -> Result<Vec<RoundMetrics>> {
    let cfg = &ctx.config;
    let spec = &ctx.spec;
    let clusters = models.num_clusters();
    let k_all = ctx.population.num_clients();
    let truth = ctx.population.truth();
    let mut out = Vec::with_capacity(spec.t_tr as usize);
    for r in 1..=spec.t_tr {
        let t = t_offset + r;
        let sampled = sample_round(k_all, spec.q, &mut round_sample_stream(cfg.seed, t));
        let assignments = identify_all(ctx, models)?;
        let mask = ctx.stage2_mask();
        let updates: Vec<StackedClientUpdate> = sampled
            .par_iter()
            .map(|&i| -> Result<StackedClientUpdate> {
                let sel = assignments[i];
                let before = models.model(sel);
                let trained = local_train(
                    &ctx.backbone,
                    before,
                    &mask,
                    &ctx.population.clients[i],
                    &cfg.train,
                    &mut client_train_stream(cfg.seed, i, t),
                )?;
                let delta = model_delta(before, &trained)?;
                build_stacked_update(sel, delta, clusters)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut noise_streams: Vec<RngStream> = sampled
            .iter()
            .map(|&i| client_noise_stream(cfg.seed, i, t))
            .collect();
        let z_eff = match cfg.virtual_cohort {
            Some(v) => spec.z * sampled.len() as f64 / v as f64,
            None => spec.z,
        };
        let aggregates = aggregate_round(&updates, z_eff, spec.s, &mut noise_streams)?;
        let norms_pre: Vec<f64> = aggregates.iter().map(ParamVector::l2_norm).collect();
        let phase = scaling_phase(t, t_offset, cfg.t_no);
        let (scaled, shapiro) = match phase {
            ScalingPhase::Normalize => (normalize_updates(&aggregates), vec![None; clusters]),
            ScalingPhase::Normality => {
                let mut streams: Vec<RngStream> = (0..clusters)
                    .map(|i| subsample_stream(cfg.seed, i, t))
                    .collect();
                let reports = cluster_normality(&aggregates, stats::MAX_SAMPLE, &mut streams)?;
                let scaled = normality_scale(&aggregates, &reports)?;
                let ws = reports.iter().map(|rep| Some(rep.w)).collect();
                (scaled, ws)
            }
        };
        let norms_post: Vec<f64> = scaled.iter().map(ParamVector::l2_norm).collect();
        apply_round(models, &scaled)?;
        let (per_cluster_acc, mean_acc) = test_accuracies(ctx, models, &assignments);
        out.push(RoundMetrics {
            round: t,
            phase: phase_label(phase).to_string(),
            sampled_clients: sampled.len(),
            clustering_accuracy: clustering_accuracy(&assignments, &truth),
            per_cluster_test_accuracy: per_cluster_acc,
            mean_test_accuracy: mean_acc,
            update_norms_pre: norms_pre,
            update_norms_post: norms_post,
            shapiro_w: shapiro,
            cumulative_epsilon: budget_option(spec, stage1_participations, r)?,
        });
    }
    Ok(out)
}

/// IFCA with per-client local DP: clients identify and train as in the
/// training stage, but each noised update is released individually and the
/// server averages per selected cluster. No secure sum, no update scaling.
fn run_ifca(ctx: &SimContext, models: &mut ClusterModelSet) -> Result<Vec<RoundMetrics>> {
    let cfg = &ctx.config;
    let spec = &ctx.spec;
    let clusters = models.num_clusters();
    let k_all = ctx.population.num_clients();
    let truth = ctx.population.truth();
    let mut out = Vec::with_capacity(spec.t_tr as usize);
    for t in 1..=spec.t_tr {
        let sampled = sample_round(k_all, spec.q, &mut round_sample_stream(cfg.seed, t));
        let assignments = identify_all(ctx, models)?;
        let mask = ctx.stage2_mask();
        let releases: Vec<(usize, ParamVector)> = sampled
            .par_iter()
            .map(|&i| -> Result<(usize, ParamVector)> {
                let sel = assignments[i];
                let trained = local_train(
                    &ctx.backbone,
                    models.model(sel),
                    &mask,
                    &ctx.population.clients[i],
                    &cfg.train,
                    &mut client_train_stream(cfg.seed, i, t),
                )?;
                let delta = model_delta(models.model(sel), &trained)?;
                let noisy = local_dp(&delta, spec.z, spec.s, &mut client_noise_stream(cfg.seed, i, t))?;
                Ok((sel, noisy))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut means: Vec<ParamVector> = (0..clusters)
            .map(|_| ParamVector::zeros(ctx.base.layout().clone()))
            .collect();
        let mut counts = vec![0usize; clusters];
        for (sel, noisy) in &releases {
            means[*sel].add_scaled_assign(noisy, 1.0)?;
            counts[*sel] += 1;
        }
        for (mean, n) in means.iter_mut().zip(&counts) {
            if *n > 0 {
                *mean = mean.scale(1.0 / *n as f64);
            }
        }
        let norms: Vec<f64> = means.iter().map(ParamVector::l2_norm).collect();
        apply_round(models, &means)?;
        let (per_cluster_acc, mean_acc) = test_accuracies(ctx, models, &assignments);
        out.push(RoundMetrics {
            round: t,
            phase: "plain".to_string(),
            sampled_clients: sampled.len(),
            clustering_accuracy: clustering_accuracy(&assignments, &truth),
            per_cluster_test_accuracy: per_cluster_acc,
            mean_test_accuracy: mean_acc,
            update_norms_pre: norms.clone(),
            update_norms_post: norms,
            shapiro_w: vec![None; clusters],
            cumulative_epsilon: budget_option(spec, 0, t)?,
        });
    }
    Ok(out)
}

/// Runs the configured algorithm end to end inside a worker pool of
/// `config.workers` threads (0 = all cores); results are identical for any
/// worker count.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let ctx = SimContext::prepare(config.clone())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;
    pool.install(|| {
        let (stage1, rounds) = match ctx.config.algorithm {
            Algorithm::Pina => {
                let stage1 = run_stage1(&ctx)?;
                let mut models = stage1.models;
                let rounds = run_stage2(&ctx, &mut models, 1, ctx.spec.t_in)?;
                (Some(stage1.summary), rounds)
            }
            Algorithm::PinaRandomInit => {
                let mut models = random_init_models(&ctx)?;
                (None, run_stage2(&ctx, &mut models, 0, 0)?)
            }
            Algorithm::Fedavg => {
                let mut models =
                    ClusterModelSet::new(ctx.backbone.clone(), vec![ctx.base.clone()])?;
                (None, run_stage2(&ctx, &mut models, 0, 0)?)
            }
            Algorithm::IfcaLdp => {
                let mut models = restart_init_models(&ctx)?;
                (None, run_ifca(&ctx, &mut models)?)
            }
        };
        Ok(ExperimentResult {
            algorithm: ctx.config.algorithm,
            seed: ctx.config.seed,
            resolved_z: ctx.spec.z,
            resolved_delta: ctx.spec.delta,
            resolved_s_in: ctx.spec.s_in,
            stage1,
            rounds,
        })
    })
}
