//! Server-side update processing for the training stage: per-cluster
//! secure-sum aggregation, the early norm-equalization window, and
//! normality-driven scaling afterwards.
//!
//! Every sampled client contributes one stacked vector holding updates to
//! all `C` cluster models, with only the selected cluster's block non-zero.
//! The stack is clipped jointly so per-client sensitivity stays exactly `S`,
//! and the server only ever sees the noisy sum — one aggregate per cluster
//! per round.

use crate::error::{Error, Result};
use crate::model::{empirical_loss, ClientDataset, FrozenBackbone};
use crate::numeric::{Layout, ParamVector, RngStream};
use crate::privacy::secure_sum_dp;
use crate::stats::{shapiro_w_subsampled, NormalityReport};
use std::sync::Arc;

/// Aggregates with norm below this are treated as zero by the scaling rules.
const ZERO_NORM_GUARD: f64 = 1e-12;

/// Shapiro-Wilk threshold above which an aggregate is considered pure noise
/// and zeroed out.
pub const NORMALITY_CUTOFF: f64 = 0.99;

/// The `C` global cluster parameter vectors plus the shared frozen backbone.
#[derive(Debug, Clone)]
pub struct ClusterModelSet {
    backbone: Arc<FrozenBackbone>,
    models: Vec<ParamVector>,
    round: u32,
}

impl ClusterModelSet {
    pub fn new(backbone: Arc<FrozenBackbone>, models: Vec<ParamVector>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::NotEnough { need: 1, got: 0 });
        }
        for m in &models {
            if m.layout() != models[0].layout() {
                return Err(Error::LayoutMismatch("cluster models differ".into()));
            }
        }
        Ok(Self {
            backbone,
            models,
            round: 0,
        })
    }

    pub fn backbone(&self) -> &Arc<FrozenBackbone> {
        &self.backbone
    }

    pub fn num_clusters(&self) -> usize {
        self.models.len()
    }

    pub fn models(&self) -> &[ParamVector] {
        &self.models
    }

    pub fn model(&self, i: usize) -> &ParamVector {
        &self.models[i]
    }

    pub fn round(&self) -> u32 {
        self.round
    }
}

/// Picks the cluster whose model has minimal empirical loss on the client's
/// data; ties break toward the lowest index.
pub fn identify_cluster(models: &ClusterModelSet, data: &ClientDataset) -> Result<usize> {
    if models.num_clusters() == 1 {
        return Ok(0);
    }
    let mut best = 0;
    let mut best_loss = f64::INFINITY;
    for (i, m) in models.models.iter().enumerate() {
        let loss = empirical_loss(&models.backbone, m, data)?;
        if loss < best_loss {
            best = i;
            best_loss = loss;
        }
    }
    Ok(best)
}

/// One client's update to all cluster models: exactly one block (the
/// selected cluster's) may be non-zero.
#[derive(Debug, Clone)]
pub struct StackedClientUpdate {
    selected: usize,
    delta: ParamVector,
    clusters: usize,
}

pub fn build_stacked_update(
    selected: usize,
    delta: ParamVector,
    clusters: usize,
) -> Result<StackedClientUpdate> {
    if selected >= clusters {
        return Err(Error::InvalidParameter(format!(
            "selected cluster {selected} out of range for C = {clusters}"
        )));
    }
    Ok(StackedClientUpdate {
        selected,
        delta,
        clusters,
    })
}

impl StackedClientUpdate {
    pub fn selected(&self) -> usize {
        self.selected
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    /// Whole-stack norm; unselected blocks are zero so this equals the
    /// selected block's norm.
    pub fn l2_norm(&self) -> f64 {
        self.delta.l2_norm()
    }

    /// Block `i` as a vector in the inner layout.
    pub fn block(&self, i: usize) -> ParamVector {
        if i == self.selected {
            self.delta.clone()
        } else {
            ParamVector::zeros(self.delta.layout().clone())
        }
    }

    /// Materializes the `C * p` stacked vector.
    fn to_stacked(&self, layout: &Arc<Layout>) -> ParamVector {
        let p = self.delta.len();
        let mut values = vec![0.0; self.clusters * p];
        values[self.selected * p..(self.selected + 1) * p].copy_from_slice(self.delta.values());
        ParamVector::new(layout.clone(), values).expect("stacked layout length matches")
    }
}

fn stacked_layout(clusters: usize, inner_len: usize) -> Arc<Layout> {
    Layout::new(
        (0..clusters)
            .map(|i| (format!("cluster{i}"), inner_len))
            .collect(),
    )
}

/// One aggregation round: stacks are jointly clipped to `s` per client,
/// summed with distributed noise of total std `z * s` (one noise share per
/// client stream), divided by the round's client count, and split back into
/// `C` per-cluster aggregates.
pub fn aggregate_round(
    updates: &[StackedClientUpdate],
    z: f64,
    s: f64,
    streams: &mut [RngStream],
) -> Result<Vec<ParamVector>> {
    if updates.is_empty() {
        return Err(Error::NotEnough { need: 1, got: 0 });
    }
    let clusters = updates[0].clusters;
    let inner_layout = updates[0].delta.layout().clone();
    for u in updates {
        if u.clusters != clusters || u.delta.layout() != &inner_layout {
            return Err(Error::LayoutMismatch("stacked updates differ".into()));
        }
    }
    let layout = stacked_layout(clusters, inner_layout.len());
    let stacked: Vec<ParamVector> = updates.iter().map(|u| u.to_stacked(&layout)).collect();
    let sum = secure_sum_dp(&stacked, z, s, streams)?;
    let mean = sum.scale(1.0 / updates.len() as f64);
    let p = inner_layout.len();
    Ok((0..clusters)
        .map(|i| {
            ParamVector::new(
                inner_layout.clone(),
                mean.values()[i * p..(i + 1) * p].to_vec(),
            )
            .expect("block length matches inner layout")
        })
        .collect())
}

/// Scales every aggregate to the smallest non-negligible norm among them;
/// near-zero aggregates are excluded from the argmin and left unchanged.
pub fn normalize_updates(aggregates: &[ParamVector]) -> Vec<ParamVector> {
    let norms: Vec<f64> = aggregates.iter().map(ParamVector::l2_norm).collect();
    let min_norm = norms
        .iter()
        .filter(|n| **n > ZERO_NORM_GUARD)
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if !min_norm.is_finite() {
        return aggregates.to_vec();
    }
    aggregates
        .iter()
        .zip(&norms)
        .map(|(agg, &norm)| {
            if norm > ZERO_NORM_GUARD {
                agg.scale(min_norm / norm)
            } else {
                agg.clone()
            }
        })
        .collect()
}

/// Normality statistics for each aggregate; zero-variance (constant)
/// aggregates are reported as `w = 1` so the scaling rule zeroes them.
pub fn cluster_normality(
    aggregates: &[ParamVector],
    cap: usize,
    streams: &mut [RngStream],
) -> Result<Vec<NormalityReport>> {
    aggregates
        .iter()
        .zip(streams.iter_mut())
        .map(|(agg, stream)| match shapiro_w_subsampled(agg, cap, stream) {
            Ok(report) => Ok(report),
            Err(Error::ZeroVariance) => Ok(NormalityReport {
                w: 1.0,
                n: agg.len().min(cap),
                subsampled: agg.len() > cap,
            }),
            Err(e) => Err(e),
        })
        .collect()
}

/// Normality-driven scaling: aggregate `i` is multiplied by
/// `w_i / sum_j w_j` when `w_i < 0.99` and zeroed otherwise. The denominator
/// runs over all clusters, including those at or above the cutoff.
pub fn normality_scale(
    aggregates: &[ParamVector],
    reports: &[NormalityReport],
) -> Result<Vec<ParamVector>> {
    if reports.len() != aggregates.len() {
        return Err(Error::DimensionMismatch {
            expected: aggregates.len(),
            got: reports.len(),
        });
    }
    let denom: f64 = reports.iter().map(|r| r.w).sum();
    Ok(aggregates
        .iter()
        .zip(reports)
        .map(|(agg, report)| {
            if report.w >= NORMALITY_CUTOFF {
                agg.scale(0.0)
            } else {
                agg.scale(report.w / denom)
            }
        })
        .collect())
}

/// Applies the scaled aggregates: `W_i += delta_i`, round index incremented.
pub fn apply_round(models: &mut ClusterModelSet, scaled: &[ParamVector]) -> Result<()> {
    if scaled.len() != models.models.len() {
        return Err(Error::DimensionMismatch {
            expected: models.models.len(),
            got: scaled.len(),
        });
    }
    for (model, delta) in models.models.iter_mut().zip(scaled) {
        model.add_scaled_assign(delta, 1.0)?;
    }
    models.round += 1;
    Ok(())
}

/// Which scaling rule a training-stage round uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingPhase {
    /// Norm equalization, rounds `t_in < t <= t_in + t_no`.
    Normalize,
    /// Normality-driven scaling, rounds `t > t_in + t_no`.
    Normality,
}

pub fn scaling_phase(t: u32, t_in: u32, t_no: u32) -> ScalingPhase {
    debug_assert!(t > t_in, "scaling only applies to training-stage rounds");
    if t <= t_in + t_no {
        ScalingPhase::Normalize
    } else {
        ScalingPhase::Normality
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::numeric::{StreamId, StreamKind};
    use approx::assert_relative_eq;

    fn stream(seed: u64, index: u64) -> RngStream {
        RngStream::derive(seed, StreamId::new(StreamKind::ClientNoise, index, 0))
    }

    fn model_set(c: usize) -> ClusterModelSet {
        let spec = ModelSpec {
            feature_dim: 3,
            hidden_dim: 4,
            adapter_rank: 1,
            num_classes: 2,
        };
        let backbone = Arc::new(FrozenBackbone::generate(spec, 1).unwrap());
        let models = (0..c).map(|_| backbone.init_params(2)).collect();
        ClusterModelSet::new(backbone, models).unwrap()
    }

    #[test]
    fn identify_single_cluster_and_tie_break() {
        let set = model_set(1);
        let data = ClientDataset::new(vec![(vec![1.0, 0.0, 0.0], 0)], 0).unwrap();
        assert_eq!(identify_cluster(&set, &data).unwrap(), 0);
        let tied = model_set(3); // identical models -> lowest index
        assert_eq!(identify_cluster(&tied, &data).unwrap(), 0);
    }

    #[test]
    fn stacked_update_blocks() {
        let delta = ParamVector::from_values(vec![1.0, 2.0]);
        let stacked = build_stacked_update(0, delta.clone(), 2).unwrap();
        assert_eq!(stacked.block(0).values(), &[1.0, 2.0]);
        assert_eq!(stacked.block(1).values(), &[0.0, 0.0]);
        assert_eq!(stacked.l2_norm(), delta.l2_norm());
        assert!(build_stacked_update(2, delta, 2).is_err());
    }

    #[test]
    fn stacked_clip_touches_only_selected_block() {
        let delta = ParamVector::from_values(vec![3.0, 4.0]);
        let stacked = build_stacked_update(1, delta, 2).unwrap();
        let layout = stacked_layout(2, 2);
        let vec = stacked.to_stacked(&layout);
        let clipped = vec.clip(2.5).unwrap();
        assert_eq!(clipped.values(), &[0.0, 0.0, 1.5, 2.0]);
    }

    #[test]
    fn aggregate_single_client_noiseless() {
        let delta = ParamVector::from_values(vec![3.0, 4.0]);
        let updates = vec![build_stacked_update(0, delta, 2).unwrap()];
        let aggs = aggregate_round(&updates, 0.0, 2.5, &mut [stream(1, 0)]).unwrap();
        assert_eq!(aggs[0].values(), &[1.5, 2.0]);
        assert_eq!(aggs[1].values(), &[0.0, 0.0]);
    }

    #[test]
    fn aggregate_identical_deltas_is_identity() {
        let delta = ParamVector::from_values(vec![0.3, -0.4]);
        let updates: Vec<_> = (0..7)
            .map(|_| build_stacked_update(0, delta.clone(), 1).unwrap())
            .collect();
        let mut streams: Vec<_> = (0..7).map(|i| stream(2, i)).collect();
        let aggs = aggregate_round(&updates, 0.0, 1.0, &mut streams).unwrap();
        for (a, d) in aggs[0].values().iter().zip(delta.values()) {
            assert_relative_eq!(a, d, epsilon = 1e-15);
        }
    }

    #[test]
    fn aggregate_empty_round_errors() {
        assert!(aggregate_round(&[], 0.0, 1.0, &mut []).is_err());
    }

    #[test]
    fn magnitude_dilution_on_unbalanced_split() {
        // 90 clients on cluster 0, 10 on cluster 1, equal-norm deltas.
        let d0 = ParamVector::from_values(vec![1.0, 0.0]);
        let d1 = ParamVector::from_values(vec![0.0, 1.0]);
        let mut updates = Vec::new();
        for _ in 0..90 {
            updates.push(build_stacked_update(0, d0.clone(), 2).unwrap());
        }
        for _ in 0..10 {
            updates.push(build_stacked_update(1, d1.clone(), 2).unwrap());
        }
        let mut streams: Vec<_> = (0..100).map(|i| stream(3, i)).collect();
        let aggs = aggregate_round(&updates, 0.0, 10.0, &mut streams).unwrap();
        assert_relative_eq!(
            aggs[1].l2_norm() / aggs[0].l2_norm(),
            1.0 / 9.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn normalize_equalizes_norms() {
        let a = ParamVector::from_values(vec![3.0, 0.0]);
        let b = ParamVector::from_values(vec![0.0, 6.0]);
        let out = normalize_updates(&[a, b]);
        assert_relative_eq!(out[0].l2_norm(), 3.0, max_relative = 1e-12);
        assert_relative_eq!(out[1].l2_norm(), 3.0, max_relative = 1e-12);
        assert_eq!(out[1].values(), &[0.0, 3.0]);
    }

    #[test]
    fn normalize_equal_norms_is_identity() {
        let a = ParamVector::from_values(vec![1.0, 2.0]);
        let b = ParamVector::from_values(vec![2.0, 1.0]);
        let out = normalize_updates(&[a.clone(), b.clone()]);
        assert_eq!(out[0].values(), a.values());
        assert_eq!(out[1].values(), b.values());
    }

    #[test]
    fn normalize_preserves_directions_and_guards_zeros() {
        let a = ParamVector::from_values(vec![4.0, 3.0]);
        let zero = ParamVector::from_values(vec![0.0, 0.0]);
        let out = normalize_updates(&[a.clone(), zero.clone()]);
        // zero aggregate excluded from argmin and unchanged
        assert_eq!(out[1].values(), zero.values());
        let f = out[0].values()[0] / a.values()[0];
        assert!(f > 0.0);
        assert_relative_eq!(out[0].values()[1] / a.values()[1], f, max_relative = 1e-12);
        // all near zero: no-op
        let tiny = ParamVector::from_values(vec![1e-15, 0.0]);
        let out = normalize_updates(&[tiny.clone()]);
        assert_eq!(out[0].values(), tiny.values());
    }

    fn report(w: f64) -> NormalityReport {
        NormalityReport {
            w,
            n: 100,
            subsampled: false,
        }
    }

    #[test]
    fn normality_scale_factors() {
        let a = ParamVector::from_values(vec![1.0, 0.0]);
        let b = ParamVector::from_values(vec![0.0, 1.0]);
        let out = normality_scale(&[a, b], &[report(0.5), report(0.3)]).unwrap();
        assert_relative_eq!(out[0].values()[0], 0.625, max_relative = 1e-12);
        assert_relative_eq!(out[1].values()[1], 0.375, max_relative = 1e-12);
    }

    #[test]
    fn normality_scale_zeroes_at_cutoff() {
        let a = ParamVector::from_values(vec![1.0, 1.0]);
        let b = ParamVector::from_values(vec![2.0, 2.0]);
        let out = normality_scale(&[a, b], &[report(0.995), report(0.5)]).unwrap();
        assert_eq!(out[0].l2_norm(), 0.0);
        // the zeroed cluster still counts in the denominator
        assert_relative_eq!(
            out[1].values()[0],
            2.0 * 0.5 / (0.995 + 0.5),
            max_relative = 1e-12
        );
    }

    #[test]
    fn normality_scale_single_cluster_full_factor() {
        let a = ParamVector::from_values(vec![1.0, -2.0]);
        let out = normality_scale(&[a.clone()], &[report(0.5)]).unwrap();
        assert_eq!(out[0].values(), a.values());
    }

    #[test]
    fn apply_round_examples() {
        let mut set = model_set(2);
        let before: Vec<_> = set.models().to_vec();
        let zeros = vec![
            ParamVector::zeros(set.model(0).layout().clone()),
            ParamVector::zeros(set.model(0).layout().clone()),
        ];
        apply_round(&mut set, &zeros).unwrap();
        assert_eq!(set.model(0).values(), before[0].values());
        assert_eq!(set.round(), 1);

        let mut delta0 = ParamVector::zeros(set.model(0).layout().clone());
        delta0.values_mut()[0] = 0.25;
        let deltas = vec![delta0.clone(), delta0.clone()];
        apply_round(&mut set, &deltas).unwrap();
        let negated: Vec<_> = deltas.iter().map(|d| d.scale(-1.0)).collect();
        apply_round(&mut set, &negated).unwrap();
        for (m, b) in set.models().iter().zip(&before) {
            for (x, y) in m.values().iter().zip(b.values()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_cluster_apply_is_fedavg_step() {
        let mut set = model_set(1);
        let before = set.model(0).clone();
        let mut delta = ParamVector::zeros(before.layout().clone());
        delta.values_mut()[3] = -0.5;
        apply_round(&mut set, &[delta.clone()]).unwrap();
        let expect = before.add(&delta).unwrap();
        assert_eq!(set.model(0).values(), expect.values());
    }

    #[test]
    fn phase_dispatch_boundaries() {
        let (t_in, t_no) = (10, 5);
        assert_eq!(scaling_phase(11, t_in, t_no), ScalingPhase::Normalize);
        assert_eq!(scaling_phase(15, t_in, t_no), ScalingPhase::Normalize);
        assert_eq!(scaling_phase(16, t_in, t_no), ScalingPhase::Normality);
        assert_eq!(scaling_phase(40, t_in, t_no), ScalingPhase::Normality);
    }

    #[test]
    fn pure_noise_aggregates_usually_read_as_normal() {
        // The zeroing mechanism relies on pure-noise aggregates scoring
        // w >= 0.99 most of the time.
        let mut hits = 0;
        let total = 50;
        for seed in 0..total {
            let noise = ParamVector::from_values(stream(1000 + seed, 0).gaussian_vec(600, 0.1));
            let report = cluster_normality(
                &[noise],
                5000,
                &mut [RngStream::derive(seed, StreamId::new(StreamKind::Subsample, 0, 0))],
            )
            .unwrap();
            if report[0].w >= NORMALITY_CUTOFF {
                hits += 1;
            }
        }
        assert!(
            hits as f64 / total as f64 > 0.9,
            "zeroing rate {hits}/{total}"
        );
    }

    #[test]
    fn constant_aggregate_maps_to_w_one() {
        let constant = ParamVector::from_values(vec![0.5; 100]);
        let reports = cluster_normality(
            &[constant],
            5000,
            &mut [RngStream::derive(0, StreamId::new(StreamKind::Subsample, 0, 0))],
        )
        .unwrap();
        assert_eq!(reports[0].w, 1.0);
    }

    #[test]
    fn per_client_sensitivity_is_bounded_by_s() {
        // After joint clipping no stacked contribution exceeds S.
        let s = 0.7;
        for i in 0..20u64 {
            let raw = stream(55, i).gaussian_vec(12, 2.0);
            let stacked = build_stacked_update((i % 3) as usize, ParamVector::from_values(raw), 3)
                .unwrap();
            let layout = stacked_layout(3, 12);
            let clipped = stacked.to_stacked(&layout).clip(s).unwrap();
            assert!(clipped.l2_norm() <= s + 1e-12);
        }
    }
}
