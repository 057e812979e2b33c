//! Synthetic heterogeneous client populations.
//!
//! All clients draw from one class-conditional Gaussian mixture; cluster `c`
//! applies a fixed orthogonal rotation (planar rotations by `360 c / C_true`
//! degrees in coordinate pairs) to every feature vector of its clients, so
//! clusters share the label structure but see rotated feature geometry.

use crate::error::{Error, Result};
use crate::model::ClientDataset;
use crate::numeric::{RngStream, StreamId, StreamKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub true_clusters: usize,
    pub clients_per_cluster: usize,
    pub samples_per_client: usize,
    #[serde(default = "default_test_samples")]
    pub test_samples_per_cluster: usize,
    /// Norm of each class mean.
    #[serde(default = "default_mean_scale")]
    pub class_mean_scale: f64,
    /// Norm of the offset shared by all classes (common image structure);
    /// its rotation is the label-independent cluster signal.
    #[serde(default = "default_common_scale")]
    pub common_mean_scale: f64,
    /// Per-coordinate feature noise std.
    #[serde(default = "default_feature_noise")]
    pub feature_noise: f64,
    /// Label skew: each client samples labels from a random subset of this
    /// many classes. `0` (the default) disables skew (all classes).
    #[serde(default)]
    pub classes_per_client: usize,
}

fn default_test_samples() -> usize {
    200
}

fn default_mean_scale() -> f64 {
    3.0
}

fn default_common_scale() -> f64 {
    2.0
}

fn default_feature_noise() -> f64 {
    1.0
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0
            || self.num_classes < 2
            || self.true_clusters == 0
            || self.clients_per_cluster == 0
            || self.samples_per_client == 0
            || self.test_samples_per_cluster == 0
        {
            return Err(Error::InvalidParameter(
                "population counts must be positive (and at least two classes)".into(),
            ));
        }
        if !(self.class_mean_scale > 0.0)
            || !(self.feature_noise >= 0.0)
            || !(self.common_mean_scale >= 0.0)
        {
            return Err(Error::InvalidParameter(
                "mean scales must be non-negative (class scale positive) and \
                 feature_noise non-negative"
                    .into(),
            ));
        }
        if self.classes_per_client > self.num_classes {
            return Err(Error::InvalidParameter(
                "classes_per_client cannot exceed num_classes".into(),
            ));
        }
        Ok(())
    }

    pub fn num_clients(&self) -> usize {
        self.true_clusters * self.clients_per_cluster
    }
}

/// A generated client population with per-cluster held-out test sets.
#[derive(Debug, Clone)]
pub struct Population {
    pub clients: Vec<ClientDataset>,
    /// Held-out `(features, label)` samples per ground-truth cluster.
    pub test_sets: Vec<Vec<(Vec<f64>, usize)>>,
    pub config: PopulationConfig,
}

impl Population {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn truth(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.truth_cluster).collect()
    }
}

/// Applies the planar rotation by `theta` on coordinate pairs
/// `(0,1), (2,3), ...`; a trailing odd coordinate is left unchanged.
pub(crate) fn rotate_features(x: &mut [f64], theta: f64) {
    let (sin, cos) = theta.sin_cos();
    for pair in x.chunks_exact_mut(2) {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * cos - b * sin;
        pair[1] = a * sin + b * cos;
    }
}

/// Class means: a shared fixed-norm offset plus per-class fixed-norm
/// directions, the first draws of the population stream.
fn class_means(config: &PopulationConfig, stream: &mut RngStream) -> Vec<Vec<f64>> {
    let unit = |g: Vec<f64>| -> Vec<f64> {
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        g.into_iter().map(|v| v / norm).collect()
    };
    let common = unit(stream.gaussian_vec(config.feature_dim, 1.0));
    (0..config.num_classes)
        .map(|_| {
            let dir = unit(stream.gaussian_vec(config.feature_dim, 1.0));
            common
                .iter()
                .zip(&dir)
                .map(|(c, d)| c * config.common_mean_scale + d * config.class_mean_scale)
                .collect()
        })
        .collect()
}

/// Builds the population from one stream: class means first, then client
/// samples in client order, then the per-cluster test sets.
pub fn generate_population(config: &PopulationConfig, seed: u64) -> Result<Population> {
    config.validate()?;
    let mut stream = RngStream::derive(seed, StreamId::new(StreamKind::Population, 0, 0));
    let d = config.feature_dim;
    let means = class_means(config, &mut stream);

    let draw_sample =
        |stream: &mut RngStream, theta: f64, allowed: &[usize]| -> (Vec<f64>, usize) {
            let label = allowed[stream.below(allowed.len())];
            let mut x: Vec<f64> = means[label]
                .iter()
                .zip(stream.gaussian_vec(d, config.feature_noise))
                .map(|(m, n)| m + n)
                .collect();
            if theta != 0.0 {
                rotate_features(&mut x, theta);
            }
            (x, label)
        };

    let all_classes: Vec<usize> = (0..config.num_classes).collect();
    let skew = if config.classes_per_client == 0 {
        config.num_classes
    } else {
        config.classes_per_client
    };
    let mut clients = Vec::with_capacity(config.num_clients());
    for cluster in 0..config.true_clusters {
        let theta = 2.0 * std::f64::consts::PI * cluster as f64 / config.true_clusters as f64;
        for _ in 0..config.clients_per_cluster {
            let mut allowed = all_classes.clone();
            stream.shuffle(&mut allowed);
            allowed.truncate(skew);
            let samples = (0..config.samples_per_client)
                .map(|_| draw_sample(&mut stream, theta, &allowed))
                .collect();
            clients.push(ClientDataset::new(samples, cluster)?);
        }
    }

    // Test sets always cover the full class distribution.
    let test_sets = (0..config.true_clusters)
        .map(|cluster| {
            let theta = 2.0 * std::f64::consts::PI * cluster as f64 / config.true_clusters as f64;
            (0..config.test_samples_per_cluster)
                .map(|_| draw_sample(&mut stream, theta, &all_classes))
                .collect()
        })
        .collect();

    Ok(Population {
        clients,
        test_sets,
        config: config.clone(),
    })
}

/// Pooled public warm-up samples: unrotated (canonical frame), full class
/// distribution, drawn from a stream disjoint from the population's.
pub fn generate_public_set(
    config: &PopulationConfig,
    seed: u64,
    count: usize,
) -> Result<Vec<(Vec<f64>, usize)>> {
    config.validate()?;
    let mut mean_stream = RngStream::derive(seed, StreamId::new(StreamKind::Population, 0, 0));
    let means = class_means(config, &mut mean_stream);
    let mut stream = RngStream::derive(seed, StreamId::new(StreamKind::Pretrain, 0, 0));
    Ok((0..count)
        .map(|_| {
            let label = stream.below(config.num_classes);
            let x = means[label]
                .iter()
                .zip(stream.gaussian_vec(config.feature_dim, config.feature_noise))
                .map(|(m, n)| m + n)
                .collect();
            (x, label)
        })
        .collect())
}

/// Poisson round sampling: each client joins independently with probability
/// `q`; an empty draw is resampled so every round has at least one client.
pub fn sample_round(num_clients: usize, q: f64, stream: &mut RngStream) -> Vec<usize> {
    assert!(q > 0.0 && q <= 1.0, "q must be in (0, 1]");
    loop {
        let sampled: Vec<usize> = (0..num_clients)
            .filter(|_| stream.uniform() < q)
            .collect();
        if !sampled.is_empty() {
            return sampled;
        }
        log::warn!("empty client draw at q = {q}, resampling");
    }
}
