//! Initialization stage: each sampled client filters its adapter update to
//! the two largest positive and two largest negative coordinates, privatizes
//! the retained values with local DP at the reduced threshold, and the
//! server clusters the pooled sketches into `C` initial prototypes.

use crate::aggregate::ClusterModelSet;
use crate::error::{Error, Result};
use crate::model::FrozenBackbone;
use crate::numeric::{ParamVector, RngStream};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

/// A client's sparse privatized initialization update: at most two positive
/// and two negative entries over `dim` coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sketch {
    pub client_id: usize,
    pub dim: usize,
    /// `(index, value)` pairs, sorted by index.
    pub entries: Vec<(usize, f64)>,
}

impl Sketch {
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }
}

/// Keeps the two positive and two negative coordinates of largest absolute
/// value; everything else becomes zero. Ties break toward the lower index.
pub fn filter_top2(update: &[f64], client_id: usize) -> Sketch {
    let mut positives: Vec<(usize, f64)> = Vec::new();
    let mut negatives: Vec<(usize, f64)> = Vec::new();
    for (i, &v) in update.iter().enumerate() {
        if v > 0.0 {
            positives.push((i, v));
        } else if v < 0.0 {
            negatives.push((i, v));
        }
    }
    positives.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    negatives.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    let mut entries: Vec<(usize, f64)> = positives
        .into_iter()
        .take(2)
        .chain(negatives.into_iter().take(2))
        .collect();
    entries.sort_by_key(|e| e.0);
    Sketch {
        client_id,
        dim: update.len(),
        entries,
    }
}

/// Initialization-stage clipping threshold: `sqrt(n / h) * s`, where `n` is
/// the non-zero count of a sketch and `h` the stage-1 dimension.
pub fn stage1_threshold(s: f64, n: usize, h: usize) -> Result<f64> {
    if n == 0 || h == 0 || n > h {
        return Err(Error::InvalidParameter(format!(
            "need 1 <= n <= h, got n = {n}, h = {h}"
        )));
    }
    if !(s > 0.0) {
        return Err(Error::InvalidParameter("threshold must be positive".into()));
    }
    Ok((n as f64 / h as f64).sqrt() * s)
}

/// Local DP on the retained values: the entry vector is l2-clipped to
/// `s_in`, then each retained coordinate gets `N(0, (z s_in)^2)` noise.
/// Zeroed coordinates stay zero and indices are released as-is.
pub fn privatize_sketch(
    sketch: &Sketch,
    z: f64,
    s_in: f64,
    stream: &mut RngStream,
) -> Result<Sketch> {
    if z < 0.0 || !(s_in > 0.0) {
        return Err(Error::InvalidParameter(
            "need z >= 0 and a positive threshold".into(),
        ));
    }
    let norm = sketch
        .entries
        .iter()
        .map(|(_, v)| v * v)
        .sum::<f64>()
        .sqrt();
    let scale = if norm > s_in { s_in / norm } else { 1.0 };
    let noise = stream.gaussian_vec(sketch.entries.len(), z * s_in);
    let entries = sketch
        .entries
        .iter()
        .zip(&noise)
        .map(|(&(i, v), n)| (i, v * scale + n))
        .collect();
    Ok(Sketch {
        client_id: sketch.client_id,
        dim: sketch.dim,
        entries,
    })
}

/// Initial cluster prototypes and the sketch-based assignment.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    pub centroids: Vec<Vec<f64>>,
    /// client id -> cluster index, for every sketched client.
    pub assignment: BTreeMap<usize, usize>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Restarts of the k-means++ seeding; the run with the lowest final
/// objective wins.
const KMEANS_RESTARTS: usize = 10;

fn lloyd_once(points: &[Vec<f64>], clusters: usize, stream: &mut RngStream) -> (Vec<Vec<f64>>, Vec<usize>, f64) {
    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = vec![points[stream.below(points.len())].clone()];
    while centroids.len() < clusters {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| squared_distance(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = stream.uniform() * total;
            let mut chosen = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            stream.below(points.len())
        };
        centroids.push(points[pick].clone());
    }

    // Lloyd iterations until the assignment reaches a fixpoint.
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..100 {
        for (k, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&assign)
                .filter(|(_, a)| **a == k)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue; // stale centroid kept
            }
            for (i, c) in centroid.iter_mut().enumerate() {
                *c = members.iter().map(|p| p[i]).sum::<f64>() / members.len() as f64;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    let objective = kmeans_objective(points, &centroids);
    (centroids, assign, objective)
}

/// k-means++ initialization followed by Lloyd iterations on densified
/// sketches, until the assignment reaches a fixpoint or 100 iterations.
/// Ten seeded restarts are run and the lowest-objective solution kept;
/// deterministic for a fixed stream.
pub fn kmeans_cluster(
    sketches: &[Sketch],
    clusters: usize,
    stream: &mut RngStream,
) -> Result<PrototypeSet> {
    if clusters == 0 {
        return Err(Error::InvalidParameter("need at least one cluster".into()));
    }
    if sketches.len() < clusters {
        return Err(Error::NotEnough {
            need: clusters,
            got: sketches.len(),
        });
    }
    let dim = sketches[0].dim;
    if sketches.iter().any(|s| s.dim != dim) {
        return Err(Error::LayoutMismatch("sketch dimensions differ".into()));
    }
    let points: Vec<Vec<f64>> = sketches.iter().map(Sketch::to_dense).collect();

    let mut best: Option<(Vec<Vec<f64>>, Vec<usize>, f64)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = lloyd_once(&points, clusters, stream);
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (centroids, assign, _) = best.expect("at least one restart");

    let assignment = sketches
        .iter()
        .zip(&assign)
        .map(|(s, a)| (s.client_id, *a))
        .collect();
    Ok(PrototypeSet {
        centroids,
        assignment,
    })
}

/// Sum of squared distances from each densified sketch to its centroid.
pub fn kmeans_objective(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .map(|p| {
            centroids
                .iter()
                .map(|c| squared_distance(p, c))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Turns prototypes into cluster models: model `i` is the base model with
/// centroid `i` added into the stage-1 trainable segment; all other
/// coordinates are identical across clusters.
pub fn materialize_cluster_models(
    protos: &PrototypeSet,
    backbone: &Arc<FrozenBackbone>,
    base: &ParamVector,
) -> Result<ClusterModelSet> {
    let mask = backbone.spec.stage1_mask();
    let stage1_dim = backbone.spec.stage1_dim();
    let mut models = Vec::with_capacity(protos.centroids.len());
    for centroid in &protos.centroids {
        if centroid.len() != stage1_dim {
            return Err(Error::DimensionMismatch {
                expected: stage1_dim,
                got: centroid.len(),
            });
        }
        let mut model = base.clone();
        model.add_into_segments(&mask, centroid)?;
        models.push(model);
    }
    ClusterModelSet::new(backbone.clone(), models)
}
