//! Experiment configuration.

use super::population::PopulationConfig;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, TrainConfig};
use crate::privacy::{calibrate_z, PrivacySpec};
use crate::sketch::stage1_threshold;
use serde::{Deserialize, Serialize};

/// Which round loop a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Two-stage protocol: sketch-based initialization, then clustered
    /// training with secure-sum DP and update scaling.
    Pina,
    /// Training stage only, from randomly perturbed initial cluster models.
    PinaRandomInit,
    /// Loss-based cluster identification with per-client local DP noise
    /// throughout; no secure sum, no update scaling.
    IfcaLdp,
    /// Single global model with secure-sum DP.
    Fedavg,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Pina => "pina",
            Algorithm::PinaRandomInit => "pina-random-init",
            Algorithm::IfcaLdp => "ifca-ldp",
            Algorithm::Fedavg => "fedavg",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pina" => Ok(Algorithm::Pina),
            "pina-random-init" => Ok(Algorithm::PinaRandomInit),
            "ifca-ldp" => Ok(Algorithm::IfcaLdp),
            "fedavg" => Ok(Algorithm::Fedavg),
            other => Err(Error::UnknownAlgorithm(other.to_string())),
        }
    }
}

/// Model dimensions not implied by the population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    #[serde(default = "default_adapter_rank")]
    pub adapter_rank: usize,
}

fn default_adapter_rank() -> usize {
    4
}

/// User-facing privacy settings; exactly one of `epsilon` (calibrated) or
/// `noise_multiplier` (explicit) must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyConfig {
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Defaults to `1 / |K|^1.1`.
    #[serde(default)]
    pub delta: Option<f64>,
    pub q: f64,
    pub rounds_init: u32,
    pub rounds_train: u32,
    pub clip_threshold: f64,
    #[serde(default)]
    pub noise_multiplier: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    /// Worker threads for client-parallel sections; 0 uses all cores.
    /// Never affects results.
    #[serde(default)]
    pub workers: usize,
    /// Number of cluster models `C`.
    pub clusters: usize,
    /// Normalization-window length after the initialization rounds.
    #[serde(default = "default_t_no")]
    pub t_no: u32,
    pub population: PopulationConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub privacy: PrivacyConfig,
    /// Scale training-stage noise as if this many clients were averaged.
    #[serde(default)]
    pub virtual_cohort: Option<usize>,
    /// Multiplier on the `S / sqrt(dim)` per-coordinate std used to perturb
    /// random initial cluster models.
    #[serde(default = "default_init_scale")]
    pub random_init_scale: f64,
    /// Head warm-up epochs on a pooled public set before federation;
    /// 0 disables warm-up.
    #[serde(default)]
    pub pretrain_epochs: usize,
    /// Size of the pooled public warm-up set.
    #[serde(default = "default_pretrain_samples")]
    pub pretrain_samples: usize,
}

fn default_pretrain_samples() -> usize {
    500
}

fn default_t_no() -> u32 {
    5
}

fn default_init_scale() -> f64 {
    1.0
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.population.validate()?;
        self.train.validate()?;
        let spec = self.model_spec();
        spec.validate()?;
        if self.clusters == 0 {
            return Err(Error::InvalidParameter(
                "clusters must be at least 1".into(),
            ));
        }
        let p = &self.privacy;
        if !(p.q > 0.0 && p.q <= 1.0) {
            return Err(Error::InvalidParameter("privacy.q must be in (0, 1]".into()));
        }
        if p.q * (self.population.num_clients() as f64) < 1.0 {
            return Err(Error::InvalidParameter(
                "privacy.q times the client count must be at least 1".into(),
            ));
        }
        if p.rounds_train == 0 {
            return Err(Error::InvalidParameter(
                "privacy.rounds_train must be at least 1".into(),
            ));
        }
        if !(p.clip_threshold > 0.0) {
            return Err(Error::InvalidParameter(
                "privacy.clip_threshold must be positive".into(),
            ));
        }
        match (p.epsilon, p.noise_multiplier) {
            (Some(e), None) if e > 0.0 => {}
            (None, Some(z)) if z >= 0.0 => {}
            (Some(_), Some(_)) => {
                return Err(Error::InvalidParameter(
                    "give exactly one of privacy.epsilon or privacy.noise_multiplier".into(),
                ))
            }
            _ => {
                return Err(Error::InvalidParameter(
                    "privacy needs a positive epsilon or a non-negative noise_multiplier".into(),
                ))
            }
        }
        if self.algorithm == Algorithm::Pina && p.rounds_init == 0 {
            return Err(Error::InvalidParameter(
                "pina needs privacy.rounds_init >= 1".into(),
            ));
        }
        if let Some(v) = self.virtual_cohort {
            if v == 0 {
                return Err(Error::InvalidParameter(
                    "virtual_cohort must be positive when set".into(),
                ));
            }
        }
        if !(self.random_init_scale > 0.0) {
            return Err(Error::InvalidParameter(
                "random_init_scale must be positive".into(),
            ));
        }
        if self.pretrain_epochs > 0 && self.pretrain_samples == 0 {
            return Err(Error::InvalidParameter(
                "pretrain_samples must be positive when warm-up is enabled".into(),
            ));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            feature_dim: self.population.feature_dim,
            hidden_dim: self.model.hidden_dim,
            adapter_rank: self.model.adapter_rank,
            num_classes: self.population.num_classes,
        }
    }

    /// Cluster count the algorithm actually runs with (fedavg trains a
    /// single global model).
    pub fn effective_clusters(&self) -> usize {
        match self.algorithm {
            Algorithm::Fedavg => 1,
            _ => self.clusters,
        }
    }

    /// Resolves the full DP configuration: defaulted delta, calibrated or
    /// explicit noise multiplier, and the stage-1 threshold derived from the
    /// sketch non-zero budget.
    pub fn resolve_privacy(&self) -> Result<PrivacySpec> {
        let p = &self.privacy;
        let delta = p
            .delta
            .unwrap_or_else(|| PrivacySpec::default_delta(self.population.num_clients()));
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidParameter("delta must be in (0, 1)".into()));
        }
        let z = match (p.noise_multiplier, p.epsilon) {
            (Some(z), _) => z,
            (None, Some(eps)) => calibrate_z(eps, delta, p.q, p.rounds_train)?,
            (None, None) => {
                return Err(Error::InvalidParameter(
                    "privacy needs epsilon or noise_multiplier".into(),
                ))
            }
        };
        let stage1_dim = self.model_spec().stage1_dim();
        let s_in = stage1_threshold(p.clip_threshold, 4.min(stage1_dim), stage1_dim)?;
        Ok(PrivacySpec {
            epsilon: p.epsilon.unwrap_or(f64::NAN),
            delta,
            q: p.q,
            t_in: p.rounds_init,
            t_tr: p.rounds_train,
            s: p.clip_threshold,
            s_in,
            z,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(algorithm: Algorithm) -> ExperimentConfig {
        ExperimentConfig {
            algorithm,
            seed: 1,
            workers: 1,
            clusters: 2,
            t_no: 2,
            population: PopulationConfig {
                feature_dim: 8,
                num_classes: 3,
                true_clusters: 2,
                clients_per_cluster: 5,
                samples_per_client: 12,
                test_samples_per_cluster: 20,
                class_mean_scale: 3.0,
                common_mean_scale: 2.0,
                feature_noise: 1.0,
                classes_per_client: 0,
            },
            model: ModelConfig {
                hidden_dim: 8,
                adapter_rank: 2,
            },
            train: TrainConfig {
                epochs: 2,
                batch_size: 6,
                learning_rate: 0.05,
            },
            privacy: PrivacyConfig {
                epsilon: None,
                delta: None,
                q: 0.5,
                rounds_init: 2,
                rounds_train: 4,
                clip_threshold: 1.0,
                noise_multiplier: Some(0.0),
            },
            virtual_cohort: None,
            random_init_scale: 1.0,
            pretrain_epochs: 0,
            pretrain_samples: 100,
        }
    }

    #[test]
    fn validation_catches_conflicting_privacy_settings() {
        let mut cfg = tiny_config(Algorithm::Pina);
        assert!(cfg.validate().is_ok());
        cfg.privacy.epsilon = Some(2.0);
        assert!(cfg.validate().is_err());
        cfg.privacy.noise_multiplier = None;
        assert!(cfg.validate().is_ok());
        cfg.privacy.epsilon = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn resolve_privacy_defaults_delta_and_calibrates() {
        let mut cfg = tiny_config(Algorithm::Pina);
        cfg.privacy.noise_multiplier = None;
        cfg.privacy.epsilon = Some(4.0);
        let spec = cfg.resolve_privacy().unwrap();
        assert_eq!(spec.delta, PrivacySpec::default_delta(10));
        assert!(spec.z > 0.0);
        // s_in = sqrt(4 / 16) * 1.0
        assert!((spec.s_in - 0.5).abs() < 1e-12);
    }

    #[test]
    fn algorithm_names_round_trip() {
        for alg in [
            Algorithm::Pina,
            Algorithm::PinaRandomInit,
            Algorithm::IfcaLdp,
            Algorithm::Fedavg,
        ] {
            assert_eq!(alg.name().parse::<Algorithm>().unwrap(), alg);
        }
        assert!("nope".parse::<Algorithm>().is_err());
    }

    #[test]
    fn fedavg_runs_single_cluster() {
        let cfg = tiny_config(Algorithm::Fedavg);
        assert_eq!(cfg.effective_clusters(), 1);
    }
}
