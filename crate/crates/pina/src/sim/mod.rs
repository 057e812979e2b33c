//! Experiment orchestration: synthetic populations, round loops for all
//! algorithms, and clustering metrics.

mod config;
mod metrics;
mod population;
mod runner;

pub use config::{Algorithm, ExperimentConfig, ModelConfig, PrivacyConfig};
pub use metrics::{adjusted_rand_index, clustering_accuracy};
pub use population::{generate_population, sample_round, Population, PopulationConfig};
pub use runner::{
    client_noise_stream, client_train_stream, kmeans_stream, random_init_models,
    restart_init_models, round_sample_stream, run_experiment, run_stage1, run_stage2,
    server_init_stream, subsample_stream, ExperimentResult, RoundMetrics, SimContext,
    Stage1Output, Stage1Summary,
};
