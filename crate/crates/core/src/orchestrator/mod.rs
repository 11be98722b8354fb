//! The outer training loop, run persistence and the practical bound.

mod checkpoint;
mod config;
mod run;
mod train;

pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{CertificationConfig, EnvironmentConfig, LayerWidths, NetworksConfig, TrainConfig, TrainingConfig};
pub use run::{
    final_report, overlay, practical_bound, run_training, train_loop, write_metric_csvs, BoundOptions, Overlay, PracticalBound,
    RunReport, TracedRollout, TrainAbort, BOUND_TRAJECTORIES, EVAL_EPISODES,
};
pub use train::{paired_gap, paired_rollouts, Checkpoint, Metrics, RngStates, Trainer, CHECKPOINT_EVERY};

#[cfg(test)]
pub(crate) fn tiny_config(iters: usize) -> TrainConfig {
    let mut c = TrainConfig::for_env("2d");
    let w = LayerWidths { widths: vec![8] };
    c.networks = NetworksConfig {
        policy: w.clone(),
        drift: w.clone(),
        diffusion: w.clone(),
        barrier: w,
    };
    c.environment.horizon = Some(15);
    let t = &mut c.training;
    t.outer_iters = iters;
    t.inner_gen_steps = 3;
    t.batch_real = 2;
    t.batch_synthetic = 4;
    t.lie_samples = 3;
    t.seed = 7;
    let k = &mut c.certification;
    k.pairs = 4;
    k.retrain_steps = 5;
    k.init_samples = 50;
    k.unsafe_samples = 50;
    c
}
