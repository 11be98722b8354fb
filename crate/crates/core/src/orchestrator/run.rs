use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::barrier::{self, BarrierBatch, BarrierNet, BarrierSampler, CertifyOptions, SafetyCertificate};
use crate::envs::{self, EnvSpec, Region, Trajectory};
use crate::error::{Error, Result};
use crate::nn::AdamState;
use crate::rng;
use crate::sdegen;

use super::config::TrainConfig;
use super::train::{paired_rollouts, Checkpoint, Metrics, Trainer, CHECKPOINT_EVERY};

/// Episodes in the final empirical safe-rate evaluation.
pub const EVAL_EPISODES: usize = 500;

/// Synthetic rollouts behind the practical bound's `η` and Monte Carlo check.
pub const BOUND_TRAJECTORIES: usize = 10_000;

/// Synthetic rollouts behind the end-of-training certificate.
const TRAIN_CERT_TRAJECTORIES: usize = 1000;

/// Synthetic rollouts forming the state pool for barrier retraining.
const RETRAIN_POOL: usize = 256;

/// Outcome of [`run_training`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub environment: String,
    pub seed: u64,
    pub iterations: usize,
    pub metrics: Metrics,
    /// Set when the last iteration met the barrier stopping criterion.
    pub barrier_converged: bool,
    /// Certificate of the training barrier against the unmodified `S_u`.
    pub certificate: SafetyCertificate,
    pub safe_rate: f64,
    pub safe_rate_std_error: f64,
    pub mean_return: f64,
    pub eval_episodes: usize,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `report.json` plus `metrics/<name>.csv` for every series.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("metrics"))?;
        fs::write(dir.join("report.json"), self.to_json()?)?;
        write_metric_csvs(&self.metrics, &dir.join("metrics"))
    }
}

/// One `iteration,<name>` CSV per metric series.
pub fn write_metric_csvs(metrics: &Metrics, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, values) in metrics.series() {
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join(format!("{name}.csv")))?);
        writeln!(f, "iteration,{name}")?;
        for (i, v) in values.iter().enumerate() {
            writeln!(f, "{i},{v}")?;
        }
        f.flush()?;
    }
    Ok(())
}

/// Training stopped on an error; `checkpoint` is the last good state.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub checkpoint: Option<Box<Checkpoint>>,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl std::error::Error for TrainAbort {}

impl From<Error> for TrainAbort {
    fn from(error: Error) -> Self {
        Self { error, checkpoint: None }
    }
}

/// Runs outer iterations until `config.training.outer_iters` are complete.
///
/// Starts from `resume` when given. `on_checkpoint` receives the state every
/// [`CHECKPOINT_EVERY`] iterations and at the end; an error from it stops
/// the run. On a numeric failure the last good state travels with the error.
pub fn train_loop(
    config: &TrainConfig,
    resume: Option<Checkpoint>,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint, TrainAbort> {
    let mut trainer = match resume {
        Some(mut c) => {
            if c.config.environment != config.environment || c.config.networks != config.networks {
                return Err(Error::contract("resumed checkpoint was trained with a different environment or network layout").into());
            }
            c.config.training.outer_iters = config.training.outer_iters;
            Trainer::from_checkpoint(c)?
        }
        None => Trainer::new(config)?,
    };
    let target = config.training.outer_iters;
    while trainer.iteration() < target {
        if let Err(error) = trainer.step() {
            let last = trainer.checkpoint();
            return Err(TrainAbort {
                error,
                checkpoint: Some(Box::new(last)),
            });
        }
        if trainer.iteration() % CHECKPOINT_EVERY == 0 && trainer.iteration() < target {
            on_checkpoint(&trainer.checkpoint())?;
        }
    }
    let last = trainer.into_checkpoint();
    on_checkpoint(&last)?;
    Ok(last)
}

/// [`train_loop`] followed by the final certificate and safe-rate evaluation.
pub fn run_training(
    config: &TrainConfig,
    resume: Option<Checkpoint>,
    on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<(Checkpoint, RunReport), TrainAbort> {
    let ckpt = train_loop(config, resume, on_checkpoint)?;
    let report = final_report(&ckpt).map_err(|error| TrainAbort {
        error,
        checkpoint: Some(Box::new(ckpt.clone())),
    })?;
    Ok((ckpt, report))
}

/// Certificate and evaluation for a finished run.
pub fn final_report(ckpt: &Checkpoint) -> Result<RunReport> {
    let env = ckpt.config.env_spec()?;
    let seed = ckpt.config.training.seed;
    let opts = certify_options(&ckpt.config, &env, TRAIN_CERT_TRAJECTORIES, rng::substream_seed(seed, "train-certify"));
    let certificate = barrier::certify(&ckpt.barrier, &ckpt.model, &ckpt.policy, &env, &env.unsafe_region, &opts)?;
    let eval = envs::empirical_safe_rate(
        &env,
        &ckpt.policy,
        EVAL_EPISODES,
        ckpt.config.training.gamma,
        rng::substream_seed(seed, "eval"),
    )?;
    Ok(RunReport {
        environment: env.name().to_string(),
        seed,
        iterations: ckpt.iteration,
        barrier_converged: ckpt.metrics.barrier_converged.last().copied().unwrap_or(false),
        metrics: ckpt.metrics.clone(),
        certificate,
        safe_rate: eval.rate,
        safe_rate_std_error: eval.std_error,
        mean_return: eval.mean_return,
        eval_episodes: eval.episodes,
    })
}

fn certify_options(config: &TrainConfig, env: &EnvSpec, trajectories: usize, seed: u64) -> CertifyOptions {
    let mut opts = CertifyOptions::new(env.horizon, seed);
    opts.init_samples = config.certification.init_samples;
    opts.unsafe_samples = config.certification.unsafe_samples;
    opts.lie_samples = config.training.lie_samples;
    opts.trajectories = trajectories;
    opts
}

/// Settings of the practical-bound pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundOptions {
    pub pairs: usize,
    pub retrain_steps: usize,
    /// Synthetic rollouts for `η` and the Monte Carlo check.
    pub trajectories: usize,
    /// Multiplies the measured gap before enlarging; 1 is the plain pipeline.
    pub delta_scale: f64,
    pub seed: u64,
}

impl BoundOptions {
    pub fn from_config(config: &TrainConfig) -> Self {
        Self {
            pairs: config.certification.pairs,
            retrain_steps: config.certification.retrain_steps,
            trajectories: BOUND_TRAJECTORIES,
            delta_scale: 1.0,
            seed: rng::substream_seed(config.training.seed, "practical-bound"),
        }
    }
}

/// Result of [`practical_bound`].
#[derive(Clone, Debug)]
pub struct PracticalBound {
    /// Componentwise largest real-vs-model state gap (after scaling).
    pub delta: Vec<f64>,
    pub enlarged_unsafe: Region,
    pub barrier: BarrierNet,
    /// The retrained barrier met the stopping criterion on its last step.
    pub barrier_converged: bool,
    pub certificate: SafetyCertificate,
}

/// Bound on the real plant from a trained checkpoint:
/// 1. `Δ` from paired real and model rollouts sharing initial states and noise;
/// 2. `S_u` enlarged by `Δ`;
/// 3. a freshly initialized barrier trained against the enlarged set;
/// 4. certification of that barrier, whose `1 - η` is the reported bound.
pub fn practical_bound(ckpt: &Checkpoint, opts: &BoundOptions) -> Result<PracticalBound> {
    if opts.pairs == 0 || opts.retrain_steps == 0 || opts.trajectories == 0 {
        return Err(Error::contract("pairs, retrain steps and trajectories must be positive"));
    }
    if !(opts.delta_scale >= 0.0 && opts.delta_scale.is_finite()) {
        return Err(Error::contract("delta scale must be a nonnegative number"));
    }
    let cfg = &ckpt.config;
    let env = cfg.env_spec()?;
    let (model, policy) = (&ckpt.model, &ckpt.policy);

    // (1)
    let mut rng = rng::substream(opts.seed, "pairs");
    let mut real: Vec<Trajectory> = Vec::with_capacity(opts.pairs);
    let mut starts = Vec::with_capacity(opts.pairs);
    let mut noises = Vec::with_capacity(opts.pairs);
    for _ in 0..opts.pairs {
        let s0 = env.sample_initial(&mut rng)?;
        let noise = env.draw_noise(&mut rng);
        real.push(envs::run_episode_with_noise(&env, policy, s0.clone(), &noise)?);
        starts.push(s0);
        noises.push(noise);
    }
    let synth = paired_rollouts(model, policy, &starts, &noises)?;
    let delta: Vec<f64> = envs::max_state_gap(&real, &synth)?
        .into_iter()
        .map(|d| d * opts.delta_scale)
        .collect();

    // (2)
    let enlarged = env.unsafe_region.minkowski_enlarge(&delta)?;

    // (3)
    let mut rng = rng::substream(opts.seed, "retrain");
    let pool_starts: Vec<Vec<f64>> = (0..RETRAIN_POOL)
        .map(|_| env.sample_initial(&mut rng))
        .collect::<Result<_>>()?;
    let pool = sdegen::rollout_many(model, policy, &pool_starts, env.horizon, rng::substream_seed(opts.seed, "pool"))?;
    let sampler = BarrierSampler::new(&env, enlarged.clone(), &pool)?;
    let fresh = BarrierNet::new(env.state_dim, &cfg.networks.barrier.widths, rng::substream_seed(opts.seed, "barrier"))?;
    let k = 4 * cfg.training.batch_synthetic;
    let batch = BarrierBatch {
        init: k,
        unsafe_states: k,
        lie_states: k,
        lie_samples: cfg.training.lie_samples,
    };
    let optimizer = AdamState::new(&fresh.net.params, cfg.training.lr_barrier);
    let trained = barrier::train_barrier(&fresh, model, policy, &sampler, opts.retrain_steps, batch, &optimizer, &mut rng)?;

    // (4)
    let cert_opts = certify_options(cfg, &env, opts.trajectories, rng::substream_seed(opts.seed, "certify"));
    let certificate = barrier::certify(&trained.barrier, model, policy, &env, &enlarged, &cert_opts)?;
    Ok(PracticalBound {
        delta,
        enlarged_unsafe: enlarged,
        barrier_converged: trained.last.converged(),
        barrier: trained.barrier,
        certificate,
    })
}

/// One rollout with the barrier value at every state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracedRollout {
    pub states: Vec<Vec<f64>>,
    pub barrier: Vec<f64>,
}

/// Real and model rollouts sharing initial states and noise, for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub real: Vec<TracedRollout>,
    pub synthetic: Vec<TracedRollout>,
}

pub fn overlay(ckpt: &Checkpoint, episodes: usize, seed: u64) -> Result<Overlay> {
    if episodes == 0 {
        return Err(Error::contract("need at least one episode"));
    }
    let env = ckpt.config.env_spec()?;
    let mut rng = rng::substream(seed, "overlay");
    let mut real = Vec::with_capacity(episodes);
    let mut starts = Vec::with_capacity(episodes);
    let mut noises = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let s0 = env.sample_initial(&mut rng)?;
        let noise = env.draw_noise(&mut rng);
        real.push(envs::run_episode_with_noise(&env, &ckpt.policy, s0.clone(), &noise)?.states);
        starts.push(s0);
        noises.push(noise);
    }
    let synth = paired_rollouts(&ckpt.model, &ckpt.policy, &starts, &noises)?;
    let trace = |states: Vec<Vec<f64>>| -> Result<TracedRollout> {
        Ok(TracedRollout {
            barrier: ckpt.barrier.eval_rows(&states)?,
            states,
        })
    };
    Ok(Overlay {
        real: real.into_iter().map(trace).collect::<Result<_>>()?,
        synthetic: synth.into_iter().map(|s| trace(s.states)).collect::<Result<_>>()?,
    })
}
