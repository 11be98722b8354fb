use serde::{Deserialize, Serialize};

use crate::barrier::{self, BarrierNet, BarrierSampler};
use crate::diffcore::Tensor;
use crate::envs::{self, EnvSpec, Trajectory};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, AdamState, Mlp, MlpSpec, Policy};
use crate::policyopt;
use crate::rng::{self, Rng, RngState};
use crate::sdegen::{self, GenerativeModel, ModelOptimizer, SyntheticTrajectory};

use super::config::TrainConfig;

/// Checkpoints are written every this many iterations and at the end.
pub const CHECKPOINT_EVERY: usize = 25;

/// Barrier-loss samples per synthetic rollout of the iteration.
const BARRIER_SAMPLES_PER_ROLLOUT: usize = 4;

/// Per-iteration training metrics; every series has one entry per completed
/// iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean per-transition NLL over the iteration's generative steps.
    pub gen_nll: Vec<f64>,
    pub barrier_init: Vec<f64>,
    pub barrier_unsafe: Vec<f64>,
    pub barrier_lie: Vec<f64>,
    pub barrier_total: Vec<f64>,
    /// Synthetic discounted return `Ĵ`.
    pub synthetic_return: Vec<f64>,
    /// Mean per-step distance between paired real and synthetic rollouts.
    pub model_gap: Vec<f64>,
    /// Fraction of the iteration's real episodes that entered `S_u`.
    pub real_unsafe_rate: Vec<f64>,
    /// Synthetic rollouts excluded from `Ĵ` after blowing up.
    pub excluded_rollouts: Vec<f64>,
    pub barrier_converged: Vec<bool>,
}

impl Metrics {
    pub fn len(&self) -> usize {
        self.gen_nll.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gen_nll.is_empty()
    }

    /// Numeric series by name, in a fixed order.
    pub fn series(&self) -> Vec<(&'static str, Vec<f64>)> {
        vec![
            ("gen_nll", self.gen_nll.clone()),
            ("barrier_init", self.barrier_init.clone()),
            ("barrier_unsafe", self.barrier_unsafe.clone()),
            ("barrier_lie", self.barrier_lie.clone()),
            ("barrier_total", self.barrier_total.clone()),
            ("synthetic_return", self.synthetic_return.clone()),
            ("model_gap", self.model_gap.clone()),
            ("real_unsafe_rate", self.real_unsafe_rate.clone()),
            ("excluded_rollouts", self.excluded_rollouts.clone()),
            (
                "barrier_converged",
                self.barrier_converged.iter().map(|&b| f64::from(u8::from(b))).collect(),
            ),
        ]
    }

    fn truncate(&mut self, n: usize) {
        self.gen_nll.truncate(n);
        self.barrier_init.truncate(n);
        self.barrier_unsafe.truncate(n);
        self.barrier_lie.truncate(n);
        self.barrier_total.truncate(n);
        self.synthetic_return.truncate(n);
        self.model_gap.truncate(n);
        self.real_unsafe_rate.truncate(n);
        self.excluded_rollouts.truncate(n);
        self.barrier_converged.truncate(n);
    }
}

/// The generators behind every random draw of training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStates {
    /// Real episodes.
    pub env: RngState,
    /// Generative minibatches.
    pub model: RngState,
    /// Synthetic rollouts.
    pub synth: RngState,
    /// Barrier-loss samples.
    pub barrier: RngState,
}

impl RngStates {
    pub fn from_seed(seed: u64) -> Self {
        let cap = |name| RngState::capture(&rng::substream(seed, name));
        Self {
            env: cap("env"),
            model: cap("model"),
            synth: cap("synth"),
            barrier: cap("barrier"),
        }
    }
}

/// Complete training state; saving and restoring it resumes a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed outer iterations.
    pub iteration: usize,
    pub policy: Policy,
    pub model: GenerativeModel,
    pub barrier: BarrierNet,
    pub policy_opt: AdamState,
    pub model_opt: ModelOptimizer,
    pub barrier_opt: AdamState,
    pub rngs: RngStates,
    pub replay: Vec<Trajectory>,
    pub metrics: Metrics,
}

/// Network layouts implied by a config.
pub(crate) struct Layouts {
    pub policy: MlpSpec,
    pub model: GenerativeModel,
    pub barrier: MlpSpec,
    pub action_bound: f64,
}

impl Layouts {
    /// Layouts with freshly initialized parameters where they carry any.
    pub(crate) fn new(config: &TrainConfig, env: &EnvSpec) -> Result<Self> {
        let n = &config.networks;
        let seed = config.training.seed;
        let model = GenerativeModel::new(
            env.state_dim,
            env.action_dim,
            &n.drift.widths,
            Some(&n.diffusion.widths),
            env.dt,
            rng::substream_seed(seed, "model-init"),
        )?
        .with_action_scale(env.action_bound)?;
        Ok(Self {
            policy: MlpSpec::with_hidden(env.state_dim, &n.policy.widths, env.action_dim, Activation::Identity)?,
            model,
            barrier: MlpSpec::with_hidden(env.state_dim, &n.barrier.widths, 1, Activation::Sigmoid)?,
            action_bound: env.action_bound,
        })
    }
}

impl Checkpoint {
    /// Iteration-zero state for `config`.
    pub fn initial(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let env = config.env_spec()?;
        let seed = config.training.seed;
        let lay = Layouts::new(config, &env)?;
        let policy = Policy::new(
            Mlp::new(lay.policy, rng::substream_seed(seed, "policy-init")),
            lay.action_bound,
        )?;
        let barrier = BarrierNet::new(
            env.state_dim,
            &config.networks.barrier.widths,
            rng::substream_seed(seed, "barrier-init"),
        )?;
        let t = &config.training;
        Ok(Self {
            config: config.clone(),
            iteration: 0,
            policy_opt: AdamState::new(&policy.net.params, t.lr_policy),
            model_opt: ModelOptimizer::new(&lay.model, t.lr_model),
            barrier_opt: AdamState::new(&barrier.net.params, t.lr_barrier),
            policy,
            model: lay.model,
            barrier,
            rngs: RngStates::from_seed(seed),
            replay: Vec::new(),
            metrics: Metrics::default(),
        })
    }
}

/// Runs outer iterations on a [`Checkpoint`].
pub struct Trainer {
    env: EnvSpec,
    state: Checkpoint,
    env_rng: Rng,
    model_rng: Rng,
    synth_rng: Rng,
    barrier_rng: Rng,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::initial(config)?)
    }

    pub fn from_checkpoint(state: Checkpoint) -> Result<Self> {
        state.config.validate()?;
        let env = state.config.env_spec()?;
        Ok(Self {
            env,
            env_rng: state.rngs.env.restore(),
            model_rng: state.rngs.model.restore(),
            synth_rng: state.rngs.synth.restore(),
            barrier_rng: state.rngs.barrier.restore(),
            state,
        })
    }

    pub fn env(&self) -> &EnvSpec {
        &self.env
    }

    pub fn iteration(&self) -> usize {
        self.state.iteration
    }

    pub fn state(&self) -> &Checkpoint {
        &self.state
    }

    /// A snapshot including the current generator positions.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.state.clone();
        c.rngs = RngStates {
            env: RngState::capture(&self.env_rng),
            model: RngState::capture(&self.model_rng),
            synth: RngState::capture(&self.synth_rng),
            barrier: RngState::capture(&self.barrier_rng),
        };
        c
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.checkpoint()
    }

    /// One outer iteration. On failure the state is left exactly as before
    /// the call.
    pub fn step(&mut self) -> Result<()> {
        let rngs = (
            self.env_rng.clone(),
            self.model_rng.clone(),
            self.synth_rng.clone(),
            self.barrier_rng.clone(),
        );
        let replay_len = self.state.replay.len();
        let metric_len = self.state.metrics.len();
        match self.try_step() {
            Ok(()) => Ok(()),
            Err(e) => {
                (self.env_rng, self.model_rng, self.synth_rng, self.barrier_rng) = rngs;
                self.state.replay.truncate(replay_len);
                self.state.metrics.truncate(metric_len);
                Err(if e.is_numeric() {
                    Error::Divergence(format!("outer iteration {}: {e}", self.state.iteration))
                } else {
                    e
                })
            }
        }
    }

    fn try_step(&mut self) -> Result<()> {
        let cfg = self.state.config.training.clone();
        let env = &self.env;
        let n = env.state_dim;
        let horizon = env.horizon;

        // Real episodes with explicit noise, kept for pairing.
        let mut starts = Vec::with_capacity(cfg.batch_real);
        let mut noises = Vec::with_capacity(cfg.batch_real);
        let mut unsafe_count = 0usize;
        for _ in 0..cfg.batch_real {
            let s0 = env.sample_initial(&mut self.env_rng)?;
            let noise = env.draw_noise(&mut self.env_rng);
            let tr = envs::run_episode_with_noise(env, &self.state.policy, s0.clone(), &noise)?;
            unsafe_count += usize::from(!tr.is_safe());
            self.state.replay.push(tr);
            starts.push(s0);
            noises.push(noise);
        }
        let fresh = self.state.replay.len() - cfg.batch_real..self.state.replay.len();
        // Exploratory episodes only feed the model's replay set.
        if env.exploration_std > 0.0 {
            for _ in 0..cfg.batch_real {
                let s0 = env.sample_initial(&mut self.env_rng)?;
                let noise = env.draw_noise(&mut self.env_rng);
                let kicks: Vec<Vec<f64>> = (0..=horizon)
                    .map(|_| rng::standard_normals(&mut self.env_rng, env.action_dim))
                    .collect();
                let tr = envs::run_exploring_episode(env, &self.state.policy, s0, &noise, &kicks)?;
                self.state.replay.push(tr);
            }
        }

        // Generative model.
        let gen = sdegen::train_generative(
            &self.state.model,
            &self.state.replay,
            cfg.inner_gen_steps,
            1,
            &self.state.model_opt,
            &mut self.model_rng,
        )?;
        let model = gen.model;
        let gen_nll = gen.losses.iter().sum::<f64>() / gen.losses.len() as f64;

        // Free-running gap on the fresh real episodes, sharing their noise.
        let real = &self.state.replay[fresh];
        let gap = paired_gap(&model, &self.state.policy, real, &starts, &noises)?;

        // Synthetic rollouts feed both the return and the barrier's Lie states.
        let s0: Vec<Vec<f64>> = (0..cfg.batch_synthetic)
            .map(|_| env.sample_initial(&mut self.synth_rng))
            .collect::<Result<_>>()?;
        let s0 = Tensor::from_rows(&s0)?;
        let noise = sdegen::draw_noise(&mut self.synth_rng, cfg.batch_synthetic, n, horizon);
        let ret = policyopt::synthetic_return(&model, &self.state.policy, &s0, &noise, cfg.gamma, env)?;
        let synth = sdegen::rollout_batch_with_noise(&model, &self.state.policy, &s0, &noise)?;

        let sampler = BarrierSampler::new(env, env.unsafe_region.clone(), &synth)?;
        let k = BARRIER_SAMPLES_PER_ROLLOUT * cfg.batch_synthetic;
        let samples = sampler.draw(k, k, k, cfg.lie_samples, &mut self.barrier_rng)?;
        let bl = barrier::barrier_loss(&self.state.barrier, &model, &self.state.policy, &samples)?;

        let (barrier_params, barrier_opt) =
            nn::adam_step(&self.state.barrier.net.params, &bl.grad_barrier, &self.state.barrier_opt)?;
        let (policy_params, policy_opt) = policyopt::combined_policy_update(
            &self.state.policy.net.params,
            &bl.grad_policy,
            &ret.grad,
            cfg.lambda,
            &self.state.policy_opt,
        )?;
        for v in [gen_nll, gap, bl.total, ret.estimate.value] {
            if !v.is_finite() {
                return Err(Error::non_finite("iteration metrics"));
            }
        }

        // Commit.
        let s = &mut self.state;
        s.model = model;
        s.model_opt = gen.optimizer;
        s.barrier.net.params = barrier_params;
        s.barrier_opt = barrier_opt;
        s.policy.net.params = policy_params;
        s.policy_opt = policy_opt;
        let m = &mut s.metrics;
        m.gen_nll.push(gen_nll);
        m.barrier_init.push(bl.init_term);
        m.barrier_unsafe.push(bl.unsafe_term);
        m.barrier_lie.push(bl.lie_term);
        m.barrier_total.push(bl.total);
        m.synthetic_return.push(ret.estimate.value);
        m.model_gap.push(gap);
        m.real_unsafe_rate.push(unsafe_count as f64 / cfg.batch_real as f64);
        m.excluded_rollouts.push(ret.estimate.excluded as f64);
        m.barrier_converged.push(bl.converged());
        s.iteration += 1;
        Ok(())
    }
}

/// Replays each real episode's initial state and noise through the model and
/// returns the mean Euclidean state distance per step.
pub fn paired_gap(
    model: &GenerativeModel,
    policy: &Policy,
    real: &[Trajectory],
    starts: &[Vec<f64>],
    noises: &[Vec<Vec<f64>>],
) -> Result<f64> {
    let synth = paired_rollouts(model, policy, starts, noises)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, s) in real.iter().zip(&synth) {
        for (a, b) in r.states.iter().zip(&s.states).skip(1) {
            total += a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Model rollouts sharing the initial states and noise of real episodes.
pub fn paired_rollouts(
    model: &GenerativeModel,
    policy: &Policy,
    starts: &[Vec<f64>],
    noises: &[Vec<Vec<f64>>],
) -> Result<Vec<SyntheticTrajectory>> {
    if starts.is_empty() || starts.len() != noises.len() {
        return Err(Error::contract("need one noise sequence per initial state"));
    }
    let horizon = noises[0].len();
    let noise: Vec<Tensor> = (0..horizon)
        .map(|t| {
            let rows: Vec<&[f64]> = noises.iter().map(|nz| nz[t].as_slice()).collect();
            Tensor::from_rows(&rows)
        })
        .collect::<Result<_>>()?;
    sdegen::rollout_batch_with_noise(model, policy, &Tensor::from_rows(starts)?, &noise)
}
