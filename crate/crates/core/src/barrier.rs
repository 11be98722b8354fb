//! Soft barrier functions on the generative model.
//!
//! A barrier `B: S -> (0, 1)` is trained so that it is small on `S_0`, close
//! to one on `S_u` and a supermartingale along the closed-loop surrogate
//! dynamics. Ville's inequality then gives
//! `P(sup_t B(ŝ(t)) >= c) <= B(ŝ(0)) / c`, and since `B >= c` on `S_u`, the
//! probability of ever entering `S_u` is at most `η / c`.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::envs::{EnvSpec, Region};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, AdamState, BoundParams, Mlp, MlpSpec, ParamSet, Policy};
use crate::rng::{self, Rng};
use crate::sdegen::{self, BoundModel, GenerativeModel, SyntheticTrajectory};

/// Barrier level that certification demands on `S_u`.
pub const UNSAFE_LEVEL: f64 = 0.95;
/// Largest accepted mean one-step increase of the barrier.
pub const LIE_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct BarrierNet {
    pub net: Mlp,
}

impl BarrierNet {
    pub fn new(state_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let spec = MlpSpec::with_hidden(state_dim, hidden, 1, Activation::Sigmoid)?;
        Ok(Self {
            net: Mlp::new(spec, seed),
        })
    }

    pub fn from_mlp(net: Mlp) -> Result<Self> {
        if net.spec.output_activation != Activation::Sigmoid || net.spec.output_width() != 1 {
            return Err(Error::contract("a barrier network needs one sigmoid output"));
        }
        Ok(Self { net })
    }

    pub fn state_dim(&self) -> usize {
        self.net.spec.input_width()
    }

    /// `B(s)` for each row of `states`.
    pub fn eval(&self, states: &Tensor) -> Result<Vec<f64>> {
        Ok(self.net.eval(states)?.into_data())
    }

    pub fn eval_rows(&self, states: &[Vec<f64>]) -> Result<Vec<f64>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        self.eval(&Tensor::from_rows(states)?)
    }

    pub fn forward(&self, g: &mut Graph, params: &BoundParams, states: NodeId) -> Result<NodeId> {
        nn::mlp_forward(g, &self.net.spec, params, states)
    }
}

/// Inputs of one evaluation of the barrier loss.
#[derive(Clone, Debug)]
pub struct BarrierSamples {
    /// `[N_0, n]` states from `S_0`.
    pub init: Tensor,
    /// `[N_u, n]` states from `S_u`.
    pub unsafe_states: Tensor,
    /// `[N_l, n]` states visited by synthetic rollouts.
    pub lie_states: Tensor,
    /// `M` noise matrices, each shaped like `lie_states`.
    pub lie_noise: Vec<Tensor>,
}

impl BarrierSamples {
    fn validate(&self, n: usize) -> Result<()> {
        for (name, t) in [
            ("initial", &self.init),
            ("unsafe", &self.unsafe_states),
            ("trajectory", &self.lie_states),
        ] {
            if t.shape().len() != 2 || t.rows() == 0 || t.cols() != n {
                return Err(Error::contract(format!(
                    "{name} samples must be a nonempty [N, {n}] matrix, got {:?}",
                    t.shape()
                )));
            }
        }
        if self.lie_noise.is_empty() {
            return Err(Error::contract("the Lie term needs at least one next-state sample"));
        }
        if self.lie_noise.iter().any(|w| w.shape() != self.lie_states.shape()) {
            return Err(Error::shape("barrier_loss", "Lie noise must match the trajectory states"));
        }
        Ok(())
    }
}

/// Value and gradients of the barrier loss.
#[derive(Clone, Debug)]
pub struct BarrierLoss {
    pub total: f64,
    /// Mean of `B` on `S_0` samples.
    pub init_term: f64,
    /// Mean of `1 - B` on `S_u` samples.
    pub unsafe_term: f64,
    /// Mean over trajectory states of `mean_j B(next_j) - B(s)`.
    pub lie_term: f64,
    pub grad_barrier: ParamSet,
    pub grad_policy: ParamSet,
}

impl BarrierLoss {
    /// Stopping rule: unsafe term at most 0.05 and a nonpositive Lie term.
    pub fn converged(&self) -> bool {
        self.unsafe_term <= 0.05 && self.lie_term <= 0.0
    }
}

/// `mean B(S_0) + mean (1 - B(S_u)) + mean_i [mean_j B(ŝ^{ij}(t+1)) - B(ŝ^i(t))]`.
///
/// Each `ŝ^{ij}(t+1)` is one `sde_step` from `ŝ^i(t)` under the policy with
/// noise `lie_noise[j]`. Trajectory states are data; the policy enters only
/// through the actions taken at them, and the generative model is frozen.
pub fn barrier_loss(
    barrier: &BarrierNet,
    model: &GenerativeModel,
    policy: &Policy,
    samples: &BarrierSamples,
) -> Result<BarrierLoss> {
    let n = barrier.state_dim();
    samples.validate(n)?;
    let m = samples.lie_noise.len();
    let mut g = Graph::new();
    let bp = BoundParams::bind(&mut g, &barrier.net.params, true);
    let pp = BoundParams::bind(&mut g, &policy.net.params, true);
    let mb = BoundModel::bind(&mut g, model, false);

    let init = g.constant(samples.init.clone());
    let b_init = barrier.forward(&mut g, &bp, init)?;
    let t1 = g.mean(b_init)?;

    let unsafe_states = g.constant(samples.unsafe_states.clone());
    let b_unsafe = barrier.forward(&mut g, &bp, unsafe_states)?;
    let mean_unsafe = g.mean(b_unsafe)?;
    let neg = g.scale(mean_unsafe, -1.0)?;
    let t2 = g.offset(neg, 1.0)?;

    let states = g.constant(samples.lie_states.clone());
    let actions = policy.forward(&mut g, &pp, states)?;
    let states_rep = g.repeat_rows(states, m)?;
    let actions_rep = g.repeat_rows(actions, m)?;
    let noise = stack_rows(&samples.lie_noise)?;
    let next = mb.step_with_actions(&mut g, model, states_rep, actions_rep, &noise)?;
    let b_next = barrier.forward(&mut g, &bp, next)?;
    let b_now = barrier.forward(&mut g, &bp, states)?;
    // The mean over all M*N next samples equals the mean of per-state means.
    let e_next = g.mean(b_next)?;
    let e_now = g.mean(b_now)?;
    let t3 = g.sub(e_next, e_now)?;

    let t12 = g.add(t1, t2)?;
    let total = g.add(t12, t3)?;
    let grads = g.backward(total)?;
    Ok(BarrierLoss {
        total: g.value(total).item()?,
        init_term: g.value(t1).item()?,
        unsafe_term: g.value(t2).item()?,
        lie_term: g.value(t3).item()?,
        grad_barrier: bp.gradients(&grads, &barrier.net.params),
        grad_policy: pp.gradients(&grads, &policy.net.params),
    })
}

fn stack_rows(blocks: &[Tensor]) -> Result<Tensor> {
    let cols = blocks[0].cols();
    let rows: usize = blocks.iter().map(Tensor::rows).sum();
    let data: Vec<f64> = blocks.iter().flat_map(|b| b.data().iter().copied()).collect();
    Tensor::matrix(rows, cols, data)
}

/// Per-state Lie estimates `mean_j B(ŝ^{ij}(t+1)) - B(ŝ^i(t))`, without a tape.
pub fn lie_values(
    barrier: &BarrierNet,
    model: &GenerativeModel,
    policy: &Policy,
    states: &Tensor,
    noise: &[Tensor],
) -> Result<Vec<f64>> {
    if noise.is_empty() {
        return Err(Error::contract("the Lie term needs at least one next-state sample"));
    }
    let now = barrier.eval(states)?;
    let actions = policy.act_batch(states)?;
    let mut acc = vec![0.0; states.rows()];
    for w in noise {
        let next = model.step(states, &actions, w)?;
        for (a, b) in acc.iter_mut().zip(barrier.eval(&next)?) {
            *a += b;
        }
    }
    let m = noise.len() as f64;
    Ok(acc.iter().zip(&now).map(|(a, b)| a / m - b).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EtaMode {
    /// Largest sampled value; the certified reading.
    Max,
    /// Sample mean, as in the translated training constraint.
    Mean,
}

pub fn eta_from_values(values: &[f64], mode: EtaMode) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("eta needs at least one sample"));
    }
    Ok(match mode {
        EtaMode::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        EtaMode::Mean => values.iter().sum::<f64>() / values.len() as f64,
    })
}

/// `η` from barrier values on initial-state samples.
pub fn eta_from_barrier(barrier: &BarrierNet, init_samples: &[Vec<f64>], mode: EtaMode) -> Result<f64> {
    eta_from_values(&barrier.eval_rows(init_samples)?, mode)
}

/// Draws barrier-loss inputs: `S_0` and `S_u` samples from the environment's
/// regions and Lie states from a pool of synthetic trajectories.
#[derive(Clone, Debug)]
pub struct BarrierSampler<'a> {
    pub spec: &'a EnvSpec,
    pub unsafe_region: Region,
    /// Non-terminal states of the trajectory pool.
    pub pool: Vec<Vec<f64>>,
}

impl<'a> BarrierSampler<'a> {
    pub fn new(spec: &'a EnvSpec, unsafe_region: Region, trajectories: &[SyntheticTrajectory]) -> Result<Self> {
        let pool: Vec<Vec<f64>> = trajectories
            .iter()
            .flat_map(|t| t.states[..t.states.len().saturating_sub(1)].iter().cloned())
            .collect();
        if pool.is_empty() {
            return Err(Error::contract("no synthetic trajectory states to sample from"));
        }
        Ok(Self {
            spec,
            unsafe_region,
            pool,
        })
    }

    pub fn draw(&self, n_init: usize, n_unsafe: usize, n_lie: usize, m: usize, rng: &mut Rng) -> Result<BarrierSamples> {
        let init: Vec<Vec<f64>> = (0..n_init)
            .map(|_| self.spec.sample_initial(rng))
            .collect::<Result<_>>()?;
        let unsafe_states: Vec<Vec<f64>> = (0..n_unsafe)
            .map(|_| self.unsafe_region.sample(&self.spec.state_bounds, rng))
            .collect::<Result<_>>()?;
        let lie: Vec<Vec<f64>> = (0..n_lie)
            .map(|_| self.pool[rng.gen_range(0..self.pool.len())].clone())
            .collect();
        let n = self.spec.state_dim;
        let lie_noise = sdegen::draw_noise(rng, n_lie, n, m);
        Ok(BarrierSamples {
            init: rows_or_err(&init)?,
            unsafe_states: rows_or_err(&unsafe_states)?,
            lie_states: rows_or_err(&lie)?,
            lie_noise,
        })
    }
}

fn rows_or_err(rows: &[Vec<f64>]) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::contract("sample counts must be positive"));
    }
    Tensor::from_rows(rows)
}

/// Sample sizes for barrier training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BarrierBatch {
    pub init: usize,
    pub unsafe_states: usize,
    pub lie_states: usize,
    pub lie_samples: usize,
}

/// Outcome of [`train_barrier`].
#[derive(Clone, Debug)]
pub struct BarrierTraining {
    pub barrier: BarrierNet,
    pub optimizer: AdamState,
    pub last: BarrierLoss,
}

/// Adam steps on the barrier loss with respect to the barrier only.
pub fn train_barrier(
    barrier: &BarrierNet,
    model: &GenerativeModel,
    policy: &Policy,
    sampler: &BarrierSampler<'_>,
    steps: usize,
    batch: BarrierBatch,
    optimizer: &AdamState,
    rng: &mut Rng,
) -> Result<BarrierTraining> {
    if steps == 0 {
        return Err(Error::contract("barrier training needs at least one step"));
    }
    let mut barrier = barrier.clone();
    let mut opt = optimizer.clone();
    let mut last = None;
    for step in 0..steps {
        let samples = sampler.draw(batch.init, batch.unsafe_states, batch.lie_states, batch.lie_samples, rng)?;
        let loss = barrier_loss(&barrier, model, policy, &samples)?;
        let (p, s) = nn::adam_step(&barrier.net.params, &loss.grad_barrier, &opt).map_err(|e| {
            if e.is_numeric() {
                Error::Divergence(format!("barrier training step {step}: {e}"))
            } else {
                e
            }
        })?;
        barrier.net.params = p;
        opt = s;
        last = Some(loss);
    }
    Ok(BarrierTraining {
        barrier,
        optimizer: opt,
        last: last.expect("at least one step"),
    })
}

/// Barrier statistics on fresh samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionStats {
    pub init_samples: usize,
    pub init_mean: f64,
    pub init_max: f64,
    pub unsafe_samples: usize,
    pub unsafe_min: f64,
    pub lie_states: usize,
    pub lie_mean: f64,
    pub lie_max: f64,
}

/// Monte Carlo estimate of `P(sup_t B(ŝ(t)) >= threshold)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloCheck {
    pub threshold: f64,
    pub exceed_frequency: f64,
    pub std_error: f64,
    pub samples: usize,
    pub truncated: usize,
    /// `exceed_frequency <= eta + 3 * std_error`.
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyCertificate {
    pub valid: bool,
    /// Names of failed conditions; empty when valid.
    pub failures: Vec<String>,
    /// Upper bound on the unsafe probability, `min(1, eta_raw / unsafe_level)`.
    pub eta: f64,
    /// `1 - eta`.
    pub bound: f64,
    /// Largest barrier value over the synthetic trajectories' initial states.
    pub eta_raw: f64,
    /// Largest barrier value over every synthetic trajectory state; the most
    /// conservative reading of the bound, reported but not certified.
    pub eta_path_max: f64,
    pub unsafe_level: f64,
    /// Largest barrier value on fresh `S_0` samples.
    pub eta_init_max: f64,
    /// Mean barrier value on fresh `S_0` samples.
    pub eta_init_mean: f64,
    pub condition_stats: ConditionStats,
    pub mc_crosscheck: MonteCarloCheck,
}

impl SafetyCertificate {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Sample sizes and thresholds for [`certify`].
#[derive(Clone, Debug, PartialEq)]
pub struct CertifyOptions {
    pub init_samples: usize,
    pub unsafe_samples: usize,
    pub lie_states: usize,
    pub lie_samples: usize,
    pub trajectories: usize,
    pub horizon: usize,
    pub unsafe_level: f64,
    pub lie_tolerance: f64,
    pub seed: u64,
}

impl CertifyOptions {
    pub fn new(horizon: usize, seed: u64) -> Self {
        Self {
            init_samples: 1000,
            unsafe_samples: 1000,
            lie_states: 1000,
            lie_samples: 10,
            trajectories: 1000,
            horizon,
            unsafe_level: UNSAFE_LEVEL,
            lie_tolerance: LIE_TOLERANCE,
            seed,
        }
    }
}

/// Checks the barrier conditions on fresh samples and bounds the unsafe
/// probability over the horizon.
///
/// `η` is the largest initial barrier value over `trajectories` synthetic
/// rollouts from `S_0`, divided by the unsafe level `c`. For a supermartingale
/// Ville's inequality gives `P(sup_t B >= c) <= B(s(0)) / c`; the same rollouts
/// estimate that frequency as a cross-check.
pub fn certify(
    barrier: &BarrierNet,
    model: &GenerativeModel,
    policy: &Policy,
    spec: &EnvSpec,
    unsafe_region: &Region,
    opts: &CertifyOptions,
) -> Result<SafetyCertificate> {
    if opts.init_samples == 0 || opts.unsafe_samples == 0 || opts.lie_states == 0 || opts.trajectories == 0 {
        return Err(Error::contract("certification sample counts must be positive"));
    }
    if !(opts.unsafe_level > 0.0 && opts.unsafe_level <= 1.0) {
        return Err(Error::contract("unsafe level must lie in (0, 1]"));
    }
    let mut rng = rng::substream(opts.seed, "certify");

    let init: Vec<Vec<f64>> = (0..opts.init_samples)
        .map(|_| spec.sample_initial(&mut rng))
        .collect::<Result<_>>()?;
    let b_init = barrier.eval_rows(&init)?;
    let unsafe_states: Vec<Vec<f64>> = (0..opts.unsafe_samples)
        .map(|_| unsafe_region.sample(&spec.state_bounds, &mut rng))
        .collect::<Result<_>>()?;
    let b_unsafe = barrier.eval_rows(&unsafe_states)?;

    let starts: Vec<Vec<f64>> = (0..opts.trajectories)
        .map(|_| spec.sample_initial(&mut rng))
        .collect::<Result<_>>()?;
    let trajs = sdegen::rollout_many(model, policy, &starts, opts.horizon, rng.gen())?;
    let sups: Vec<f64> = trajs
        .par_iter()
        .map(|t| Ok(eta_from_values(&barrier.eval_rows(&t.states)?, EtaMode::Max)?))
        .collect::<Result<_>>()?;
    let b_start = barrier.eval_rows(&trajs.iter().map(|t| t.states[0].clone()).collect::<Vec<_>>())?;
    let eta_raw = eta_from_values(&b_start, EtaMode::Max)?;
    let eta_path_max = eta_from_values(&sups, EtaMode::Max)?;
    let c = opts.unsafe_level;
    let eta = (eta_raw / c).min(1.0);

    let exceed = sups.iter().filter(|&&v| v >= c).count();
    let freq = exceed as f64 / sups.len() as f64;
    let se = (freq * (1.0 - freq) / sups.len() as f64).sqrt();
    let ville_ok = freq <= eta + 3.0 * se;

    let sampler = BarrierSampler::new(spec, unsafe_region.clone(), &trajs)?;
    let lie_states: Vec<Vec<f64>> = (0..opts.lie_states)
        .map(|_| sampler.pool[rng.gen_range(0..sampler.pool.len())].clone())
        .collect();
    let lie_states = Tensor::from_rows(&lie_states)?;
    let noise = sdegen::draw_noise(&mut rng, opts.lie_states, spec.state_dim, opts.lie_samples);
    let lie = lie_values(barrier, model, policy, &lie_states, &noise)?;

    let stats = ConditionStats {
        init_samples: b_init.len(),
        init_mean: eta_from_values(&b_init, EtaMode::Mean)?,
        init_max: eta_from_values(&b_init, EtaMode::Max)?,
        unsafe_samples: b_unsafe.len(),
        unsafe_min: b_unsafe.iter().copied().fold(f64::INFINITY, f64::min),
        lie_states: lie.len(),
        lie_mean: eta_from_values(&lie, EtaMode::Mean)?,
        lie_max: eta_from_values(&lie, EtaMode::Max)?,
    };

    let mut failures = Vec::new();
    if stats.unsafe_min < c {
        failures.push("unsafe-level condition".to_string());
    }
    if stats.init_max > eta {
        failures.push("initial-level condition".to_string());
    }
    if stats.lie_mean > opts.lie_tolerance {
        failures.push("supermartingale condition".to_string());
    }
    if !ville_ok {
        failures.push("Monte Carlo cross-check".to_string());
    }
    Ok(SafetyCertificate {
        valid: failures.is_empty(),
        failures,
        eta,
        bound: 1.0 - eta,
        eta_raw,
        eta_path_max,
        unsafe_level: c,
        eta_init_max: stats.init_max,
        eta_init_mean: stats.init_mean,
        condition_stats: stats,
        mc_crosscheck: MonteCarloCheck {
            threshold: c,
            exceed_frequency: freq,
            std_error: se,
            samples: sups.len(),
            truncated: trajs.iter().filter(|t| t.truncated).count(),
            passed: ville_ok,
        },
    })
}
