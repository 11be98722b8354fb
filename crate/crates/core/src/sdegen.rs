//! Neural SDE surrogate of the plant.
//!
//! One step of the model is
//! `ŝ' = s + dt * f(s, a / action_scale) + (sqrt(dt) * softplus(h(s)) + min_std) ⊙ w`
//! with `w ~ N(0, I)`. The drift network `f` and diffusion network `h` thus
//! learn continuous-time rates; `dt = 1` gives a plain discrete-time model.
//! A model without a diffusion network is deterministic.

use rand::Rng as _;
use rayon::prelude::*;

use crate::diffcore::{self, Graph, NodeId, Tensor};
use crate::envs::Trajectory;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, AdamState, BoundParams, Mlp, MlpSpec, Policy};
use crate::rng::{self, Rng};

/// Rollouts with any state entry above this magnitude are truncated.
pub const BLOWUP: f64 = 1e6;

const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq)]
pub struct GenerativeModel {
    /// `[s, a] -> n`, identity output.
    pub drift: Mlp,
    /// `s -> n`, identity output passed through softplus; `None` means `Σ̂ ≡ 0`.
    pub diffusion: Option<Mlp>,
    pub dt: f64,
    pub action_scale: f64,
    pub min_std: f64,
}

impl GenerativeModel {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        drift_hidden: &[usize],
        diffusion_hidden: Option<&[usize]>,
        dt: f64,
        seed: u64,
    ) -> Result<Self> {
        let drift = Mlp::new(
            MlpSpec::with_hidden(state_dim + action_dim, drift_hidden, state_dim, Activation::Identity)?,
            rng::substream_seed(seed, "drift"),
        );
        let diffusion = diffusion_hidden
            .map(|h| -> Result<Mlp> {
                Ok(Mlp::new(
                    MlpSpec::with_hidden(state_dim, h, state_dim, Activation::Identity)?,
                    rng::substream_seed(seed, "diffusion"),
                ))
            })
            .transpose()?;
        let model = Self {
            drift,
            diffusion,
            dt,
            action_scale: 1.0,
            min_std: 1e-4,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_action_scale(mut self, scale: f64) -> Result<Self> {
        self.action_scale = scale;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        if self.drift.spec.output_width() != n || self.drift.spec.input_width() <= n {
            return Err(Error::contract("drift network must map n+m inputs to n outputs"));
        }
        if let Some(d) = &self.diffusion {
            if d.spec.input_width() != n || d.spec.output_width() != n {
                return Err(Error::contract("diffusion network must map n inputs to n outputs"));
            }
        }
        for (name, v) in [("dt", self.dt), ("action_scale", self.action_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.min_std >= 0.0) {
            return Err(Error::contract("min_std must be nonnegative"));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.drift.spec.output_width()
    }

    pub fn action_dim(&self) -> usize {
        self.drift.spec.input_width() - self.state_dim()
    }

    pub fn is_deterministic(&self) -> bool {
        self.diffusion.is_none()
    }

    /// `Ĝ(s, a)` for a batch.
    pub fn mean(&self, states: &Tensor, actions: &Tensor) -> Result<Tensor> {
        self.check_batch(states, Some(actions))?;
        let inv = 1.0 / self.action_scale;
        let input = diffcore::concat_cols(states, &actions.map(|v| v * inv));
        let dt = self.dt;
        let rate = self.drift.eval(&input)?;
        Ok(states.zip(&rate, |s, f| s + f * dt))
    }

    /// Diagonal standard deviations `Σ̂(s)` for a batch.
    pub fn std(&self, states: &Tensor) -> Result<Tensor> {
        self.check_batch(states, None)?;
        match &self.diffusion {
            None => Ok(Tensor::zeros(states.shape())),
            Some(net) => {
                let (sq, floor) = (self.dt.sqrt(), self.min_std);
                Ok(net.eval(states)?.map(|h| diffcore::softplus(h) * sq + floor))
            }
        }
    }

    /// `Ĝ(s, a) + Σ̂(s) ⊙ w` for a batch.
    pub fn step(&self, states: &Tensor, actions: &Tensor, noise: &Tensor) -> Result<Tensor> {
        if noise.shape() != states.shape() {
            return Err(Error::shape("sde_step", format!("noise {:?}, states {:?}", noise.shape(), states.shape())));
        }
        let mut next = self.mean(states, actions)?;
        if !self.is_deterministic() {
            let kick = self.std(states)?.zip(noise, |s, w| s * w);
            next.add_assign(&kick);
        }
        if !next.is_all_finite() {
            return Err(Error::non_finite("sde_step"));
        }
        Ok(next)
    }

    fn check_batch(&self, states: &Tensor, actions: Option<&Tensor>) -> Result<()> {
        if states.shape().len() != 2 || states.cols() != self.state_dim() {
            return Err(Error::shape("generative model", format!("states {:?}", states.shape())));
        }
        if let Some(a) = actions {
            if a.shape().len() != 2 || a.cols() != self.action_dim() || a.rows() != states.rows() {
                return Err(Error::shape("generative model", format!("actions {:?}", a.shape())));
            }
        }
        Ok(())
    }
}

/// The model's networks placed on a graph.
pub struct BoundModel {
    drift: BoundParams,
    diffusion: Option<BoundParams>,
}

impl BoundModel {
    pub fn bind(g: &mut Graph, model: &GenerativeModel, trainable: bool) -> Self {
        Self {
            drift: BoundParams::bind(g, &model.drift.params, trainable),
            diffusion: model
                .diffusion
                .as_ref()
                .map(|d| BoundParams::bind(g, &d.params, trainable)),
        }
    }

    pub fn drift(&self) -> &BoundParams {
        &self.drift
    }

    pub fn diffusion(&self) -> Option<&BoundParams> {
        self.diffusion.as_ref()
    }

    pub fn mean(&self, g: &mut Graph, model: &GenerativeModel, states: NodeId, actions: NodeId) -> Result<NodeId> {
        let a = g.scale(actions, 1.0 / model.action_scale)?;
        let input = g.concat_cols(states, a)?;
        let rate = nn::mlp_forward(g, &model.drift.spec, &self.drift, input)?;
        let delta = g.scale(rate, model.dt)?;
        g.add(states, delta)
    }

    /// `None` for a deterministic model.
    pub fn std(&self, g: &mut Graph, model: &GenerativeModel, states: NodeId) -> Result<Option<NodeId>> {
        let (Some(net), Some(bound)) = (&model.diffusion, &self.diffusion) else {
            return Ok(None);
        };
        let h = nn::mlp_forward(g, &net.spec, bound, states)?;
        let sp = g.softplus(h)?;
        let scaled = g.scale(sp, model.dt.sqrt())?;
        Ok(Some(g.offset(scaled, model.min_std)?))
    }

    /// Differentiable `sde_step` with the policy in the loop; `noise` is held
    /// constant. Returns `(actions, next_states)`.
    pub fn step(
        &self,
        g: &mut Graph,
        model: &GenerativeModel,
        policy: &Policy,
        policy_params: &BoundParams,
        states: NodeId,
        noise: &Tensor,
    ) -> Result<(NodeId, NodeId)> {
        let actions = policy.forward(g, policy_params, states)?;
        let next = self.step_with_actions(g, model, states, actions, noise)?;
        Ok((actions, next))
    }

    pub fn step_with_actions(
        &self,
        g: &mut Graph,
        model: &GenerativeModel,
        states: NodeId,
        actions: NodeId,
        noise: &Tensor,
    ) -> Result<NodeId> {
        let mean = self.mean(g, model, states, actions)?;
        match self.std(g, model, states)? {
            None => Ok(mean),
            Some(std) => {
                let w = g.constant(noise.clone());
                let kick = g.mul(std, w)?;
                g.add(mean, kick)
            }
        }
    }
}

/// `ŝ(t+1) = Ĝ(ŝ(t), π(ŝ(t))) + Σ̂(ŝ(t)) ⊙ w` for one state.
pub fn sde_step(model: &GenerativeModel, policy: &Policy, s: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    if s.iter().chain(w).any(|v| !v.is_finite()) {
        return Err(Error::non_finite("sde_step input"));
    }
    let st = Tensor::matrix(1, s.len(), s.to_vec())?;
    let a = policy.act_batch(&st)?;
    let wt = Tensor::matrix(1, w.len(), w.to_vec())?;
    Ok(model.step(&st, &a, &wt)?.into_data())
}

/// A rollout of the generative model.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTrajectory {
    /// `ŝ(0..=T)`, shorter when truncated.
    pub states: Vec<Vec<f64>>,
    /// `π(ŝ(t))` for every stored state.
    pub actions: Vec<Vec<f64>>,
    /// `w(0..T)` actually used.
    pub noise: Vec<Vec<f64>>,
    /// Set when a state exceeded [`BLOWUP`]; the offending state is dropped.
    pub truncated: bool,
}

/// Rolls out a batch with caller-supplied noise: `noise[t]` is `[rows, n]`.
pub fn rollout_batch_with_noise(
    model: &GenerativeModel,
    policy: &Policy,
    s0: &Tensor,
    noise: &[Tensor],
) -> Result<Vec<SyntheticTrajectory>> {
    let rows = s0.rows();
    let n = model.state_dim();
    if s0.cols() != n {
        return Err(Error::shape("rollout", format!("initial states {:?}", s0.shape())));
    }
    let mut out: Vec<SyntheticTrajectory> = (0..rows)
        .map(|_| SyntheticTrajectory {
            states: Vec::with_capacity(noise.len() + 1),
            actions: Vec::with_capacity(noise.len() + 1),
            noise: Vec::with_capacity(noise.len()),
            truncated: false,
        })
        .collect();
    let mut s = s0.clone();
    for t in 0..=noise.len() {
        let a = policy.act_batch(&s)?;
        for (i, tr) in out.iter_mut().enumerate() {
            if !tr.truncated {
                tr.states.push(s.row(i).to_vec());
                tr.actions.push(a.row(i).to_vec());
            }
        }
        if t == noise.len() {
            break;
        }
        let w = &noise[t];
        if w.shape() != s.shape() {
            return Err(Error::shape("rollout", format!("noise {:?} at t={t}", w.shape())));
        }
        let next = model.step(&s, &a, w)?;
        // Truncated rows keep feeding their last finite state so the batch
        // stays well-defined; nothing more is recorded for them.
        let mut data = next.into_data();
        for (i, tr) in out.iter_mut().enumerate() {
            let row = &mut data[i * n..(i + 1) * n];
            if tr.truncated {
                row.copy_from_slice(s.row(i));
            } else if row.iter().any(|v| v.abs() > BLOWUP) {
                tr.truncated = true;
                row.copy_from_slice(s.row(i));
            } else {
                tr.noise.push(w.row(i).to_vec());
            }
        }
        s = Tensor::matrix(rows, n, data)?;
    }
    Ok(out)
}

/// Rolls out a batch, drawing `T` noise matrices from `rng` in time order.
pub fn rollout_batch(
    model: &GenerativeModel,
    policy: &Policy,
    s0: &Tensor,
    horizon: usize,
    rng: &mut Rng,
) -> Result<Vec<SyntheticTrajectory>> {
    let noise = draw_noise(rng, s0.rows(), model.state_dim(), horizon);
    rollout_batch_with_noise(model, policy, s0, &noise)
}

/// `T` steps from `s0` with i.i.d. standard-normal noise.
pub fn rollout(
    model: &GenerativeModel,
    policy: &Policy,
    s0: &[f64],
    horizon: usize,
    rng: &mut Rng,
) -> Result<SyntheticTrajectory> {
    if horizon == 0 {
        return Err(Error::contract("rollout horizon must be at least 1"));
    }
    let s = Tensor::matrix(1, s0.len(), s0.to_vec())?;
    Ok(rollout_batch(model, policy, &s, horizon, rng)?.remove(0))
}

/// `T` standard-normal `[rows, n]` matrices.
pub fn draw_noise(rng: &mut Rng, rows: usize, n: usize, horizon: usize) -> Vec<Tensor> {
    (0..horizon)
        .map(|_| Tensor::from_parts(vec![rows, n], rng::standard_normals(rng, rows * n)))
        .collect()
}

/// Rows per independent stream in [`rollout_many`].
pub const ROLLOUT_CHUNK: usize = 64;

/// Rolls out from each initial state; chunk `k` of [`ROLLOUT_CHUNK`] states
/// uses stream `k` under `seed`, so results do not depend on scheduling.
pub fn rollout_many(
    model: &GenerativeModel,
    policy: &Policy,
    s0: &[Vec<f64>],
    horizon: usize,
    seed: u64,
) -> Result<Vec<SyntheticTrajectory>> {
    let chunks: Vec<Vec<SyntheticTrajectory>> = s0
        .par_chunks(ROLLOUT_CHUNK)
        .enumerate()
        .map(|(k, chunk)| {
            let mut rng = rng::indexed_stream(seed, k as u64);
            rollout_batch(model, policy, &Tensor::from_rows(chunk)?, horizon, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Teacher-forced inputs and targets of a trajectory: `(s(0..T), a(0..T), s(1..=T))`.
fn transitions(trajs: &[&Trajectory]) -> Result<(Tensor, Tensor, Tensor)> {
    let mut s = Vec::new();
    let mut a = Vec::new();
    let mut y = Vec::new();
    for tr in trajs {
        if tr.states.len() < 2 {
            return Err(Error::contract("a trajectory needs at least two states"));
        }
        let t = tr.states.len() - 1;
        s.extend(tr.states[..t].iter().cloned());
        a.extend(tr.actions[..t].iter().cloned());
        y.extend(tr.states[1..].iter().cloned());
    }
    Ok((Tensor::from_rows(&s)?, Tensor::from_rows(&a)?, Tensor::from_rows(&y)?))
}

fn require_stochastic(model: &GenerativeModel) -> Result<()> {
    if model.is_deterministic() {
        return Err(Error::contract("a deterministic model has no likelihood"));
    }
    Ok(())
}

/// `-Σ_t log N(s(t+1) | Ĝ(s(t), a(t)), diag(Σ̂(s(t))²))` on a real trajectory.
///
/// Actions are the recorded ones, so the policy does not enter.
pub fn gen_nll(model: &GenerativeModel, real: &Trajectory) -> Result<f64> {
    require_stochastic(model)?;
    let (s, a, y) = transitions(&[real])?;
    let mu = model.mean(&s, &a)?;
    let sd = model.std(&s)?;
    let mut total = 0.0;
    for ((m, v), o) in mu.data().iter().zip(sd.data()).zip(y.data()) {
        let z = (o - m) / v;
        total += HALF_LN_TWO_PI + v.max(diffcore::LN_EPS).ln() + 0.5 * z * z;
    }
    if !total.is_finite() {
        return Err(Error::non_finite("gen_nll"));
    }
    Ok(total)
}

/// Mean per-transition NLL over `trajs` on a graph (the training loss).
pub fn gen_nll_graph(
    g: &mut Graph,
    model: &GenerativeModel,
    bound: &BoundModel,
    trajs: &[&Trajectory],
) -> Result<NodeId> {
    require_stochastic(model)?;
    let (s, a, y) = transitions(trajs)?;
    let count = s.rows();
    let n = model.state_dim();
    let s = g.constant(s);
    let a = g.constant(a);
    let y = g.constant(y);
    let mu = bound.mean(g, model, s, a)?;
    let sd = bound.std(g, model, s)?.expect("stochastic model has a diffusion network");
    let resid = g.sub(y, mu)?;
    let z = g.div(resid, sd)?;
    let z2 = g.square(z)?;
    let quad = g.sum(z2)?;
    let half_quad = g.scale(quad, 0.5)?;
    let log_sd = g.ln(sd)?;
    let log_det = g.sum(log_sd)?;
    let nll = g.add(half_quad, log_det)?;
    let nll = g.offset(nll, HALF_LN_TWO_PI * (count * n) as f64)?;
    g.scale(nll, 1.0 / count as f64)
}

/// Adam states for the drift and diffusion networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOptimizer {
    pub drift: AdamState,
    pub diffusion: Option<AdamState>,
}

impl ModelOptimizer {
    pub fn new(model: &GenerativeModel, lr: f64) -> Self {
        Self {
            drift: AdamState::new(&model.drift.params, lr),
            diffusion: model.diffusion.as_ref().map(|d| AdamState::new(&d.params, lr)),
        }
    }
}

/// Result of [`train_generative`].
#[derive(Clone, Debug)]
pub struct GenTraining {
    pub model: GenerativeModel,
    pub optimizer: ModelOptimizer,
    /// Mean per-transition NLL of each step's minibatch, before the update.
    pub losses: Vec<f64>,
}

/// `steps` Adam steps on the mean per-transition NLL. Each minibatch holds all
/// transitions of `batch_trajectories` trajectories drawn uniformly from
/// `dataset` with `rng`.
pub fn train_generative(
    model: &GenerativeModel,
    dataset: &[Trajectory],
    steps: usize,
    batch_trajectories: usize,
    optimizer: &ModelOptimizer,
    rng: &mut Rng,
) -> Result<GenTraining> {
    require_stochastic(model)?;
    if dataset.is_empty() {
        return Err(Error::contract("generative training needs a nonempty dataset"));
    }
    if batch_trajectories == 0 {
        return Err(Error::contract("minibatch must hold at least one trajectory"));
    }
    let mut model = model.clone();
    let mut opt = optimizer.clone();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch: Vec<&Trajectory> = (0..batch_trajectories)
            .map(|_| &dataset[rng.gen_range(0..dataset.len())])
            .collect();
        let mut g = Graph::new();
        let bound = BoundModel::bind(&mut g, &model, true);
        let loss = gen_nll_graph(&mut g, &model, &bound, &batch)
            .map_err(|e| divergence(e, step))?;
        let value = g.value(loss).item()?;
        let grads = g.backward(loss)?;
        let gd = bound.drift.gradients(&grads, &model.drift.params);
        let (p, s) = nn::adam_step(&model.drift.params, &gd, &opt.drift).map_err(|e| divergence(e, step))?;
        model.drift.params = p;
        opt.drift = s;
        if let (Some(net), Some(b), Some(st)) = (model.diffusion.as_mut(), bound.diffusion.as_ref(), opt.diffusion.as_mut()) {
            let gs = b.gradients(&grads, &net.params);
            let (p, s) = nn::adam_step(&net.params, &gs, st).map_err(|e| divergence(e, step))?;
            net.params = p;
            *st = s;
        }
        losses.push(value);
    }
    Ok(GenTraining {
        model,
        optimizer: opt,
        losses,
    })
}

fn divergence(e: Error, step: usize) -> Error {
    if e.is_numeric() {
        Error::Divergence(format!("generative training step {step}: {e}"))
    } else {
        e
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamSet;
    use crate::testing::{central_difference, first_mismatch, FD_ABS, FD_REL, FD_STEP};
    use rand::SeedableRng;

    fn small_model(seed: u64) -> GenerativeModel {
        GenerativeModel::new(2, 1, &[8], Some(&[8]), 0.1, seed).unwrap()
    }

    fn small_policy(seed: u64) -> Policy {
        let spec = MlpSpec::with_hidden(2, &[6], 1, Activation::Identity).unwrap();
        Policy::new(Mlp::new(spec, seed), 2.0).unwrap()
    }

    #[test]
    fn zero_noise_is_drift_only() {
        let m = small_model(1);
        let p = small_policy(2);
        let s = [0.3, -0.4];
        let next = sde_step(&m, &p, &s, &[0.0, 0.0]).unwrap();
        let st = Tensor::matrix(1, 2, s.to_vec()).unwrap();
        let mean = m.mean(&st, &p.act_batch(&st).unwrap()).unwrap();
        assert_eq!(next, mean.into_data());
    }

    #[test]
    fn deterministic_model_ignores_noise() {
        let mut m = small_model(1);
        m.diffusion = None;
        let p = small_policy(2);
        let a = sde_step(&m, &p, &[0.3, -0.4], &[5.0, -7.0]).unwrap();
        let b = sde_step(&m, &p, &[0.3, -0.4], &[0.0, 0.0]).unwrap();
        assert_eq!(a, b);
        assert!(gen_nll(&m, &real_from_states(vec![vec![0.0, 0.0]; 3])).is_err());
    }

    #[test]
    fn diffusion_is_strictly_positive() {
        let m = small_model(4);
        let s = Tensor::from_rows(&[[100.0, -100.0], [0.0, 0.0], [-1e5, 3.0]]).unwrap();
        assert!(m.std(&s).unwrap().data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn step_covariance_matches_diffusion() {
        let m = small_model(5);
        let p = small_policy(6);
        let s = [0.2, 0.7];
        let st = Tensor::matrix(1, 2, s.to_vec()).unwrap();
        let sd = m.std(&st).unwrap();
        let mut rng = Rng::seed_from_u64(7);
        let n = 100_000;
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|_| sde_step(&m, &p, &s, &rng::standard_normals(&mut rng, 2)).unwrap())
            .collect();
        let mean: Vec<f64> = (0..2).map(|k| draws.iter().map(|d| d[k]).sum::<f64>() / n as f64).collect();
        for i in 0..2 {
            for j in 0..2 {
                let c = draws.iter().map(|d| (d[i] - mean[i]) * (d[j] - mean[j])).sum::<f64>() / (n - 1) as f64;
                if i == j {
                    let expected = sd.data()[i].powi(2);
                    assert!((c - expected).abs() / expected < 0.05, "var {i}: {c} vs {expected}");
                } else {
                    let scale = sd.data()[0] * sd.data()[1];
                    assert!(c.abs() / scale < 0.05, "cov {c}");
                }
            }
        }
    }

    #[test]
    fn rollout_base_case_determinism_and_replay() {
        let m = small_model(8);
        let p = small_policy(9);
        let s0 = [0.1, 0.2];
        let mut rng = Rng::seed_from_u64(10);
        let one = rollout(&m, &p, &s0, 1, &mut rng).unwrap();
        assert_eq!(one.states.len(), 2);
        assert_eq!(one.noise.len(), 1);
        assert_eq!(one.states[1], sde_step(&m, &p, &s0, &one.noise[0]).unwrap());

        let a = rollout(&m, &p, &s0, 25, &mut Rng::seed_from_u64(11)).unwrap();
        let b = rollout(&m, &p, &s0, 25, &mut Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.states.len(), 26);
        assert_eq!(a.noise.len(), 25);
        assert_eq!(a.actions.len(), 26);
        for t in 0..25 {
            assert_eq!(a.states[t + 1], sde_step(&m, &p, &a.states[t], &a.noise[t]).unwrap());
            assert_eq!(a.actions[t], p.act(&a.states[t]).unwrap());
        }
        assert!(rollout(&m, &p, &s0, 0, &mut rng).is_err());
    }

    #[test]
    fn rollout_many_is_schedule_independent() {
        let m = small_model(12);
        let p = small_policy(13);
        let s0: Vec<Vec<f64>> = (0..150).map(|i| vec![i as f64 * 0.01, -0.5]).collect();
        let a = rollout_many(&m, &p, &s0, 10, 3).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| rollout_many(&m, &p, &s0, 10, 3).unwrap());
        assert_eq!(a.len(), 150);
        assert_eq!(a, b);
    }

    #[test]
    fn blowup_truncates() {
        let mut m = small_model(14);
        // Drift rate 1e8 on every output.
        let last = m.drift.spec.num_layers() - 1;
        let name = format!("layer{last}.bias");
        let entries = m
            .drift
            .params
            .iter()
            .map(|(n, t)| {
                let t = if n == name { Tensor::full(t.shape(), 1e8) } else { t.clone() };
                (n.to_string(), t)
            })
            .collect();
        m.drift.params = ParamSet::new(entries);
        let p = small_policy(15);
        let tr = rollout(&m, &p, &[0.0, 0.0], 5, &mut Rng::seed_from_u64(1)).unwrap();
        assert!(tr.truncated);
        assert_eq!(tr.states.len(), 1);
        assert!(tr.noise.is_empty());
    }

    fn real_from_states(states: Vec<Vec<f64>>) -> Trajectory {
        let t = states.len();
        Trajectory {
            actions: vec![vec![0.0]; t],
            rewards: vec![0.0; t],
            states,
            unsafe_hit: None,
        }
    }

    /// A 2-state, 1-action model whose mean is exactly `s` and std exactly 1.
    fn unit_model() -> GenerativeModel {
        let drift_spec = MlpSpec::new(vec![3, 2], Activation::Identity).unwrap();
        let diff_spec = MlpSpec::new(vec![2, 2], Activation::Identity).unwrap();
        // softplus(b) = 1  <=>  b = ln(e - 1).
        let b = (std::f64::consts::E - 1.0).ln();
        let diffusion = Mlp::from_parts(
            diff_spec,
            ParamSet::new(vec![
                ("layer0.weight".into(), Tensor::zeros(&[2, 2])),
                ("layer0.bias".into(), Tensor::full(&[1, 2], b)),
            ]),
        )
        .unwrap();
        GenerativeModel {
            drift: Mlp::from_parts(drift_spec.clone(), nn::init_params(&drift_spec, 0).zeros_like()).unwrap(),
            diffusion: Some(diffusion),
            dt: 1.0,
            action_scale: 1.0,
            min_std: 0.0,
        }
    }

    #[test]
    fn nll_at_the_mean_is_log_two_pi() {
        let m = unit_model();
        let tr = real_from_states(vec![vec![0.4, -0.3], vec![0.4, -0.3]]);
        let v = gen_nll(&m, &tr).unwrap();
        assert!((v - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12, "{v}");

        let mut g = Graph::new();
        let b = BoundModel::bind(&mut g, &m, true);
        let l = gen_nll_graph(&mut g, &m, &b, &[&tr]).unwrap();
        assert!((g.value(l).item().unwrap() - v).abs() < 1e-12);
    }

    #[test]
    fn nll_grows_with_residual() {
        let m = unit_model();
        let mut prev = f64::NEG_INFINITY;
        for k in 0..6 {
            let d = 0.3 * k as f64;
            let v = gen_nll(&m, &real_from_states(vec![vec![0.0, 0.0], vec![d, -d]])).unwrap();
            assert!(v > prev);
            prev = v;
        }
        assert!(gen_nll(&m, &real_from_states(vec![vec![0.0, 0.0]])).is_err());
    }

    fn sample_dataset(model: &GenerativeModel, count: usize, horizon: usize, seed: u64) -> Vec<Trajectory> {
        let mut rng = Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let mut s = vec![rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
                let mut states = vec![s.clone()];
                let mut actions = Vec::new();
                for _ in 0..horizon {
                    let a = vec![rng.gen_range(-1.0..1.0)];
                    let st = Tensor::matrix(1, 2, s.clone()).unwrap();
                    let at = Tensor::matrix(1, 1, a.clone()).unwrap();
                    let w = Tensor::matrix(1, 2, rng::standard_normals(&mut rng, 2)).unwrap();
                    s = model.step(&st, &at, &w).unwrap().into_data();
                    states.push(s.clone());
                    actions.push(a);
                }
                actions.push(vec![0.0]);
                Trajectory {
                    rewards: vec![0.0; states.len()],
                    states,
                    actions,
                    unsafe_hit: None,
                }
            })
            .collect()
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        let m = small_model(20);
        let data = sample_dataset(&small_model(21), 2, 4, 22);
        let refs: Vec<&Trajectory> = data.iter().collect();
        let mut g = Graph::new();
        let b = BoundModel::bind(&mut g, &m, true);
        let l = gen_nll_graph(&mut g, &m, &b, &refs).unwrap();
        let grads = g.backward(l).unwrap();
        let per_transition = |mm: &GenerativeModel| {
            data.iter().map(|t| gen_nll(mm, t).unwrap()).sum::<f64>() / 8.0
        };

        let analytic = b.drift().gradients(&grads, &m.drift.params).flatten();
        let x = m.drift.params.flatten();
        let numeric = central_difference(
            |p| {
                let mut mm = m.clone();
                mm.drift.params = m.drift.params.with_flat(p).unwrap();
                per_transition(&mm)
            },
            &x,
            FD_STEP,
        );
        assert_eq!(first_mismatch(&analytic, &numeric, FD_REL, FD_ABS), None);

        let dp = &m.diffusion.as_ref().unwrap().params;
        let analytic = b.diffusion().unwrap().gradients(&grads, dp).flatten();
        let numeric = central_difference(
            |p| {
                let mut mm = m.clone();
                mm.diffusion.as_mut().unwrap().params = dp.with_flat(p).unwrap();
                per_transition(&mm)
            },
            &dp.flatten(),
            FD_STEP,
        );
        assert_eq!(first_mismatch(&analytic, &numeric, FD_REL, FD_ABS), None);
    }

    #[test]
    fn step_gradient_wrt_policy_matches_finite_differences() {
        let m = small_model(23);
        let p = small_policy(24);
        let s = Tensor::from_rows(&[[0.3, -0.2], [1.0, 0.5]]).unwrap();
        let w = Tensor::from_rows(&[[0.7, -1.1], [0.2, 0.4]]).unwrap();
        let weights = [0.3, -1.2, 0.8, 0.5];
        let objective = |next: &[f64]| next.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>();

        let mut g = Graph::new();
        let mb = BoundModel::bind(&mut g, &m, false);
        let pb = BoundParams::bind(&mut g, &p.net.params, true);
        let sn = g.constant(s.clone());
        let (_, next) = mb.step(&mut g, &m, &p, &pb, sn, &w).unwrap();
        let wt = g.constant(Tensor::matrix(2, 2, weights.to_vec()).unwrap());
        let prod = g.mul(next, wt).unwrap();
        let out = g.sum(prod).unwrap();
        let grads = g.backward(out).unwrap();
        let analytic = pb.gradients(&grads, &p.net.params).flatten();
        let numeric = central_difference(
            |x| {
                let mut pp = p.clone();
                pp.net.params = p.net.params.with_flat(x).unwrap();
                let a = pp.act_batch(&s).unwrap();
                objective(m.step(&s, &a, &w).unwrap().data())
            },
            &p.net.params.flatten(),
            FD_STEP,
        );
        assert_eq!(first_mismatch(&analytic, &numeric, FD_REL, FD_ABS), None);
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let m = small_model(30);
        let data = sample_dataset(&m, 2, 3, 31);
        let opt = ModelOptimizer::new(&m, 1e-3);
        let out = train_generative(&m, &data, 0, 1, &opt, &mut Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out.model, m);
        assert!(out.losses.is_empty());
        assert!(train_generative(&m, &[], 1, 1, &opt, &mut Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let m = small_model(32);
        let data = sample_dataset(&small_model(33), 5, 6, 34);
        let opt = ModelOptimizer::new(&m, 1e-2);
        let a = train_generative(&m, &data, 20, 2, &opt, &mut Rng::seed_from_u64(2)).unwrap();
        let b = train_generative(&m, &data, 20, 2, &opt, &mut Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.optimizer, b.optimizer);
    }

    #[test]
    fn likelihood_calibration_on_self_generated_data() {
        // Teacher with a clearly nonzero drift and state-dependent noise.
        let teacher = GenerativeModel::new(2, 1, &[12], Some(&[12]), 0.1, 40).unwrap();
        // Held-out excess NLL of a fitted model scales like (#params / 2) per
        // training transition, so the 2% band needs ~2e4 transitions.
        let train = sample_dataset(&teacher, 1000, 20, 41);
        let held_out = sample_dataset(&teacher, 100, 20, 42);
        let held_nll = |m: &GenerativeModel| held_out.iter().map(|t| gen_nll(m, t).unwrap()).sum::<f64>();

        let student = GenerativeModel::new(2, 1, &[12], Some(&[12]), 0.1, 43).unwrap();
        let opt = ModelOptimizer::new(&student, 5e-3);
        let before = held_nll(&student);
        let fit = train_generative(&student, &train, 12000, 8, &opt, &mut Rng::seed_from_u64(44)).unwrap();
        let after = held_nll(&fit.model);
        let reference = held_nll(&teacher);
        assert!(after < before);
        assert!(
            (after - reference).abs() <= 0.02 * reference.abs(),
            "student {after}, teacher {reference}"
        );
    }
}
