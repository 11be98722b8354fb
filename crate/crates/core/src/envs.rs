//! Simulated plants, region geometry and empirical safety evaluation.
//!
//! The plants stand in for the unknown environment: training only ever sees
//! their sampled trajectories. Every step takes its noise as an explicit
//! standard-normal vector so that a trajectory can be replayed bit-exactly,
//! and so a real rollout and a surrogate rollout can share the same draws.

use std::fmt;
use std::io::Write;

use rand::Rng as _;
use rayon::prelude::*;

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::nn::Policy;
use crate::rng::{self, Rng};
use crate::sdegen::SyntheticTrajectory;

/// Closed interval; either end may be infinite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::contract(format!("empty interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn unbounded() -> Self {
        Self {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn intersect(&self, other: &Interval) -> Option<Interval> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (lo <= hi).then_some(Interval { lo, hi })
    }
}

/// A set of states used for `S`, `S_0` and `S_u`.
#[derive(Clone, Debug, PartialEq)]
pub enum Region {
    Empty,
    /// Per-dimension intervals; unconstrained dimensions use infinite ends.
    Box(Vec<Interval>),
    /// Euclidean ball over a subset of dimensions; other dimensions are free.
    Ball {
        state_dim: usize,
        dims: Vec<usize>,
        center: Vec<f64>,
        radius: f64,
    },
}

impl Region {
    pub fn boxed(bounds: &[(f64, f64)]) -> Result<Self> {
        Ok(Region::Box(
            bounds
                .iter()
                .map(|&(lo, hi)| Interval::new(lo, hi))
                .collect::<Result<_>>()?,
        ))
    }

    pub fn ball(state_dim: usize, dims: Vec<usize>, center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) || dims.len() != center.len() || dims.iter().any(|&d| d >= state_dim) {
            return Err(Error::contract(format!(
                "invalid ball: dims {dims:?}, center {center:?}, radius {radius}"
            )));
        }
        Ok(Region::Ball {
            state_dim,
            dims,
            center,
            radius,
        })
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        let expected = match self {
            Region::Empty => return Ok(()),
            Region::Box(iv) => iv.len(),
            Region::Ball { state_dim, .. } => *state_dim,
        };
        if expected != n {
            return Err(Error::contract(format!(
                "region has dimension {expected}, state has {n}"
            )));
        }
        Ok(())
    }

    /// Membership with closed boundaries.
    pub fn contains(&self, s: &[f64]) -> Result<bool> {
        self.check_dim(s.len())?;
        Ok(match self {
            Region::Empty => false,
            Region::Box(iv) => iv.iter().zip(s).all(|(i, &v)| i.contains(v)),
            Region::Ball {
                dims,
                center,
                radius,
                ..
            } => {
                let d2: f64 = dims
                    .iter()
                    .zip(center)
                    .map(|(&k, c)| (s[k] - c).powi(2))
                    .sum();
                d2 <= radius * radius
            }
        })
    }

    /// Grows the region by `delta` per dimension (a superset of the
    /// Minkowski sum with the box `[-delta, delta]`).
    ///
    /// Boxes widen each interval by `delta_k`; balls grow their radius by the
    /// Euclidean norm of `delta` restricted to the ball's dimensions.
    pub fn minkowski_enlarge(&self, delta: &[f64]) -> Result<Region> {
        self.check_dim(delta.len())?;
        if let Some(d) = delta.iter().find(|d| !(**d >= 0.0) || !d.is_finite()) {
            return Err(Error::contract(format!("enlargement {d} must be nonnegative")));
        }
        Ok(match self {
            Region::Empty => Region::Empty,
            Region::Box(iv) => Region::Box(
                iv.iter()
                    .zip(delta)
                    .map(|(i, d)| Interval {
                        lo: i.lo - d,
                        hi: i.hi + d,
                    })
                    .collect(),
            ),
            Region::Ball {
                state_dim,
                dims,
                center,
                radius,
            } => Region::Ball {
                state_dim: *state_dim,
                dims: dims.clone(),
                center: center.clone(),
                radius: radius + dims.iter().map(|&k| delta[k] * delta[k]).sum::<f64>().sqrt(),
            },
        })
    }

    /// Uniform sample from the region intersected with the bounded box `within`.
    pub fn sample(&self, within: &[Interval], rng: &mut Rng) -> Result<Vec<f64>> {
        self.check_dim(within.len())?;
        let uniform = |iv: &Interval, rng: &mut Rng| -> Result<f64> {
            if !iv.lo.is_finite() || !iv.hi.is_finite() {
                return Err(Error::contract("cannot sample an unbounded interval"));
            }
            Ok(if iv.lo == iv.hi {
                iv.lo
            } else {
                rng.gen_range(iv.lo..=iv.hi)
            })
        };
        match self {
            Region::Empty => Err(Error::contract("cannot sample the empty region")),
            Region::Box(iv) => iv
                .iter()
                .zip(within)
                .map(|(a, b)| {
                    let i = a
                        .intersect(b)
                        .ok_or_else(|| Error::contract("region lies outside the state bounds"))?;
                    uniform(&i, rng)
                })
                .collect(),
            Region::Ball {
                dims,
                center,
                radius,
                ..
            } => {
                let mut s = within
                    .iter()
                    .map(|iv| uniform(iv, rng))
                    .collect::<Result<Vec<_>>>()?;
                // Uniform in the d-ball: Gaussian direction, radius r * U^(1/d).
                let d = dims.len();
                let dir = rng::standard_normals(rng, d);
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
                let r = radius * rng.gen::<f64>().powf(1.0 / d as f64);
                for ((&k, c), u) in dims.iter().zip(center).zip(&dir) {
                    s[k] = c + r * u / norm;
                }
                Ok(s)
            }
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Region::Empty => write!(f, "empty"),
            Region::Box(iv) => {
                let parts: Vec<String> = iv.iter().map(|i| format!("[{}, {}]", i.lo, i.hi)).collect();
                write!(f, "{}", parts.join(" x "))
            }
            Region::Ball {
                dims,
                center,
                radius,
                ..
            } => write!(f, "ball(dims {dims:?}, center {center:?}, radius {radius})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    /// `ds1 = 0.8 s2 dt`, `ds2 = (a - 0.3 s1^3) dt + 0.2 dW`.
    Sde2d,
    /// Cart-pole with state `[x, theta, x_dot, theta_dot]` and force input;
    /// `theta > 0` leans the pole toward `-x`.
    Cartpole,
}

// Cart-pole constants.
const GRAVITY: f64 = 9.8;
const CART_MASS: f64 = 1.0;
const POLE_MASS: f64 = 0.1;
const POLE_HALF_LENGTH: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub dt: f64,
    pub horizon: usize,
    pub init_region: Region,
    pub unsafe_region: Region,
    /// Bounded box `S`; also bounds sampling of unbounded regions.
    pub state_bounds: Vec<Interval>,
    pub action_bound: f64,
    pub noise_scale: f64,
    /// Quadratic cost weights: `r = -(sum w_k s_k^2 + w_a |a|^2)`.
    pub state_cost: Vec<f64>,
    pub action_cost: f64,
    /// Std of the Gaussian action perturbation in the exploratory episodes
    /// added to the replay set; `0` means none are collected.
    pub exploration_std: f64,
}

impl EnvSpec {
    pub fn sde_2d() -> Self {
        Self {
            kind: EnvKind::Sde2d,
            state_dim: 2,
            action_dim: 1,
            dt: 0.05,
            horizon: 100,
            init_region: Region::ball(2, vec![0, 1], vec![-2.0, 0.0], 0.1).unwrap(),
            unsafe_region: Region::boxed(&[(-1.0, 0.0), (1.2, 1.7)]).unwrap(),
            state_bounds: vec![Interval { lo: -3.0, hi: 3.0 }; 2],
            action_bound: 3.0,
            noise_scale: 0.2,
            state_cost: vec![1.0, 1.0],
            action_cost: 0.1,
            exploration_std: 0.0,
        }
    }

    pub fn cartpole() -> Self {
        Self {
            kind: EnvKind::Cartpole,
            state_dim: 4,
            action_dim: 1,
            dt: 0.02,
            horizon: 150,
            init_region: Region::Box(vec![
                Interval { lo: -0.167, hi: 0.033 },
                Interval { lo: -0.6, hi: -0.5 },
                Interval::point(-0.35),
                Interval::point(0.53),
            ]),
            unsafe_region: Region::Box(vec![
                Interval { lo: f64::NEG_INFINITY, hi: -0.75 },
                Interval::unbounded(),
                Interval::unbounded(),
                Interval::unbounded(),
            ]),
            state_bounds: vec![
                Interval { lo: -2.4, hi: 2.4 },
                Interval { lo: -1.5, hi: 1.5 },
                Interval { lo: -3.0, hi: 3.0 },
                Interval { lo: -4.0, hi: 4.0 },
            ],
            action_bound: 10.0,
            noise_scale: 0.01,
            state_cost: vec![1.0, 10.0, 0.1, 0.1],
            action_cost: 0.001,
            exploration_std: 3.0,
        }
    }

    /// `"2d"` or `"cartpole"`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "2d" | "sde2d" => Ok(Self::sde_2d()),
            "cartpole" => Ok(Self::cartpole()),
            other => Err(Error::contract(format!("unknown environment `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            EnvKind::Sde2d => "2d",
            EnvKind::Cartpole => "cartpole",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.horizon == 0 {
            return Err(Error::contract("dt and horizon must be positive"));
        }
        if let (Region::Box(a), Region::Box(b)) = (&self.init_region, &self.unsafe_region) {
            if a.iter().zip(b).all(|(x, y)| x.intersect(y).is_some()) {
                return Err(Error::contract("initial and unsafe regions overlap"));
            }
        }
        Ok(())
    }

    /// One transition driven by the standard-normal vector `noise` (length
    /// `state_dim`; components the plant does not use are ignored).
    pub fn step(&self, s: &[f64], a: &[f64], noise: &[f64]) -> Vec<f64> {
        let dt = self.dt;
        let kick = self.noise_scale * dt.sqrt();
        match self.kind {
            EnvKind::Sde2d => {
                let (s1, s2) = (s[0], s[1]);
                vec![
                    s1 + 0.8 * s2 * dt,
                    s2 + (a[0] - 0.3 * s1 * s1 * s1) * dt + kick * noise[1],
                ]
            }
            EnvKind::Cartpole => {
                let (x, th, xd, thd) = (s[0], s[1], s[2], s[3]);
                let total = CART_MASS + POLE_MASS;
                let pml = POLE_MASS * POLE_HALF_LENGTH;
                let (sin, cos) = th.sin_cos();
                // Standard equations with theta measured positive when the
                // pole leans toward -x.
                let temp = (a[0] - pml * thd * thd * sin) / total;
                let th_acc = (GRAVITY * sin + cos * temp)
                    / (POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total));
                let x_acc = temp + pml * th_acc * cos / total;
                // Semi-implicit Euler: velocities first.
                let xd2 = xd + dt * x_acc + kick * noise[2];
                let thd2 = thd + dt * th_acc + kick * noise[3];
                vec![x + dt * xd2, th + dt * thd2, xd2, thd2]
            }
        }
    }

    pub fn reward(&self, s: &[f64], a: &[f64]) -> f64 {
        let state: f64 = self.state_cost.iter().zip(s).map(|(w, v)| w * v * v).sum();
        let action: f64 = a.iter().map(|v| v * v).sum();
        -(state + self.action_cost * action)
    }

    /// Differentiable rewards for a batch; returns a `[rows, 1]` column.
    pub fn reward_graph(&self, g: &mut Graph, states: NodeId, actions: NodeId) -> Result<NodeId> {
        let ws = g.constant(Tensor::matrix(self.state_dim, 1, self.state_cost.clone())?);
        let wa = g.constant(Tensor::full(&[self.action_dim, 1], self.action_cost));
        let s2 = g.square(states)?;
        let a2 = g.square(actions)?;
        let cs = g.matmul(s2, ws)?;
        let ca = g.matmul(a2, wa)?;
        let c = g.add(cs, ca)?;
        g.scale(c, -1.0)
    }

    pub fn sample_initial(&self, rng: &mut Rng) -> Result<Vec<f64>> {
        self.init_region.sample(&self.state_bounds, rng)
    }

    pub fn sample_unsafe(&self, rng: &mut Rng) -> Result<Vec<f64>> {
        self.unsafe_region.sample(&self.state_bounds, rng)
    }

    /// Noise for one episode: `horizon` standard-normal vectors.
    pub fn draw_noise(&self, rng: &mut Rng) -> Vec<Vec<f64>> {
        (0..self.horizon)
            .map(|_| rng::standard_normals(rng, self.state_dim))
            .collect()
    }
}

/// A rollout of the real plant.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `s(0..=T)`.
    pub states: Vec<Vec<f64>>,
    /// `a(0..=T)`; the last action only enters the final reward.
    pub actions: Vec<Vec<f64>>,
    /// `r(0..=T)`.
    pub rewards: Vec<f64>,
    /// First time index whose state lies in the unsafe region.
    pub unsafe_hit: Option<usize>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        let mut disc = 1.0;
        let mut total = 0.0;
        for r in &self.rewards {
            total += disc * r;
            disc *= gamma;
        }
        total
    }

    pub fn is_safe(&self) -> bool {
        self.unsafe_hit.is_none()
    }
}

/// Runs one episode from `s0` with the given per-step noise.
pub fn run_episode_with_noise(
    spec: &EnvSpec,
    policy: &Policy,
    s0: Vec<f64>,
    noise: &[Vec<f64>],
) -> Result<Trajectory> {
    run(spec, policy, s0, noise, None)
}

/// Like [`run_episode_with_noise`], but every action is perturbed by
/// `exploration_std * kicks[t]` and clipped to the action bound. `kicks`
/// holds one standard-normal vector per time step `0..=T`.
pub fn run_exploring_episode(
    spec: &EnvSpec,
    policy: &Policy,
    s0: Vec<f64>,
    noise: &[Vec<f64>],
    kicks: &[Vec<f64>],
) -> Result<Trajectory> {
    if kicks.len() != noise.len() + 1 {
        return Err(Error::contract(format!(
            "{} action perturbations for {} steps",
            kicks.len(),
            noise.len()
        )));
    }
    run(spec, policy, s0, noise, Some(kicks))
}

fn run(spec: &EnvSpec, policy: &Policy, s0: Vec<f64>, noise: &[Vec<f64>], kicks: Option<&[Vec<f64>]>) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(noise.len() + 1);
    let mut actions = Vec::with_capacity(noise.len() + 1);
    let mut rewards = Vec::with_capacity(noise.len() + 1);
    let mut unsafe_hit = None;
    let mut s = s0;
    for t in 0..=noise.len() {
        if unsafe_hit.is_none() && spec.unsafe_region.contains(&s)? {
            unsafe_hit = Some(t);
        }
        let mut a = policy.act(&s)?;
        if let Some(k) = kicks {
            for (v, w) in a.iter_mut().zip(&k[t]) {
                *v = (*v + spec.exploration_std * w).clamp(-spec.action_bound, spec.action_bound);
            }
        }
        rewards.push(spec.reward(&s, &a));
        let next = (t < noise.len()).then(|| spec.step(&s, &a, &noise[t]));
        states.push(s);
        actions.push(a);
        match next {
            Some(n) if n.iter().all(|v| v.is_finite()) => s = n,
            Some(_) => return Err(Error::non_finite(format!("environment state at t={}", t + 1))),
            None => break,
        }
    }
    Ok(Trajectory {
        states,
        actions,
        rewards,
        unsafe_hit,
    })
}

/// Samples an initial state and runs one full-horizon episode.
pub fn run_episode(spec: &EnvSpec, policy: &Policy, rng: &mut Rng) -> Result<Trajectory> {
    let s0 = spec.sample_initial(rng)?;
    let noise = spec.draw_noise(rng);
    run_episode_with_noise(spec, policy, s0, &noise)
}

/// Outcome of a batch of evaluation episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct SafeRate {
    pub rate: f64,
    pub episodes: usize,
    pub unsafe_episodes: usize,
    pub mean_return: f64,
    /// Binomial standard error of `rate`.
    pub std_error: f64,
}

/// Fraction of `episodes` independent episodes that never enter `S_u`.
///
/// Episode `i` uses stream `i` under `seed`; the result does not depend on
/// scheduling.
pub fn empirical_safe_rate(
    spec: &EnvSpec,
    policy: &Policy,
    episodes: usize,
    gamma: f64,
    seed: u64,
) -> Result<SafeRate> {
    if episodes == 0 {
        return Err(Error::contract("need at least one episode"));
    }
    let outcomes: Vec<(bool, f64)> = (0..episodes as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::indexed_stream(seed, i);
            let tr = run_episode(spec, policy, &mut rng)?;
            Ok((tr.is_safe(), tr.discounted_return(gamma)))
        })
        .collect::<Result<_>>()?;
    let safe = outcomes.iter().filter(|o| o.0).count();
    let rate = safe as f64 / episodes as f64;
    Ok(SafeRate {
        rate,
        episodes,
        unsafe_episodes: episodes - safe,
        mean_return: outcomes.iter().map(|o| o.1).sum::<f64>() / episodes as f64,
        std_error: (rate * (1.0 - rate) / episodes as f64).sqrt(),
    })
}

/// Componentwise `max_{pairs, t} |s_k(t) - ŝ_k(t)|`.
pub fn max_state_gap(real: &[Trajectory], synth: &[SyntheticTrajectory]) -> Result<Vec<f64>> {
    if real.len() != synth.len() || real.is_empty() {
        return Err(Error::contract(format!(
            "{} real vs {} synthetic trajectories",
            real.len(),
            synth.len()
        )));
    }
    let n = real[0].states[0].len();
    let mut delta = vec![0.0; n];
    for (r, s) in real.iter().zip(synth) {
        if r.states.len() != s.states.len() {
            return Err(Error::contract(format!(
                "paired trajectories have {} and {} states",
                r.states.len(),
                s.states.len()
            )));
        }
        for (a, b) in r.states.iter().zip(&s.states) {
            if a.len() != n || b.len() != n {
                return Err(Error::contract("state dimensions differ"));
            }
            for k in 0..n {
                delta[k] = f64::max(delta[k], (a[k] - b[k]).abs());
            }
        }
    }
    Ok(delta)
}

/// One row per timestep: episode, t, states, actions, reward, unsafe flag.
pub fn write_trajectories_csv(mut w: impl Write, trajectories: &[Trajectory]) -> Result<()> {
    let (n, m) = trajectories
        .first()
        .map_or((0, 0), |t| (t.states[0].len(), t.actions[0].len()));
    let mut header = vec!["episode".to_string(), "t".to_string()];
    header.extend((0..n).map(|k| format!("s{k}")));
    header.extend((0..m).map(|k| format!("a{k}")));
    header.extend(["reward".to_string(), "unsafe".to_string()]);
    writeln!(w, "{}", header.join(","))?;
    for (e, tr) in trajectories.iter().enumerate() {
        for t in 0..tr.states.len() {
            let mut row = vec![e.to_string(), t.to_string()];
            row.extend(tr.states[t].iter().map(f64::to_string));
            row.extend(tr.actions[t].iter().map(f64::to_string));
            row.push(tr.rewards[t].to_string());
            let hit = tr.unsafe_hit.is_some_and(|h| t >= h);
            row.push(u8::from(hit).to_string());
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}
