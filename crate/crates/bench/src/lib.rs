//! Shared fixtures for the benchmarks.

use sbrl_core::barrier::{BarrierNet, BarrierSampler, BarrierSamples};
use sbrl_core::envs::EnvSpec;
use sbrl_core::nn::{Activation, Mlp, MlpSpec, Policy};
use sbrl_core::orchestrator::TrainConfig;
use sbrl_core::rng;
use sbrl_core::sdegen::{self, GenerativeModel};

pub const WIDTH: usize = 64;

pub struct Fixture {
    pub env: EnvSpec,
    pub policy: Policy,
    pub model: GenerativeModel,
    pub barrier: BarrierNet,
}

impl Fixture {
    pub fn new(env: EnvSpec) -> Self {
        let hidden = [WIDTH, WIDTH];
        let spec = MlpSpec::with_hidden(env.state_dim, &hidden, env.action_dim, Activation::Identity).unwrap();
        let policy = Policy::new(Mlp::new(spec, 1), env.action_bound).unwrap();
        let model = GenerativeModel::new(env.state_dim, env.action_dim, &hidden, Some(&hidden), env.dt, 2)
            .unwrap()
            .with_action_scale(env.action_bound)
            .unwrap();
        let barrier = BarrierNet::new(env.state_dim, &hidden, 3).unwrap();
        Self {
            env,
            policy,
            model,
            barrier,
        }
    }

    /// Barrier-loss samples drawn the way one training iteration draws them.
    pub fn barrier_samples(&self, rollouts: usize, lie_samples: usize) -> BarrierSamples {
        let mut r = rng::substream(4, "bench");
        let starts: Vec<Vec<f64>> = (0..rollouts).map(|_| self.env.sample_initial(&mut r).unwrap()).collect();
        let pool = sdegen::rollout_many(&self.model, &self.policy, &starts, self.env.horizon, 5).unwrap();
        let sampler = BarrierSampler::new(&self.env, self.env.unsafe_region.clone(), &pool).unwrap();
        let k = 4 * rollouts;
        sampler.draw(k, k, k, lie_samples, &mut r).unwrap()
    }
}

/// The default 2D config shrunk to a few iterations.
pub fn short_config(iters: usize) -> TrainConfig {
    let mut c = TrainConfig::for_env("2d");
    c.training.outer_iters = iters;
    c
}
