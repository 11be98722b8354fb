//! Pathwise policy gradients through the generative model.

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::nn::{self, AdamState, BoundParams, ParamSet, Policy};
use crate::sdegen::{self, BoundModel, GenerativeModel};

/// A known reward `r(s, a)`, evaluable on a graph for a batch.
pub trait Reward {
    /// `[rows, 1]` rewards for `[rows, n]` states and `[rows, m]` actions.
    fn graph(&self, g: &mut Graph, states: NodeId, actions: NodeId) -> Result<NodeId>;
}

impl Reward for EnvSpec {
    fn graph(&self, g: &mut Graph, states: NodeId, actions: NodeId) -> Result<NodeId> {
        self.reward_graph(g, states, actions)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReturnEstimate {
    /// Mean of `per_trajectory`.
    pub value: f64,
    pub per_trajectory: Vec<f64>,
    /// Rollouts dropped because they blew up.
    pub excluded: usize,
    pub horizon: usize,
    pub gamma: f64,
}

/// `Ĵ` and its gradient with respect to the policy parameters.
#[derive(Clone, Debug)]
pub struct ReturnGradient {
    pub estimate: ReturnEstimate,
    pub grad: ParamSet,
}

/// `(1/N) Σ_i Σ_{t=0}^{T} γ^t r(ŝ^i(t), π(ŝ^i(t)))` over model rollouts from
/// `init_states` driven by `noise` (`T` matrices shaped like `init_states`).
///
/// Rollouts that blow up are excluded from the mean; if all do, this is a
/// numeric error.
pub fn synthetic_return(
    model: &GenerativeModel,
    policy: &Policy,
    init_states: &Tensor,
    noise: &[Tensor],
    gamma: f64,
    reward: &dyn Reward,
) -> Result<ReturnGradient> {
    if init_states.shape().len() != 2 || init_states.rows() == 0 {
        return Err(Error::contract("need at least one initial state"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::contract(format!("discount {gamma} outside [0, 1]")));
    }
    let horizon = noise.len();
    // A tape-free pass finds the rows that stay bounded.
    let probe = sdegen::rollout_batch_with_noise(model, policy, init_states, noise)?;
    let keep: Vec<usize> = (0..probe.len()).filter(|&i| !probe[i].truncated).collect();
    let excluded = probe.len() - keep.len();
    if keep.is_empty() {
        return Err(Error::non_finite("every synthetic rollout blew up"));
    }
    if excluded > 0 {
        log::warn!("{excluded} synthetic rollouts blew up and were excluded from the return");
    }
    let select = |t: &Tensor| -> Result<Tensor> {
        let rows: Vec<&[f64]> = keep.iter().map(|&i| t.row(i)).collect();
        Tensor::from_rows(&rows)
    };

    let mut g = Graph::new();
    let pp = BoundParams::bind(&mut g, &policy.net.params, true);
    let mb = BoundModel::bind(&mut g, model, false);
    let mut s = g.constant(select(init_states)?);
    let mut total: Option<NodeId> = None;
    let mut disc = 1.0;
    for t in 0..=horizon {
        let a = policy.forward(&mut g, &pp, s)?;
        let r = reward.graph(&mut g, s, a)?;
        let term = g.scale(r, disc)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
        if t == horizon || gamma == 0.0 {
            break;
        }
        s = mb.step_with_actions(&mut g, model, s, a, &select(&noise[t])?)?;
        disc *= gamma;
    }
    let per_row = total.expect("at least one reward term");
    let value = g.mean(per_row)?;
    let grads = g.backward(value)?;
    Ok(ReturnGradient {
        estimate: ReturnEstimate {
            value: g.value(value).item()?,
            per_trajectory: g.value(per_row).data().to_vec(),
            excluded,
            horizon,
            gamma,
        },
        grad: pp.gradients(&grads, &policy.net.params),
    })
}

/// One Adam step along `λ ∂L_B/∂θ - ∂Ĵ/∂θ`: descend the barrier loss and
/// ascend the return.
pub fn combined_policy_update(
    params: &ParamSet,
    barrier_grad: &ParamSet,
    return_grad: &ParamSet,
    lambda: f64,
    optimizer: &AdamState,
) -> Result<(ParamSet, AdamState)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::contract(format!("lambda {lambda} must be a nonnegative number")));
    }
    for (name, grad) in [("barrier", barrier_grad), ("return", return_grad)] {
        if let Some((p, _)) = grad.iter().find(|(_, t)| !t.is_all_finite()) {
            return Err(Error::non_finite(format!("{name} gradient of policy parameter `{p}`")));
        }
    }
    let direction = barrier_grad.combine(lambda, return_grad, -1.0)?;
    nn::adam_step(params, &direction, optimizer)
}
