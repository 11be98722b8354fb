//! Multi-layer perceptrons, seeded initialization and Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{self, Gradients, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Softplus,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Softplus => g.softplus(x),
        }
    }

    fn eval(self, t: Tensor) -> Tensor {
        match self {
            Activation::Identity => t,
            Activation::Tanh => t.map(f64::tanh),
            Activation::Sigmoid => t.map(diffcore::sigmoid),
            Activation::Softplus => t.map(diffcore::softplus),
        }
    }
}

/// Layer layout of a fully connected network.
///
/// `layer_widths` includes the input and output widths. Hidden layers always
/// use `tanh`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, output_activation: Activation) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::contract("an MLP needs at least input and output widths"));
        }
        if layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::contract(format!(
                "layer widths must be positive: {layer_widths:?}"
            )));
        }
        if output_activation == Activation::Tanh {
            return Err(Error::contract("output activation must be identity, sigmoid or softplus"));
        }
        Ok(Self {
            layer_widths,
            output_activation,
        })
    }

    /// `input -> hidden... -> output`.
    pub fn with_hidden(
        input: usize,
        hidden: &[usize],
        output: usize,
        output_activation: Activation,
    ) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self::new(widths, output_activation)
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }
}

/// Named weight matrices and bias rows.
///
/// For an MLP the entries are ordered `layer0.weight, layer0.bias, ...`,
/// weights shaped `[fan_in, fan_out]` and biases `[1, fan_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// All entries concatenated in order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Same layout as `self`, values taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape(
                "with_flat",
                format!("{} values for {} parameters", flat.len(), self.num_scalars()),
            ));
        }
        let mut off = 0;
        let mut entries = Vec::with_capacity(self.entries.len());
        for (n, t) in &self.entries {
            let data = flat[off..off + t.len()].to_vec();
            off += t.len();
            entries.push((n.clone(), Tensor::new(t.shape().to_vec(), data)?));
        }
        Ok(Self { entries })
    }

    fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    /// `a * self + b * other`, entrywise.
    pub fn combine(&self, a: f64, other: &ParamSet, b: f64) -> Result<Self> {
        if !self.same_layout(other) {
            return Err(Error::shape("combine", "parameter layouts differ"));
        }
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((n, x), (_, y))| {
                let t = x.zip(y, |u, v| a * u + b * v);
                if !t.is_all_finite() {
                    return Err(Error::non_finite(format!("parameter `{n}`")));
                }
                Ok((n.clone(), t))
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    /// Euclidean norm over every entry.
    pub fn norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Xavier-uniform weights in `±sqrt(6/(fan_in+fan_out))`, zero biases.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(2 * spec.num_layers());
    for (l, pair) in spec.layer_widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        entries.push((
            format!("layer{l}.weight"),
            Tensor::from_parts(vec![fan_in, fan_out], w),
        ));
        entries.push((format!("layer{l}.bias"), Tensor::zeros(&[1, fan_out])));
    }
    ParamSet { entries }
}

fn check_layout(spec: &MlpSpec, params: &ParamSet) -> Result<()> {
    if params.len() != 2 * spec.num_layers() {
        return Err(Error::shape(
            "mlp",
            format!("{} tensors for {} layers", params.len(), spec.num_layers()),
        ));
    }
    for (l, pair) in spec.layer_widths.windows(2).enumerate() {
        let w = params.tensor(2 * l);
        let b = params.tensor(2 * l + 1);
        if w.shape() != [pair[0], pair[1]] || b.shape() != [1, pair[1]] {
            return Err(Error::shape(
                "mlp",
                format!("layer {l}: weight {:?}, bias {:?}", w.shape(), b.shape()),
            ));
        }
    }
    Ok(())
}

/// Parameters of one network placed on a graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    ids: Vec<NodeId>,
}

impl BoundParams {
    /// Adds every tensor of `params` as a leaf; `trainable` decides whether
    /// gradients are tracked.
    pub fn bind(g: &mut Graph, params: &ParamSet, trainable: bool) -> Self {
        let ids = params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Self { ids }
    }

    /// Gradients laid out like `params`; unreachable entries are zero.
    pub fn gradients(&self, grads: &Gradients, params: &ParamSet) -> ParamSet {
        ParamSet {
            entries: params
                .entries
                .iter()
                .zip(&self.ids)
                .map(|((n, t), &id)| (n.clone(), grads.get_or_zeros(id, t)))
                .collect(),
        }
    }
}

/// Differentiable forward pass of a batch `input` (`[rows, in]`).
pub fn mlp_forward(
    g: &mut Graph,
    spec: &MlpSpec,
    params: &BoundParams,
    input: NodeId,
) -> Result<NodeId> {
    let width = g.value(input).cols();
    if width != spec.input_width() {
        return Err(Error::contract(format!(
            "MLP input width {width}, expected {}",
            spec.input_width()
        )));
    }
    if params.ids.len() != 2 * spec.num_layers() {
        return Err(Error::contract("bound parameters do not match the MLP layout"));
    }
    let mut h = input;
    for l in 0..spec.num_layers() {
        h = g.matmul(h, params.ids[2 * l])?;
        h = g.add_row(h, params.ids[2 * l + 1])?;
        let act = if l + 1 == spec.num_layers() {
            spec.output_activation
        } else {
            Activation::Tanh
        };
        h = act.apply(g, h)?;
    }
    Ok(h)
}

/// Tape-free forward pass; bit-identical to [`mlp_forward`].
pub fn mlp_eval(spec: &MlpSpec, params: &ParamSet, input: &Tensor) -> Result<Tensor> {
    if input.cols() != spec.input_width() {
        return Err(Error::contract(format!(
            "MLP input width {}, expected {}",
            input.cols(),
            spec.input_width()
        )));
    }
    check_layout(spec, params)?;
    let mut h = input.clone();
    for l in 0..spec.num_layers() {
        h = diffcore::gemm(&h, false, params.tensor(2 * l), false);
        h = diffcore::add_row(&h, params.tensor(2 * l + 1));
        let act = if l + 1 == spec.num_layers() {
            spec.output_activation
        } else {
            Activation::Tanh
        };
        h = act.eval(h);
    }
    if !h.is_all_finite() {
        return Err(Error::non_finite("mlp_eval output"));
    }
    Ok(h)
}

/// A trainable network: layout plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamSet,
}

impl Mlp {
    pub fn new(spec: MlpSpec, seed: u64) -> Self {
        let params = init_params(&spec, seed);
        Self { spec, params }
    }

    pub fn from_parts(spec: MlpSpec, params: ParamSet) -> Result<Self> {
        check_layout(&spec, &params)?;
        Ok(Self { spec, params })
    }

    pub fn eval(&self, input: &Tensor) -> Result<Tensor> {
        mlp_eval(&self.spec, &self.params, input)
    }
}

/// Deterministic policy `a = bound * tanh(net(s))`.
///
/// The squashing keeps early, untrained actions inside the actuator range.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub net: Mlp,
    pub action_bound: f64,
}

impl Policy {
    pub fn new(net: Mlp, action_bound: f64) -> Result<Self> {
        if net.spec.output_activation != Activation::Identity {
            return Err(Error::contract("policy network must have an identity output"));
        }
        if !(action_bound > 0.0 && action_bound.is_finite()) {
            return Err(Error::contract(format!("action bound {action_bound} must be positive")));
        }
        Ok(Self { net, action_bound })
    }

    pub fn state_dim(&self) -> usize {
        self.net.spec.input_width()
    }

    pub fn action_dim(&self) -> usize {
        self.net.spec.output_width()
    }

    pub fn act_batch(&self, states: &Tensor) -> Result<Tensor> {
        let bound = self.action_bound;
        Ok(self.net.eval(states)?.map(f64::tanh).map(|v| v * bound))
    }

    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        let s = Tensor::matrix(1, state.len(), state.to_vec())?;
        Ok(self.act_batch(&s)?.into_data())
    }

    /// Differentiable actions for a batch of states.
    pub fn forward(&self, g: &mut Graph, params: &BoundParams, states: NodeId) -> Result<NodeId> {
        let raw = mlp_forward(g, &self.net.spec, params, states)?;
        let squashed = g.tanh(raw)?;
        g.scale(squashed, self.action_bound)
    }
}

/// Adam moment accumulators and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update. Pure: inputs are not modified.
pub fn adam_step(
    params: &ParamSet,
    grads: &ParamSet,
    state: &AdamState,
) -> Result<(ParamSet, AdamState)> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(Error::shape("adam_step", "parameter, gradient and moment layouts differ"));
    }
    for (n, g) in grads.iter() {
        if !g.is_all_finite() {
            return Err(Error::non_finite(format!("gradient of `{n}`")));
        }
    }
    let step = state.step + 1;
    let c1 = 1.0 - state.beta1.powi(step as i32);
    let c2 = 1.0 - state.beta2.powi(step as i32);
    let mut new_p = Vec::with_capacity(params.len());
    let mut new_m = Vec::with_capacity(params.len());
    let mut new_v = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let (name, p) = &params.entries[i];
        let g = grads.tensor(i).data();
        let m0 = state.m.tensor(i).data();
        let v0 = state.v.tensor(i).data();
        let mut pd = p.data().to_vec();
        let mut md = Vec::with_capacity(pd.len());
        let mut vd = Vec::with_capacity(pd.len());
        for j in 0..pd.len() {
            let m = state.beta1 * m0[j] + (1.0 - state.beta1) * g[j];
            let v = state.beta2 * v0[j] + (1.0 - state.beta2) * g[j] * g[j];
            pd[j] -= state.lr * (m / c1) / ((v / c2).sqrt() + state.eps);
            md.push(m);
            vd.push(v);
        }
        let shape = p.shape().to_vec();
        new_p.push((name.clone(), Tensor::new(shape.clone(), pd)?));
        new_m.push((name.clone(), Tensor::from_parts(shape.clone(), md)));
        new_v.push((name.clone(), Tensor::from_parts(shape, vd)));
    }
    let next = AdamState {
        step,
        m: ParamSet { entries: new_m },
        v: ParamSet { entries: new_v },
        ..state.clone()
    };
    Ok((ParamSet { entries: new_p }, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{central_difference, first_mismatch, FD_ABS, FD_REL, FD_STEP};
    use proptest::prelude::*;

    fn spec() -> MlpSpec {
        MlpSpec::with_hidden(3, &[8, 8], 2, Activation::Identity).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let s = spec();
        let a = init_params(&s, 42);
        assert_eq!(a, init_params(&s, 42));
        for l in 0..s.num_layers() {
            let w = a.tensor(2 * l);
            let limit = (6.0 / (w.shape()[0] + w.shape()[1]) as f64).sqrt();
            assert!(w.data().iter().all(|v| v.abs() <= limit));
            assert!(a.tensor(2 * l + 1).data().iter().all(|&v| v == 0.0));
        }
        assert_ne!(init_params(&s, 1), init_params(&s, 2));
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3], Activation::Identity).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1], Activation::Identity).is_err());
        assert!(MlpSpec::new(vec![3, 1], Activation::Tanh).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let s = spec();
        let p = init_params(&s, 3).zeros_like();
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.1, -9.0]).unwrap();
        let y = mlp_eval(&s, &p, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let s = MlpSpec::new(vec![3, 3], Activation::Identity).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let p = ParamSet::new(vec![
            ("layer0.weight".into(), Tensor::matrix(3, 3, eye).unwrap()),
            ("layer0.bias".into(), Tensor::zeros(&[1, 3])),
        ]);
        let x = Tensor::matrix(1, 3, vec![0.3, -1.5, 7.0]).unwrap();
        assert_eq!(mlp_eval(&s, &p, &x).unwrap(), x);
    }

    #[test]
    fn width_mismatch_is_contract_error() {
        let s = spec();
        let p = init_params(&s, 0);
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(mlp_eval(&s, &p, &x), Err(Error::Contract(_))));
        let mut g = Graph::new();
        let b = BoundParams::bind(&mut g, &p, true);
        let xi = g.constant(x);
        assert!(matches!(mlp_forward(&mut g, &s, &b, xi), Err(Error::Contract(_))));
    }

    fn loss(s: &MlpSpec, p: &ParamSet) -> (f64, ParamSet) {
        let mut g = Graph::new();
        let b = BoundParams::bind(&mut g, p, true);
        let x = g.constant(
            Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap(),
        );
        let y = mlp_forward(&mut g, s, &b, x).unwrap();
        let sq = g.square(y).unwrap();
        let out = g.mean(sq).unwrap();
        let grads = g.backward(out).unwrap();
        (g.value(out).item().unwrap(), b.gradients(&grads, p))
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for act in [Activation::Identity, Activation::Sigmoid, Activation::Softplus] {
            let s = MlpSpec::with_hidden(3, &[5, 4], 2, act).unwrap();
            let p = init_params(&s, 9);
            let (_, grads) = loss(&s, &p);
            let numeric = central_difference(
                |flat| loss(&s, &p.with_flat(flat).unwrap()).0,
                &p.flatten(),
                FD_STEP,
            );
            assert_eq!(first_mismatch(&grads.flatten(), &numeric, FD_REL, FD_ABS), None);
        }
    }

    #[test]
    fn graph_and_eval_paths_agree_bitwise() {
        let s = MlpSpec::with_hidden(3, &[6], 2, Activation::Softplus).unwrap();
        let p = init_params(&s, 5);
        let x = Tensor::matrix(2, 3, vec![0.1, 0.2, -0.3, 1.0, -2.0, 0.5]).unwrap();
        let mut g = Graph::new();
        let b = BoundParams::bind(&mut g, &p, false);
        let xi = g.constant(x.clone());
        let y = mlp_forward(&mut g, &s, &b, xi).unwrap();
        assert_eq!(g.value(y), &mlp_eval(&s, &p, &x).unwrap());
    }

    fn scalar_set(v: f64) -> ParamSet {
        ParamSet::new(vec![("w".into(), Tensor::matrix(1, 1, vec![v]).unwrap())])
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let p = init_params(&spec(), 1);
        let state = AdamState::new(&p, 1e-2);
        let (q, next) = adam_step(&p, &p.zeros_like(), &state).unwrap();
        assert_eq!(p, q);
        assert_eq!(next.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let p = ParamSet::new(vec![(
            "w".into(),
            Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap(),
        )]);
        let g = ParamSet::new(vec![(
            "w".into(),
            Tensor::matrix(1, 3, vec![3.0, -0.02, 500.0]).unwrap(),
        )]);
        let (q, _) = adam_step(&p, &g, &AdamState::new(&p, 0.01)).unwrap();
        let d = q.tensor(0).data();
        assert!((d[0] + 0.01).abs() < 1e-8);
        assert!((d[1] - 0.01).abs() < 1e-8);
        assert!((d[2] + 0.01).abs() < 1e-8);
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        // Frozen from an independent evaluation of the Adam recurrence with
        // lr=0.1, p0=1, gradients 0.5 then -1.
        let p = scalar_set(1.0);
        let s0 = AdamState::new(&p, 0.1);
        let (p1, s1) = adam_step(&p, &scalar_set(0.5), &s0).unwrap();
        assert!((p1.tensor(0).data()[0] - 0.900000002).abs() < 1e-15);
        let (p2, _) = adam_step(&p1, &scalar_set(-1.0), &s1).unwrap();
        assert!((p2.tensor(0).data()[0] - 0.9366103542405654).abs() < 1e-14);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let p = scalar_set(1.0);
        let mut g = scalar_set(0.0);
        g.entries[0].1 = Tensor::from_parts(vec![1, 1], vec![f64::NAN]);
        let err = adam_step(&p, &g, &AdamState::new(&p, 0.1)).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
    }

    #[test]
    fn adam_minimizes_convex_quadratic() {
        // f(w) = sum (w_i - c_i)^2 with a poorly scaled target.
        let target = [3.0, -0.5, 0.25];
        let mut p = ParamSet::new(vec![("w".into(), Tensor::zeros(&[1, 3]))]);
        let f = |p: &ParamSet| {
            p.tensor(0)
                .data()
                .iter()
                .zip(&target)
                .map(|(w, c)| (w - c) * (w - c))
                .sum::<f64>()
        };
        let start = f(&p);
        let mut state = AdamState::new(&p, 1e-2);
        for _ in 0..100 {
            let grad: Vec<f64> = p.tensor(0).data().iter().zip(&target).map(|(w, c)| 2.0 * (w - c)).collect();
            let g = ParamSet::new(vec![("w".into(), Tensor::matrix(1, 3, grad).unwrap())]);
            (p, state) = adam_step(&p, &g, &state).unwrap();
        }
        assert!(f(&p) < start);
    }

    proptest! {
        #[test]
        fn adam_step_is_pure(seed in 0u64..1000, lr in 1e-4..1e-1f64) {
            let s = spec();
            let p = init_params(&s, seed);
            let g = init_params(&s, seed + 1);
            let st = AdamState::new(&p, lr);
            let a = adam_step(&p, &g, &st).unwrap();
            let b = adam_step(&p, &g, &st).unwrap();
            prop_assert_eq!(a.0, b.0);
            prop_assert_eq!(a.1, b.1);
        }
    }
}
