use serde::{Deserialize, Serialize};

use crate::envs::EnvSpec;
use crate::error::{Error, Result};

/// Every tunable of a training run, grouped as in the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub environment: EnvironmentConfig,
    #[serde(default)]
    pub networks: NetworksConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub certification: CertificationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    /// `"2d"` or `"cartpole"`.
    pub name: String,
    /// Overrides the environment's horizon `T`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    /// Overrides the environment's time step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

/// Hidden-layer widths of each network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworksConfig {
    #[serde(default = "default_widths")]
    pub policy: LayerWidths,
    #[serde(default = "default_widths")]
    pub drift: LayerWidths,
    #[serde(default = "default_widths")]
    pub diffusion: LayerWidths,
    #[serde(default = "default_widths")]
    pub barrier: LayerWidths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerWidths {
    pub widths: Vec<usize>,
}

fn default_widths() -> LayerWidths {
    LayerWidths { widths: vec![64, 64] }
}

impl Default for NetworksConfig {
    fn default() -> Self {
        Self {
            policy: default_widths(),
            drift: default_widths(),
            diffusion: default_widths(),
            barrier: default_widths(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Outer iterations `N`.
    pub outer_iters: usize,
    /// Generative-model Adam steps `M` per outer iteration.
    pub inner_gen_steps: usize,
    /// Next-state samples per trajectory state in the Lie term.
    pub lie_samples: usize,
    /// Weight of the barrier-loss gradient in the policy update.
    pub lambda: f64,
    pub gamma: f64,
    pub lr_policy: f64,
    pub lr_model: f64,
    pub lr_barrier: f64,
    /// Real episodes collected per outer iteration.
    pub batch_real: usize,
    /// Synthetic rollouts per outer iteration.
    pub batch_synthetic: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            outer_iters: 300,
            inner_gen_steps: 50,
            lie_samples: 10,
            lambda: 1.0,
            gamma: 0.99,
            lr_policy: 1e-3,
            lr_model: 1e-3,
            lr_barrier: 1e-3,
            batch_real: 16,
            batch_synthetic: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertificationConfig {
    /// Paired real/synthetic rollouts used to measure the model gap.
    pub pairs: usize,
    /// Adam steps for the barrier retrained against the enlarged unsafe set.
    pub retrain_steps: usize,
    pub init_samples: usize,
    pub unsafe_samples: usize,
}

impl Default for CertificationConfig {
    fn default() -> Self {
        Self {
            pairs: 100,
            retrain_steps: 1000,
            init_samples: 1000,
            unsafe_samples: 1000,
        }
    }
}

impl TrainConfig {
    /// Defaults for the named environment.
    pub fn for_env(name: &str) -> Self {
        Self {
            environment: EnvironmentConfig {
                name: name.to_string(),
                horizon: None,
                dt: None,
            },
            networks: NetworksConfig::default(),
            training: TrainingConfig::default(),
            certification: CertificationConfig::default(),
        }
    }

    /// Rejects configurations that cannot run; messages name the key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::contract(format!("`{key}`: {why}")));
        EnvSpec::by_name(&self.environment.name)
            .map_err(|_| Error::contract(format!("`environment.name`: unknown environment `{}`", self.environment.name)))?;
        if self.environment.horizon == Some(0) {
            return bad("environment.horizon", "must be at least 1".into());
        }
        if let Some(dt) = self.environment.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return bad("environment.dt", format!("must be positive, got {dt}"));
            }
        }
        for (key, w) in [
            ("networks.policy.widths", &self.networks.policy.widths),
            ("networks.drift.widths", &self.networks.drift.widths),
            ("networks.diffusion.widths", &self.networks.diffusion.widths),
            ("networks.barrier.widths", &self.networks.barrier.widths),
        ] {
            if w.is_empty() || w.contains(&0) {
                return bad(key, format!("needs at least one positive width, got {w:?}"));
            }
        }
        let t = &self.training;
        for (key, v) in [
            ("training.inner_gen_steps", t.inner_gen_steps),
            ("training.lie_samples", t.lie_samples),
            ("training.batch_real", t.batch_real),
            ("training.batch_synthetic", t.batch_synthetic),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        if !(0.0..=1.0).contains(&t.gamma) {
            return bad("training.gamma", format!("must lie in [0, 1], got {}", t.gamma));
        }
        if !(t.lambda >= 0.0 && t.lambda.is_finite()) {
            return bad("training.lambda", format!("must be nonnegative, got {}", t.lambda));
        }
        for (key, v) in [
            ("training.lr_policy", t.lr_policy),
            ("training.lr_model", t.lr_model),
            ("training.lr_barrier", t.lr_barrier),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(key, format!("must be positive, got {v}"));
            }
        }
        let c = &self.certification;
        for (key, v) in [
            ("certification.pairs", c.pairs),
            ("certification.retrain_steps", c.retrain_steps),
            ("certification.init_samples", c.init_samples),
            ("certification.unsafe_samples", c.unsafe_samples),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        Ok(())
    }

    /// The environment with any horizon and time-step overrides applied.
    pub fn env_spec(&self) -> Result<EnvSpec> {
        let mut env = EnvSpec::by_name(&self.environment.name)?;
        if let Some(h) = self.environment.horizon {
            env.horizon = h;
        }
        if let Some(dt) = self.environment.dt {
            env.dt = dt;
        }
        env.validate()?;
        Ok(env)
    }
}
