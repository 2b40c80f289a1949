//! Experiment configuration schema.
//!
//! One JSON document drives every subcommand; unknown keys are rejected and
//! parse -> serialize -> parse is a fixpoint. `config --defaults` in the CLI
//! emits these defaults.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nmp::NmpConfig;
use crate::sim::{Experiment, SceneConfig};
use crate::topology::Solver;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Agent embedding width `d`.
    pub d: usize,
    /// Latent code width `d_z`.
    pub d_z: usize,
    /// Hidden width of every 3-layer MLP (and the decoder GRU state).
    pub hidden: usize,
    /// Interaction categories `L`.
    pub l_categories: usize,
    /// Gumbel-softmax temperature.
    pub tau: f64,
    /// Message-passing iterations per scale.
    pub iters: usize,
    /// Pairwise neighbors per node at scale 0; `null` means all other
    /// agents (`N - 1`).
    pub k0: Option<usize>,
    /// Group sizes of scales 1..S (strictly increasing). May be empty.
    pub scales: Vec<usize>,
    pub solver: Solver,
    /// Sample Gumbel noise in the category head during training.
    pub gumbel_noise: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            d_z: 32,
            hidden: 64,
            l_categories: 2,
            tau: 0.5,
            iters: 3,
            k0: None,
            scales: vec![2, 3],
            solver: Solver::Auto,
            gumbel_noise: true,
        }
    }
}

impl ModelConfig {
    pub fn nmp(&self) -> NmpConfig {
        NmpConfig {
            d: self.d,
            hidden: self.hidden,
            l_categories: self.l_categories,
            tau: self.tau,
            iters: self.iters,
        }
    }

    /// Effective scale-0 neighbor count for `n_agents`.
    pub fn effective_k0(&self, n_agents: usize) -> usize {
        self.k0.unwrap_or(n_agents.saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Posterior-sampled decodings in the variety term.
    pub k_variety: usize,
    /// Prior variance.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            k_variety: 20,
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Learning-rate multiplier applied every `decay_period` epochs.
    pub decay_factor: f64,
    pub decay_period: usize,
    pub epochs: usize,
    /// Scenes per mini-batch.
    pub batch: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            decay_factor: 0.9,
            decay_period: 10,
            epochs: 100,
            batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Default dataset path for subcommands that read one.
    pub data: Option<String>,
    /// Default output directory.
    pub out: Option<String>,
    /// Default checkpoint path for `predict`/`eval`/`reason`.
    pub checkpoint: Option<String>,
}

/// Root configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub scene_config: SceneConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    /// Defaults tuned per experiment recipe (agent count, scales, categories).
    pub fn defaults(experiment: Experiment) -> Self {
        let mut scene_config = SceneConfig {
            n_agents: experiment.required_agents(),
            ..SceneConfig::default()
        };
        let mut model = ModelConfig::default();
        match experiment {
            Experiment::Mixed6 => {
                model.scales = vec![2, 3];
                model.l_categories = 2;
            }
            Experiment::Category3 => {
                model.scales = vec![3];
                model.l_categories = 3;
            }
            Experiment::Category2 => {
                model.scales = vec![3];
                model.l_categories = 2;
            }
            Experiment::Charged2 => {
                model.scales = vec![];
                model.l_categories = 2;
                scene_config.init_pos_box = 1.5;
            }
        }
        ExperimentConfig {
            experiment,
            scene_config,
            model,
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            seed: 0,
            paths: PathsConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_config.validate()?;
        self.model.nmp().validate()?;
        if self.scene_config.n_agents != self.experiment.required_agents() {
            return Err(Error::config(format!(
                "experiment {} requires n_agents = {}",
                self.experiment,
                self.experiment.required_agents()
            )));
        }
        let n = self.scene_config.n_agents;
        if let Some(k0) = self.model.k0 {
            if k0 < 1 || k0 >= n {
                return Err(Error::config(format!("k0 = {k0} out of [1, {}]", n - 1)));
            }
        }
        for w in self.model.scales.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::config(format!(
                    "scales must be strictly increasing, got {:?}",
                    self.model.scales
                )));
            }
        }
        if let Some(&kmax) = self.model.scales.last() {
            if kmax > n {
                return Err(Error::config(format!("scale size {kmax} > n_agents {n}")));
            }
        }
        if let Some(&kmin) = self.model.scales.first() {
            if kmin < 2 {
                return Err(Error::config("scale sizes must be >= 2"));
            }
        }
        if self.loss.k_variety < 1 {
            return Err(Error::config("k_variety must be >= 1"));
        }
        for (name, v) in [
            ("alpha", self.loss.alpha),
            ("beta", self.loss.beta),
            ("gamma", self.loss.gamma),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::config(format!("loss weight {name} must be >= 0")));
            }
        }
        if self.loss.lambda <= 0.0 {
            return Err(Error::config("lambda must be > 0"));
        }
        if self.optim.lr <= 0.0 || !self.optim.lr.is_finite() {
            return Err(Error::config("lr must be > 0"));
        }
        if !(0.0 < self.optim.decay_factor && self.optim.decay_factor <= 1.0) {
            return Err(Error::config("decay_factor must be in (0, 1]"));
        }
        if self.optim.decay_period < 1 || self.optim.batch < 1 {
            return Err(Error::config("decay_period and batch must be >= 1"));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}
