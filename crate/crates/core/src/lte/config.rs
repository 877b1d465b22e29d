use serde::{Deserialize, Serialize};

use super::MergePolicy;
use crate::network::Activation;
use crate::numerics::InitScheme;
use crate::optim::OptimizerConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Train `W` directly.
    Full,
    /// One head, never merged.
    Lora,
    /// All heads in one forward pass.
    Mhlora,
    #[default]
    Lte,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// `y = W* x` with `W*` of shape `m × n` and rank `rank`.
    LeastSquares { m: usize, n: usize, rank: usize },
}

fn default_heads() -> usize {
    1
}
fn default_eval_batch() -> usize {
    512
}
fn default_true() -> bool {
    true
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub mode: Mode,
    pub dataset: DatasetSpec,
    /// Hidden widths between input and output; empty means a single layer.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// `N`
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// `r`
    pub rank: usize,
    pub alpha: f64,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub policy: MergePolicy,
    /// Adapter initialization; `B` always starts at zero.
    #[serde(default)]
    pub init: InitScheme,
    /// Base weight initialization; zero when absent.
    #[serde(default)]
    pub base_init: Option<InitScheme>,
    /// Cumulative batch size `B`; each worker gets `⌊B/N⌋`.
    pub batch_size: usize,
    pub steps: u64,
    /// Defaults to the merge period.
    #[serde(default)]
    pub snapshot_interval: Option<u64>,
    /// Defaults to the snapshot interval.
    #[serde(default)]
    pub eval_interval: Option<u64>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    /// Stop at the first evaluation whose loss is at or below this value.
    #[serde(default)]
    pub stop_at_loss: Option<f64>,
    /// Workers see a per-row absmax quantized copy of `W`.
    #[serde(default)]
    pub quantize_bits: Option<u32>,
    /// Compute ranks and head alignment at snapshots.
    #[serde(default = "default_true")]
    pub analysis: bool,
    /// Keep every merge's per-worker updates in memory.
    #[serde(default)]
    pub record_updates: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
}

fn default_activation() -> Activation {
    Activation::Identity
}

impl RunConfig {
    /// A single-layer least-squares run with the given adapter layout.
    pub fn least_squares(
        m: usize,
        n: usize,
        rank_star: usize,
        heads: usize,
        rank: usize,
        optimizer: OptimizerConfig,
    ) -> Self {
        RunConfig {
            mode: Mode::Lte,
            dataset: DatasetSpec::LeastSquares {
                m,
                n,
                rank: rank_star,
            },
            hidden: Vec::new(),
            activation: Activation::Identity,
            heads,
            rank,
            alpha: rank as f64,
            optimizer,
            policy: MergePolicy::default(),
            init: InitScheme::default(),
            base_init: None,
            batch_size: 32,
            steps: 100,
            snapshot_interval: None,
            eval_interval: None,
            eval_batch: default_eval_batch(),
            stop_at_loss: None,
            quantize_bits: None,
            analysis: true,
            record_updates: false,
            seed: 0,
            out_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        let DatasetSpec::LeastSquares { m, n, .. } = self.dataset;
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(n);
        dims.extend(&self.hidden);
        dims.push(m);
        dims
    }

    /// Heads actually instantiated: one for `full` and `lora`.
    pub fn effective_heads(&self) -> usize {
        match self.mode {
            Mode::Full | Mode::Lora => 1,
            Mode::Mhlora | Mode::Lte => self.heads,
        }
    }

    /// Adapter rank actually instantiated.
    pub fn effective_rank(&self) -> usize {
        match self.mode {
            Mode::Full => 1,
            _ => self.rank,
        }
    }

    pub fn per_worker_batch(&self) -> usize {
        self.batch_size / self.effective_heads()
    }

    /// Samples per step dropped by the floor division.
    pub fn dropped_samples(&self) -> usize {
        self.batch_size % self.effective_heads()
    }

    pub fn snapshot_every(&self) -> u64 {
        self.snapshot_interval.unwrap_or(self.policy.period)
    }

    pub fn eval_every(&self) -> u64 {
        self.eval_interval.unwrap_or_else(|| self.snapshot_every())
    }

    /// Checks every cross-field constraint; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let DatasetSpec::LeastSquares { m, n, rank } = self.dataset;
        if m == 0 {
            return Err(Error::config("dataset.m", "must be positive"));
        }
        if n == 0 {
            return Err(Error::config("dataset.n", "must be positive"));
        }
        if rank == 0 || rank > m.min(n) {
            return Err(Error::config(
                "dataset.rank",
                format!("must be in 1..={}", m.min(n)),
            ));
        }
        if let Some(i) = self.hidden.iter().position(|&h| h == 0) {
            return Err(Error::config(format!("hidden[{i}]"), "must be positive"));
        }
        if self.heads == 0 {
            return Err(Error::config("heads", "must be at least 1"));
        }
        if self.mode != Mode::Full {
            let dims = self.dims();
            let min_dim = dims.windows(2).map(|w| w[0].min(w[1])).min().unwrap_or(0);
            if self.rank == 0 || self.rank > min_dim {
                return Err(Error::config(
                    "r",
                    format!(
                        "rank {} must be in 1..={min_dim} for layer dims {dims:?}",
                        self.rank
                    ),
                ));
            }
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config("alpha", "must be positive and finite"));
        }
        self.optimizer
            .validate()
            .map_err(|(field, msg)| Error::config(format!("optimizer.{field}"), msg))?;
        self.policy.validate()?;
        for (field, scheme) in [("init", Some(self.init)), ("base_init", self.base_init)] {
            if let Some(s) = scheme {
                if !(s.gain().is_finite() && s.gain() > 0.0) {
                    return Err(Error::config(format!("{field}.gain"), "must be positive"));
                }
            }
        }
        if self.batch_size < self.effective_heads() {
            return Err(Error::config(
                "batch_size",
                format!(
                    "{} leaves no samples for {} workers",
                    self.batch_size,
                    self.effective_heads()
                ),
            ));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.snapshot_interval == Some(0) {
            return Err(Error::config("snapshot_interval", "must be at least 1"));
        }
        if self.eval_interval == Some(0) {
            return Err(Error::config("eval_interval", "must be at least 1"));
        }
        if self.eval_batch == 0 {
            return Err(Error::config("eval_batch", "must be at least 1"));
        }
        if let Some(b) = self.quantize_bits {
            if !(2..=8).contains(&b) {
                return Err(Error::config("quantize_bits", "must be in 2..=8"));
            }
        }
        if let Some(t) = self.stop_at_loss {
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::config(
                    "stop_at_loss",
                    "must be a non-negative number",
                ));
            }
        }
        Ok(())
    }
}
