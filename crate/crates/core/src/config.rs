//! Run configuration, read from and written to JSON.
//!
//! Every field has a default, so a config file only needs the values it
//! changes. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Layout, TaskName, TaskSpec};
use crate::hindsight::{HindsightWeight, MlpPosteriorConfig, RewardMode, Shaping};
use crate::novelty::RndConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoveltyKind {
    #[default]
    Count,
    Rnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorKind {
    #[default]
    Count,
    Mlp,
}

/// How an observation is fed to the policy and value networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsEncoding {
    /// Coordinates divided by the grid size, door flags as 0/1.
    #[default]
    Scaled,
    /// One-hot x, one-hot y, door flags.
    OneHot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub hidden: Vec<usize>,
    pub policy_head_gain: f64,
    pub value_head_gain: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub adam_eps: f64,
    pub max_grad_norm: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub huber_delta: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub gae_lambda: f64,
    pub normalize_advantages: bool,
    /// Critic regresses onto returns standardised by running statistics.
    pub normalize_values: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            hidden: vec![64, 64],
            policy_head_gain: 0.01,
            value_head_gain: 1.0,
            actor_lr: 7e-4,
            critic_lr: 7e-4,
            adam_eps: 1e-5,
            max_grad_norm: 10.0,
            clip: 0.2,
            entropy_coef: 0.05,
            huber_delta: 10.0,
            epochs: 10,
            minibatches: 1,
            gae_lambda: 0.95,
            normalize_advantages: true,
            normalize_values: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskName,
    pub grid_size: usize,
    /// Layout file; overrides the built-in layout for `task` and `grid_size`.
    pub layout: Option<PathBuf>,
    pub max_steps: usize,
    pub mode: RewardMode,
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub window: usize,
    pub z_bins: usize,
    pub hindsight_weight: HindsightWeight,
    pub novelty: NoveltyKind,
    pub rnd: RndConfig,
    pub posterior: PosteriorKind,
    pub mlp_posterior: MlpPosteriorConfig,
    pub obs_encoding: ObsEncoding,
    pub num_envs: usize,
    pub buffer_length: usize,
    pub iterations: usize,
    pub seeds: Vec<u64>,
    pub ppo: PpoConfig,
    /// Greedy evaluation episodes after training; 0 disables evaluation.
    pub eval_episodes: usize,
    /// Log per-cell intrinsic reward sums for heatmaps.
    pub log_cells: bool,
    pub checkpoint: bool,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskName::Pass,
            grid_size: 30,
            layout: None,
            max_steps: 300,
            mode: RewardMode::Mace,
            lambda: 0.01,
            beta: 1.0,
            gamma: 0.99,
            window: 10,
            z_bins: 30,
            hindsight_weight: HindsightWeight::Relabeled,
            novelty: NoveltyKind::Count,
            rnd: RndConfig::default(),
            posterior: PosteriorKind::Count,
            mlp_posterior: MlpPosteriorConfig::default(),
            obs_encoding: ObsEncoding::Scaled,
            num_envs: 16,
            buffer_length: 300,
            iterations: 300,
            seeds: vec![0],
            ppo: PpoConfig::default(),
            eval_episodes: 0,
            log_cells: false,
            checkpoint: false,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    check(v > 0.0 && v.is_finite(), || format!("{name} must be positive, got {v}"))
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    check(v >= 0.0 && v.is_finite(), || format!("{name} must be finite and >= 0, got {v}"))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        check(self.layout.is_some() || self.grid_size >= 12, || {
            format!("grid_size must be at least 12, got {}", self.grid_size)
        })?;
        check(self.max_steps >= 1, || "max_steps must be at least 1".into())?;
        non_negative("lambda", self.lambda)?;
        non_negative("beta", self.beta)?;
        check((0.0..1.0).contains(&self.gamma), || {
            format!("gamma must be in [0, 1), got {}", self.gamma)
        })?;
        check(self.window >= 1, || "window must be at least 1".into())?;
        check(self.z_bins >= 1, || "z_bins must be at least 1".into())?;
        check(self.num_envs >= 1, || "num_envs must be at least 1".into())?;
        check(self.buffer_length >= 1, || "buffer_length must be at least 1".into())?;
        check(!self.seeds.is_empty(), || "seeds must not be empty".into())?;

        let p = &self.ppo;
        check(!p.hidden.is_empty() && p.hidden.iter().all(|&h| h > 0), || {
            "ppo.hidden must list positive widths".into()
        })?;
        positive("ppo.policy_head_gain", p.policy_head_gain)?;
        positive("ppo.value_head_gain", p.value_head_gain)?;
        positive("ppo.actor_lr", p.actor_lr)?;
        positive("ppo.critic_lr", p.critic_lr)?;
        positive("ppo.adam_eps", p.adam_eps)?;
        positive("ppo.max_grad_norm", p.max_grad_norm)?;
        positive("ppo.clip", p.clip)?;
        non_negative("ppo.entropy_coef", p.entropy_coef)?;
        positive("ppo.huber_delta", p.huber_delta)?;
        check(p.epochs >= 1, || "ppo.epochs must be at least 1".into())?;
        check(p.minibatches >= 1, || "ppo.minibatches must be at least 1".into())?;
        check(p.minibatches <= self.num_envs * self.buffer_length, || {
            "ppo.minibatches exceeds the batch size".into()
        })?;
        check((0.0..=1.0).contains(&p.gae_lambda), || {
            format!("ppo.gae_lambda must be in [0, 1], got {}", p.gae_lambda)
        })?;

        positive("rnd.lr", self.rnd.lr)?;
        check(self.rnd.output_dim >= 1, || "rnd.output_dim must be at least 1".into())?;
        positive("mlp_posterior.lr", self.mlp_posterior.lr)?;
        Ok(())
    }

    pub fn shaping(&self) -> Result<Shaping> {
        Shaping::new(self.mode, self.lambda, self.beta)
    }

    /// The layout file if given, otherwise the built-in layout.
    pub fn task_spec(&self) -> Result<TaskSpec> {
        let spec = match &self.layout {
            Some(path) => {
                let layout = Layout::load(path)?;
                if layout.task != self.task {
                    return Err(Error::Config(format!(
                        "layout {} is a {} layout but task is {}",
                        path.display(),
                        layout.task,
                        self.task
                    )));
                }
                TaskSpec::new(layout)
            }
            None => TaskSpec::builtin(self.task, self.grid_size)?,
        };
        spec.with_max_steps(self.max_steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.gamma, 0.99);
        assert_eq!(cfg.lambda, 0.01);
        assert_eq!((cfg.window, cfg.z_bins), (10, 30));
        assert_eq!(cfg.ppo.epochs, 10);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"mode": "nov_max", "grid_size": 15, "seeds": [3, 4]}"#).unwrap();
        assert_eq!(cfg.mode, RewardMode::NovMax);
        assert_eq!(cfg.grid_size, 15);
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.ppo, PpoConfig::default());
    }

    #[test]
    fn round_trip_is_idempotent() {
        let cfg = RunConfig::from_json(r#"{"task": "MultiRoom", "lambda": 0.1, "ppo": {"clip": 0.1}}"#).unwrap();
        let once = cfg.to_json();
        let again = RunConfig::from_json(&once).unwrap().to_json();
        assert_eq!(once, again);
        assert_eq!(RunConfig::from_json(&once).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        for bad in [
            r#"{"mode": "mace2"}"#,
            r#"{"lambda": -0.1}"#,
            r#"{"gamma": 1.0}"#,
            r#"{"window": 0}"#,
            r#"{"z_bins": 0}"#,
            r#"{"seeds": []}"#,
            r#"{"grid_size": 5}"#,
            r#"{"ppo": {"epochs": 0}}"#,
            r#"{"unknown_key": 1}"#,
            r#"{"ppo": {"lr": 1}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn task_spec_from_layout_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pass.txt");
        let layout = TaskSpec::builtin(TaskName::Pass, 15).unwrap().layout().render();
        std::fs::write(&path, layout).unwrap();
        let mut cfg = RunConfig {
            layout: Some(path),
            max_steps: 50,
            ..RunConfig::default()
        };
        let spec = cfg.task_spec().unwrap();
        assert_eq!(spec.grid_size(), 15);
        assert_eq!(spec.max_steps(), 50);
        cfg.task = TaskName::SecretRoom;
        assert!(cfg.task_spec().is_err());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let cfg = RunConfig {
            mode: RewardMode::HinS,
            ..RunConfig::default()
        };
        cfg.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    }
}
