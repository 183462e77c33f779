//! Run configuration: a flat `key = value` text format with `#` comments.
//! Unknown keys are errors; CLI overrides are applied after the file. The
//! resolved form makes every default explicit and is what run manifests
//! record, so a manifest alone pins the whole configuration.

use crate::error::{Error, Result};
use crate::nets::{OutputMode, UtilityArch};
use crate::params::OptimizerKind;
use crate::synthdata::GenConfig;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltySpace {
    /// Hinge on pixel-space RMS between input and anonymized output.
    Pixel,
    /// Hinge on the utility feature extractor's activations instead; exposed
    /// for comparison, no fidelity asserted.
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup then divide by 5 whenever the epoch loss stagnates.
    WarmupStep,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub b: f64,
    pub lambda_penalty: f64,
    pub mu: f64,
    pub tau: f64,
    pub lr_anonymizer: f64,
    pub lr_utility: f64,
    pub lr_budget: f64,
    pub epochs_pretrain: usize,
    pub epochs_anon: usize,
    pub epochs_action: usize,
    pub epochs_privacy: usize,
    pub epochs_utility_init: usize,
    pub batch_action: usize,
    pub batch_privacy: usize,
    pub skip: usize,
    pub width_anonymizer: usize,
    pub width_utility: usize,
    pub width_budget: usize,
    pub proj_dim: usize,
    pub proj_hidden: usize,
    pub budget_feat: usize,
    pub anonymizer_output: OutputMode,
    pub anonymizer_skip: bool,
    pub probe_arch: UtilityArch,
    pub penalty_space: PenaltySpace,
    pub optimizer: OptimizerKind,
    pub probe_lr_schedule: LrSchedule,
    pub seed: u64,
    pub isolation_checks: bool,
    /// When set, wall-time fields in CSV outputs are written as 0 so output
    /// bytes are a pure function of config + seed. Manifests always carry
    /// real timestamps.
    pub deterministic_timing: bool,
    pub gen: GenConfig,
    pub sweep_b_grid: Vec<f64>,
    pub sweep_lambda_grid: Vec<f64>,
    pub sweep_full_cross: bool,
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            b: 0.3,
            lambda_penalty: 1.0,
            mu: 1.0,
            tau: 0.1,
            lr_anonymizer: 1e-3,
            lr_utility: 1e-3,
            lr_budget: 1e-3,
            epochs_pretrain: 50,
            epochs_anon: 30,
            epochs_action: 30,
            epochs_privacy: 30,
            epochs_utility_init: 10,
            batch_action: 8,
            batch_privacy: 32,
            skip: 4,
            width_anonymizer: 8,
            width_utility: 8,
            width_budget: 8,
            proj_dim: 16,
            proj_hidden: 32,
            budget_feat: 32,
            anonymizer_output: OutputMode::Sigmoid,
            anonymizer_skip: false,
            probe_arch: UtilityArch::Conv,
            penalty_space: PenaltySpace::Pixel,
            optimizer: OptimizerKind::Sgd,
            probe_lr_schedule: LrSchedule::Constant,
            seed: 7,
            isolation_checks: true,
            deterministic_timing: true,
            gen: GenConfig::default(),
            sweep_b_grid: vec![0.0, 0.3, 0.5, 0.7, 0.9, 1.0],
            sweep_lambda_grid: vec![0.0, 0.1, 0.3, 0.5, 0.7, 1.0],
            sweep_full_cross: false,
            jobs: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for key {key}"))),
    }
}

fn parse_grid(key: &str, value: &str) -> Result<Vec<f64>> {
    let items: Result<Vec<f64>> =
        value.split(',').map(|v| parse(key, v.trim())).collect();
    let items = items?;
    if items.is_empty() {
        return Err(Error::Config(format!("empty grid for key {key}")));
    }
    Ok(items)
}

fn fmt_grid(grid: &[f64]) -> String {
    grid.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Applies one `key = value` assignment. Unknown keys are errors; the
    /// message names the key, which the CLI surfaces at exit code 2.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "b" => self.b = parse(key, value)?,
            "lambda_penalty" => self.lambda_penalty = parse(key, value)?,
            "mu" => self.mu = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "lr_anonymizer" => self.lr_anonymizer = parse(key, value)?,
            "lr_utility" => self.lr_utility = parse(key, value)?,
            "lr_budget" => self.lr_budget = parse(key, value)?,
            "epochs_pretrain" => self.epochs_pretrain = parse(key, value)?,
            "epochs_anon" => self.epochs_anon = parse(key, value)?,
            "epochs_action" => self.epochs_action = parse(key, value)?,
            "epochs_privacy" => self.epochs_privacy = parse(key, value)?,
            "epochs_utility_init" => self.epochs_utility_init = parse(key, value)?,
            "batch_action" => self.batch_action = parse(key, value)?,
            "batch_privacy" => self.batch_privacy = parse(key, value)?,
            "skip" => self.skip = parse(key, value)?,
            "width_anonymizer" => self.width_anonymizer = parse(key, value)?,
            "width_utility" => self.width_utility = parse(key, value)?,
            "width_budget" => self.width_budget = parse(key, value)?,
            "proj_dim" => self.proj_dim = parse(key, value)?,
            "proj_hidden" => self.proj_hidden = parse(key, value)?,
            "budget_feat" => self.budget_feat = parse(key, value)?,
            "anonymizer_output" => {
                self.anonymizer_output = match value {
                    "sigmoid" => OutputMode::Sigmoid,
                    "linear" => OutputMode::Linear,
                    _ => return Err(Error::Config(format!("invalid value {value:?} for key {key}"))),
                }
            }
            "anonymizer_skip" => self.anonymizer_skip = parse_bool(key, value)?,
            "probe_arch" => {
                self.probe_arch = match value {
                    "conv" => UtilityArch::Conv,
                    "linear" => UtilityArch::Linear,
                    _ => return Err(Error::Config(format!("invalid value {value:?} for key {key}"))),
                }
            }
            "penalty_space" => {
                self.penalty_space = match value {
                    "pixel" => PenaltySpace::Pixel,
                    "feature" => PenaltySpace::Feature,
                    _ => return Err(Error::Config(format!("invalid value {value:?} for key {key}"))),
                }
            }
            "optimizer" => {
                self.optimizer = match value {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    _ => return Err(Error::Config(format!("invalid value {value:?} for key {key}"))),
                }
            }
            "probe_lr_schedule" => {
                self.probe_lr_schedule = match value {
                    "constant" => LrSchedule::Constant,
                    "warmup-step" => LrSchedule::WarmupStep,
                    _ => return Err(Error::Config(format!("invalid value {value:?} for key {key}"))),
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "isolation_checks" => self.isolation_checks = parse_bool(key, value)?,
            "deterministic_timing" => self.deterministic_timing = parse_bool(key, value)?,
            "gen.k_action" => self.gen.k_action = parse(key, value)?,
            "gen.k_privacy" => self.gen.k_privacy = parse(key, value)?,
            "gen.frames" => self.gen.frames = parse(key, value)?,
            "gen.channels" => self.gen.channels = parse(key, value)?,
            "gen.height" => self.gen.height = parse(key, value)?,
            "gen.width" => self.gen.width = parse(key, value)?,
            "gen.train_clips" => self.gen.train_clips = parse(key, value)?,
            "gen.eval_clips" => self.gen.eval_clips = parse(key, value)?,
            "gen.train_privacy" => self.gen.train_privacy = parse(key, value)?,
            "gen.eval_privacy" => self.gen.eval_privacy = parse(key, value)?,
            "gen.noise_sigma" => self.gen.noise_sigma = parse(key, value)?,
            "gen.background" => self.gen.background = parse(key, value)?,
            "gen.blob_amp" => self.gen.blob_amp = parse(key, value)?,
            "gen.hue_amp" => self.gen.hue_amp = parse(key, value)?,
            "gen.glyph_amp" => self.gen.glyph_amp = parse(key, value)?,
            "sweep.b_grid" => self.sweep_b_grid = parse_grid(key, value)?,
            "sweep.lambda_grid" => self.sweep_lambda_grid = parse_grid(key, value)?,
            "sweep.full_cross" => self.sweep_full_cross = parse_bool(key, value)?,
            "sweep.jobs" => self.jobs = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key: {key}"))),
        }
        Ok(())
    }

    pub fn apply_lines(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key = value, got {raw:?}",
                    lineno + 1
                )));
            };
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg = TrainConfig::default();
        cfg.apply_lines(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.b) {
            return fail(format!("b must lie in [0, 1], got {}", self.b));
        }
        if self.lambda_penalty < 0.0 {
            return fail(format!("lambda_penalty must be >= 0, got {}", self.lambda_penalty));
        }
        if self.mu <= 0.0 || self.tau <= 0.0 {
            return fail(format!("mu and tau must be positive, got {} / {}", self.mu, self.tau));
        }
        for (name, lr) in
            [("lr_anonymizer", self.lr_anonymizer), ("lr_utility", self.lr_utility), ("lr_budget", self.lr_budget)]
        {
            if lr <= 0.0 {
                return fail(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.batch_action == 0 || self.batch_privacy == 0 {
            return fail("batch sizes must be >= 1".into());
        }
        if self.gen.height % 4 != 0 || self.gen.width % 4 != 0 {
            return fail(format!(
                "frame extents must be divisible by 4, got {}x{}",
                self.gen.height, self.gen.width
            ));
        }
        if self.skip >= self.gen.frames {
            return fail(format!(
                "skip {} must be smaller than the clip length {}",
                self.skip, self.gen.frames
            ));
        }
        if self.gen.k_action == 0 || self.gen.k_privacy == 0 {
            return fail("need at least one action class and one attribute".into());
        }
        if self.jobs == 0 {
            return fail("sweep.jobs must be >= 1".into());
        }
        Ok(())
    }

    /// Every key with its effective value, defaults included, plus the fixed
    /// conventions a reader needs to reproduce the run.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("b", self.b.to_string());
        put("lambda_penalty", self.lambda_penalty.to_string());
        put("mu", self.mu.to_string());
        put("tau", self.tau.to_string());
        put("lr_anonymizer", self.lr_anonymizer.to_string());
        put("lr_utility", self.lr_utility.to_string());
        put("lr_budget", self.lr_budget.to_string());
        put("epochs_pretrain", self.epochs_pretrain.to_string());
        put("epochs_anon", self.epochs_anon.to_string());
        put("epochs_action", self.epochs_action.to_string());
        put("epochs_privacy", self.epochs_privacy.to_string());
        put("epochs_utility_init", self.epochs_utility_init.to_string());
        put("batch_action", self.batch_action.to_string());
        put("batch_privacy", self.batch_privacy.to_string());
        put("skip", self.skip.to_string());
        put("width_anonymizer", self.width_anonymizer.to_string());
        put("width_utility", self.width_utility.to_string());
        put("width_budget", self.width_budget.to_string());
        put("proj_dim", self.proj_dim.to_string());
        put("proj_hidden", self.proj_hidden.to_string());
        put("budget_feat", self.budget_feat.to_string());
        put(
            "anonymizer_output",
            match self.anonymizer_output {
                OutputMode::Sigmoid => "sigmoid",
                OutputMode::Linear => "linear",
            }
            .into(),
        );
        put("anonymizer_skip", self.anonymizer_skip.to_string());
        put(
            "probe_arch",
            match self.probe_arch {
                UtilityArch::Conv => "conv",
                UtilityArch::Linear => "linear",
            }
            .into(),
        );
        put(
            "penalty_space",
            match self.penalty_space {
                PenaltySpace::Pixel => "pixel",
                PenaltySpace::Feature => "feature",
            }
            .into(),
        );
        put(
            "optimizer",
            match self.optimizer {
                OptimizerKind::Sgd => "sgd",
                OptimizerKind::Adam => "adam",
            }
            .into(),
        );
        put(
            "probe_lr_schedule",
            match self.probe_lr_schedule {
                LrSchedule::Constant => "constant",
                LrSchedule::WarmupStep => "warmup-step",
            }
            .into(),
        );
        put("seed", self.seed.to_string());
        put("isolation_checks", self.isolation_checks.to_string());
        put("deterministic_timing", self.deterministic_timing.to_string());
        put("gen.k_action", self.gen.k_action.to_string());
        put("gen.k_privacy", self.gen.k_privacy.to_string());
        put("gen.frames", self.gen.frames.to_string());
        put("gen.channels", self.gen.channels.to_string());
        put("gen.height", self.gen.height.to_string());
        put("gen.width", self.gen.width.to_string());
        put("gen.train_clips", self.gen.train_clips.to_string());
        put("gen.eval_clips", self.gen.eval_clips.to_string());
        put("gen.train_privacy", self.gen.train_privacy.to_string());
        put("gen.eval_privacy", self.gen.eval_privacy.to_string());
        put("gen.noise_sigma", self.gen.noise_sigma.to_string());
        put("gen.background", self.gen.background.to_string());
        put("gen.blob_amp", self.gen.blob_amp.to_string());
        put("gen.hue_amp", self.gen.hue_amp.to_string());
        put("gen.glyph_amp", self.gen.glyph_amp.to_string());
        put("sweep.b_grid", fmt_grid(&self.sweep_b_grid));
        put("sweep.lambda_grid", fmt_grid(&self.sweep_lambda_grid));
        put("sweep.full_cross", self.sweep_full_cross.to_string());
        put("sweep.jobs", self.jobs.to_string());
        // fixed conventions, recorded so the manifest stands alone
        put("convention.mu_mechanism", "budget term enters the objective as min(l_b, mu)".into());
        put("convention.similarity", "h(u,v) = exp(cos(u,v)/tau)".into());
        put("convention.f1", "threshold 0.5, macro average, 0/0 counts as 0".into());
        put("convention.step_batches", "step-2 reuses step-1 batches and views".into());
        put("convention.subgradients", "relu/hinge 0 at kink, sqrt 0 at 0".into());
        m
    }

    /// SHA-256 over the resolved key/value map.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.resolved() {
            h.update(k.as_bytes());
            h.update([b'=']);
            h.update(v.as_bytes());
            h.update([b'\n']);
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_key_is_named_in_the_error() {
        let mut cfg = TrainConfig::default();
        let err = cfg.apply("no_such_key", "1").unwrap_err().to_string();
        assert!(err.contains("no_such_key"), "{err}");
    }

    #[test]
    fn parses_lines_with_comments() {
        let mut cfg = TrainConfig::default();
        cfg.apply_lines("# comment\nb = 0.5\n\nseed = 11 # trailing\nsweep.b_grid = 0.3, 0.9\n")
            .unwrap();
        assert_eq!(cfg.b, 0.5);
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.sweep_b_grid, vec![0.3, 0.9]);
    }

    #[test]
    fn malformed_line_is_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.apply_lines("just words\n").is_err());
    }

    #[test]
    fn digest_reflects_every_field() {
        let base = TrainConfig::default();
        let mut other = TrainConfig::default();
        assert_eq!(base.digest(), other.digest());
        other.apply("gen.hue_amp", "0.2").unwrap();
        assert_ne!(base.digest(), other.digest());
    }

    #[test]
    fn validation_catches_bad_ranges() {
        let mut cfg = TrainConfig::default();
        cfg.b = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.skip = 8;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.lr_utility = 0.0;
        assert!(cfg.validate().is_err());
    }
}
