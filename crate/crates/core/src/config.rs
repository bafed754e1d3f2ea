//! Run configuration and the plain `key = value` config file format.
//!
//! Files are line-oriented: `key = value`, `#` starts a comment, blank
//! lines are ignored. Unknown keys are rejected so typos fail loudly.
//! Keys are documented in the README; CLI flags override file values.

use crate::error::{Error, Result};
use crate::model::ReplayMix;
use crate::policies::{Direction, PolicyId, SelectionPolicy};
use crate::synthdata::{DomainParams, ScenarioSpec};
use crate::types::ScenarioKind;
use std::path::PathBuf;

/// When the class-incremental distillation teacher is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillMode {
    /// Teacher on for class-incremental tasks after the first, off for
    /// domain-incremental runs.
    Auto,
    On,
    Off,
}

impl std::fmt::Display for DistillMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DistillMode::Auto => write!(f, "auto"),
            DistillMode::On => write!(f, "on"),
            DistillMode::Off => write!(f, "off"),
        }
    }
}

impl std::str::FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(DistillMode::Auto),
            "on" => Ok(DistillMode::On),
            "off" => Ok(DistillMode::Off),
            other => Err(Error::Config(format!("unknown distill mode '{}'", other))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: ScenarioKind,
    /// Dataset directory; when absent the scenario is generated in-process.
    pub data_dir: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub h1: usize,
    pub h2: usize,
    pub num_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub poly_power: f64,
    pub buffer_capacity: usize,
    pub policy: SelectionPolicy,
    pub replay_mix: ReplayMix,
    pub distill: DistillMode,
    pub lambda: f64,
    pub train_per_task: usize,
    pub val_per_task: usize,
    pub tasks: usize,
    pub noise_sigma: f64,
    pub palette_angle: f64,
    pub blur_radius: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            scenario: ScenarioKind::ClassIncremental,
            data_dir: None,
            height: 32,
            width: 32,
            patch: 5,
            h1: 64,
            h2: 32,
            num_classes: 10,
            epochs: 30,
            batch_size: 8,
            learning_rate: 4e-4,
            poly_power: 0.9,
            buffer_capacity: 64,
            policy: SelectionPolicy::new(PolicyId::Random),
            replay_mix: ReplayMix::Concat,
            distill: DistillMode::Auto,
            lambda: 1.0,
            train_per_task: 200,
            val_per_task: 50,
            tasks: 3,
            noise_sigma: 0.05,
            palette_angle: 35.0,
            blur_radius: 1,
        }
    }
}

/// Parse the line-oriented key-value format.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(at) => &raw[..at],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("key '{}': {}", key, e)))
}

impl RunConfig {
    /// Apply `key = value` pairs on top of this config.
    pub fn apply_kv(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut replay_ratio: Option<f64> = None;
        let mut replay_mix_kind: Option<String> = None;
        for (key, value) in pairs {
            match key.as_str() {
                "seed" => self.seed = parse(key, value)?,
                "scenario" => {
                    self.scenario = match value.as_str() {
                        "class" | "class_incremental" => ScenarioKind::ClassIncremental,
                        "domain" | "domain_incremental" => ScenarioKind::DomainIncremental,
                        other => {
                            return Err(Error::Config(format!("unknown scenario '{}'", other)))
                        }
                    };
                    if self.scenario == ScenarioKind::DomainIncremental && self.tasks == 3 {
                        self.tasks = 2;
                    }
                }
                "data" => self.data_dir = Some(PathBuf::from(value)),
                "height" => self.height = parse(key, value)?,
                "width" => self.width = parse(key, value)?,
                "patch" => self.patch = parse(key, value)?,
                "h1" => self.h1 = parse(key, value)?,
                "h2" => self.h2 = parse(key, value)?,
                "classes" => self.num_classes = parse(key, value)?,
                "epochs" => self.epochs = parse(key, value)?,
                "batch" => self.batch_size = parse(key, value)?,
                "lr" => self.learning_rate = parse(key, value)?,
                "poly_power" => self.poly_power = parse(key, value)?,
                "buffer" => self.buffer_capacity = parse(key, value)?,
                "policy" => self.policy.id = parse::<PolicyId>(key, value)?,
                "th" => self.policy.th = parse(key, value)?,
                "cmp" => self.policy.cmp = parse(key, value)?,
                "rss_dim" => self.policy.rss_dim = parse(key, value)?,
                "direction" => self.policy.direction = parse::<Direction>(key, value)?,
                "replay_mix" => replay_mix_kind = Some(value.clone()),
                "replay_ratio" => replay_ratio = Some(parse(key, value)?),
                "distill" => self.distill = parse::<DistillMode>(key, value)?,
                "lambda" => self.lambda = parse(key, value)?,
                "train_per_task" => self.train_per_task = parse(key, value)?,
                "val_per_task" => self.val_per_task = parse(key, value)?,
                "tasks" => self.tasks = parse(key, value)?,
                "noise_sigma" => self.noise_sigma = parse(key, value)?,
                "palette_angle" => self.palette_angle = parse(key, value)?,
                "blur_radius" => self.blur_radius = parse(key, value)?,
                other => return Err(Error::Config(format!("unknown config key '{}'", other))),
            }
        }
        match (replay_mix_kind.as_deref(), replay_ratio) {
            (Some("concat"), _) | (None, None) => {}
            (Some("ratio"), Some(r)) => self.replay_mix = ReplayMix::Ratio(r),
            (Some("ratio"), None) => {
                return Err(Error::Config(
                    "replay_mix = ratio requires replay_ratio".into(),
                ))
            }
            (None, Some(r)) => self.replay_mix = ReplayMix::Ratio(r),
            (Some(other), _) => {
                return Err(Error::Config(format!("unknown replay_mix '{}'", other)))
            }
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_kv(&parse_kv(text)?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.poly_power <= 0.0 {
            return Err(Error::Config("poly power must be positive".into()));
        }
        if self.patch == 0 || self.patch % 2 == 0 {
            return Err(Error::Config("patch size must be odd".into()));
        }
        if self.num_classes < 2 || self.num_classes > 254 {
            return Err(Error::Config("classes must be in [2, 254]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.tasks == 0 {
            return Err(Error::Config("tasks must be >= 1".into()));
        }
        if self.buffer_capacity != 0 && self.buffer_capacity < self.tasks {
            return Err(Error::Config(format!(
                "buffer capacity {} cannot hold one sample per task ({}); use 0 to disable replay",
                self.buffer_capacity, self.tasks
            )));
        }
        if let ReplayMix::Ratio(r) = self.replay_mix {
            if !(0.0 < r && r < 1.0) {
                return Err(Error::Config("replay_ratio must be in (0,1)".into()));
            }
        }
        self.policy.validate()?;
        Ok(())
    }

    /// Scenario generator parameters implied by this config: contiguous
    /// near-even class splits (earliest tasks take the remainder), two
    /// exclusive classes in the middle task for class-incremental runs,
    /// photometric shift on every task after the first for
    /// domain-incremental runs.
    pub fn scenario_spec(&self) -> Result<ScenarioSpec> {
        let c = self.num_classes;
        let k = self.tasks;
        let spec = match self.scenario {
            ScenarioKind::ClassIncremental => {
                if k > c {
                    return Err(Error::Config(format!(
                        "{} tasks cannot split {} classes",
                        k, c
                    )));
                }
                let base = c / k;
                let rem = c % k;
                let mut task_labeled = Vec::with_capacity(k);
                let mut next = 0u8;
                for t in 0..k {
                    let size = base + usize::from(t < rem);
                    task_labeled.push((next..next + size as u8).collect::<Vec<_>>());
                    next += size as u8;
                }
                let exclusive_task = if k >= 3 { 1 } else { 0 };
                let exclusive_classes = if k >= 3 {
                    task_labeled[exclusive_task]
                        .iter()
                        .copied()
                        .take(2)
                        .collect()
                } else {
                    Vec::new()
                };
                ScenarioSpec {
                    kind: ScenarioKind::ClassIncremental,
                    height: self.height,
                    width: self.width,
                    num_classes: c,
                    train_per_task: self.train_per_task,
                    val_per_task: self.val_per_task,
                    task_labeled,
                    exclusive_classes,
                    exclusive_task,
                    class_weights: longtail(c),
                    objects_min: 3,
                    objects_max: 7,
                    domain_params: vec![DomainParams::identity(); k],
                }
            }
            ScenarioKind::DomainIncremental => {
                let all: Vec<u8> = (0..c as u8).collect();
                let shifted = DomainParams {
                    palette_angle_deg: self.palette_angle,
                    noise_sigma: self.noise_sigma,
                    blur_radius: self.blur_radius,
                };
                let mut domain_params = vec![DomainParams::identity()];
                domain_params.extend(std::iter::repeat(shifted).take(k.saturating_sub(1)));
                ScenarioSpec {
                    kind: ScenarioKind::DomainIncremental,
                    height: self.height,
                    width: self.width,
                    num_classes: c,
                    train_per_task: self.train_per_task,
                    val_per_task: self.val_per_task,
                    task_labeled: vec![all; k],
                    exclusive_classes: Vec::new(),
                    exclusive_task: 0,
                    class_weights: longtail(c),
                    objects_min: 3,
                    objects_max: 7,
                    domain_params,
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Canonical text rendering; used as the config echo when the run was
    /// configured by flags rather than a file.
    pub fn canonical_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("seed", self.seed.to_string());
        put("scenario", self.scenario.to_string());
        if let Some(d) = &self.data_dir {
            put("data", d.display().to_string());
        }
        put("height", self.height.to_string());
        put("width", self.width.to_string());
        put("patch", self.patch.to_string());
        put("h1", self.h1.to_string());
        put("h2", self.h2.to_string());
        put("classes", self.num_classes.to_string());
        put("epochs", self.epochs.to_string());
        put("batch", self.batch_size.to_string());
        put("lr", format!("{}", self.learning_rate));
        put("poly_power", format!("{}", self.poly_power));
        put("buffer", self.buffer_capacity.to_string());
        put("policy", self.policy.id.to_string());
        put("th", format!("{}", self.policy.th));
        put("cmp", self.policy.cmp.to_string());
        put("rss_dim", self.policy.rss_dim.to_string());
        put("direction", self.policy.direction.to_string());
        match self.replay_mix {
            ReplayMix::Concat => put("replay_mix", "concat".into()),
            ReplayMix::Ratio(r) => {
                put("replay_mix", "ratio".into());
                put("replay_ratio", format!("{}", r));
            }
        }
        put("distill", self.distill.to_string());
        put("lambda", format!("{}", self.lambda));
        put("train_per_task", self.train_per_task.to_string());
        put("val_per_task", self.val_per_task.to_string());
        put("tasks", self.tasks.to_string());
        put("noise_sigma", format!("{}", self.noise_sigma));
        put("palette_angle", format!("{}", self.palette_angle));
        put("blur_radius", self.blur_radius.to_string());
        s
    }
}

fn longtail(c: usize) -> Vec<f64> {
    let n = c.saturating_sub(1).max(1);
    let mut w = vec![0.0; c];
    for (i, item) in w.iter_mut().enumerate().skip(1) {
        let t = (i - 1) as f64 / (n - 1).max(1) as f64;
        *item = 16f64.powf(-t);
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_kv_handles_comments_and_blanks() {
        let text = "\n# comment\nseed = 7\n  epochs=3 # trailing\n";
        let pairs = parse_kv(text).unwrap();
        assert_eq!(pairs, vec![
            ("seed".to_string(), "7".to_string()),
            ("epochs".to_string(), "3".to_string()),
        ]);
    }

    #[test]
    fn config_round_trips_through_canonical_form() {
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.policy.id = PolicyId::Gss;
        cfg.policy.cmp = 7;
        cfg.replay_mix = ReplayMix::Ratio(0.25);
        let text = cfg.canonical_kv();
        let back = RunConfig::from_kv_text(&text).unwrap();
        assert_eq!(back.seed, 9);
        assert_eq!(back.policy.id, PolicyId::Gss);
        assert_eq!(back.policy.cmp, 7);
        assert_eq!(back.replay_mix, ReplayMix::Ratio(0.25));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_kv_text("bogus = 1").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.buffer_capacity = 2;
        cfg.tasks = 3;
        assert!(cfg.validate().is_err());
        cfg.buffer_capacity = 0;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn default_ci_spec_matches_documented_splits() {
        let cfg = RunConfig::default();
        let spec = cfg.scenario_spec().unwrap();
        assert_eq!(spec.task_labeled, vec![
            vec![0, 1, 2, 3],
            vec![4, 5, 6],
            vec![7, 8, 9]
        ]);
        assert_eq!(spec.exclusive_classes, vec![4, 5]);
        assert_eq!(spec.exclusive_task, 1);
    }

    #[test]
    fn domain_spec_shifts_later_tasks() {
        let mut cfg = RunConfig::default();
        cfg.scenario = ScenarioKind::DomainIncremental;
        cfg.tasks = 2;
        let spec = cfg.scenario_spec().unwrap();
        assert!(spec.domain_params[0].is_identity());
        assert!(!spec.domain_params[1].is_identity());
    }
}
