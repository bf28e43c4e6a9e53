//! Run configuration: a flat `key = value` file plus command-line overrides.
//! Precedence is command line, then file, then defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decorr::DEFAULT_BETA;
use crate::denoiser::ReprTap;
use crate::model::ModelConfig;
use crate::pipeline::EvalOptions;
use crate::train::{Placement, TrainConfig};
use crate::PlanError;

/// Largest supported number of diffusion steps.
pub const MAX_STEPS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory holding `train.jsonl`, `val.jsonl` and `test.jsonl`.
    pub dataset: PathBuf,
    /// Episodes generated by `gen-data`, split 80/10/10.
    pub episodes: usize,
    /// Diffusion steps T.
    pub steps: usize,
    pub batch: usize,
    pub beta: f64,
    /// Candidates N sampled per test episode.
    pub candidates: usize,
    /// Passes over the training split. 120 passes over the 1,600 default
    /// training episodes is 3,000 optimizer steps at batch 64.
    pub epochs: usize,
    pub max_lr: f64,
    pub placement: Placement,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: PathBuf::from("data"),
            episodes: 2000,
            steps: 10,
            batch: 64,
            beta: DEFAULT_BETA,
            candidates: 30,
            epochs: 120,
            max_lr: 1e-4,
            placement: Placement::Outer,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Values given on the command line; `None` leaves the file or default value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub dataset: Option<PathBuf>,
    pub episodes: Option<usize>,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub beta: Option<f64>,
    pub candidates: Option<usize>,
    pub epochs: Option<usize>,
    pub max_lr: Option<f64>,
    pub placement: Option<Placement>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, PlanError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PlanError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn serialize(&self) -> String {
        toml::to_string(self).expect("flat config always serialises")
    }

    pub fn load(path: &Path) -> Result<Self, PlanError> {
        let text = std::fs::read_to_string(path).map_err(|e| PlanError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            PlanError::Config(m) => PlanError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PlanError> {
        std::fs::write(path, self.serialize()).map_err(|e| PlanError::io(path, e))
    }

    /// Defaults, then the optional file, then `over`.
    pub fn resolve(file: Option<&Path>, over: &Overrides) -> Result<Self, PlanError> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(over);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = &o.$f { self.$f = v.clone(); })*};
        }
        set!(seed, dataset, episodes, steps, batch, beta, candidates, epochs, max_lr, placement, out_dir);
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: String| Err(PlanError::Config(m));
        // TOML integers are signed 64-bit
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed must be at most {}, got {}", i64::MAX, self.seed));
        }
        if self.steps == 0 || self.steps > MAX_STEPS {
            return bad(format!("steps must be in 1..={MAX_STEPS}, got {}", self.steps));
        }
        if self.batch < 2 {
            return bad(format!("batch must be at least 2, got {}", self.batch));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad(format!("beta must be finite and non-negative, got {}", self.beta));
        }
        if self.candidates == 0 {
            return bad("candidates must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.max_lr.is_finite() && self.max_lr > 0.0) {
            return bad(format!("max_lr must be positive, got {}", self.max_lr));
        }
        if self.episodes < 20 {
            return bad(format!("episodes must be at least 20, got {}", self.episodes));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            steps: self.steps,
            tap: match self.placement {
                Placement::Inner => ReprTap::Inner,
                Placement::Outer | Placement::Off => ReprTap::Outer,
            },
            ..ModelConfig::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            batch: self.batch,
            beta: self.beta,
            epochs: self.epochs,
            max_lr: self.max_lr,
            placement: self.placement,
            ..TrainConfig::default()
        }
    }

    pub fn eval(&self, post_filter_diversity: bool) -> EvalOptions {
        EvalOptions {
            candidates: self.candidates,
            seed: self.seed,
            post_filter_diversity,
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Placement::Outer => "outer",
            Placement::Inner => "inner",
            Placement::Off => "off",
        })
    }
}

impl FromStr for Placement {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, PlanError> {
        match s {
            "outer" => Ok(Placement::Outer),
            "inner" => Ok(Placement::Inner),
            "off" => Ok(Placement::Off),
            other => Err(PlanError::Config(format!("unknown placement `{other}`; expected outer, inner or off"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.serialize()).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::parse("steps = 20\nplacement = \"inner\"\n").unwrap();
        assert_eq!(c.steps, 20);
        assert_eq!(c.placement, Placement::Inner);
        assert_eq!(c.batch, 64);
    }

    #[test]
    fn unknown_keys_and_bad_ranges_are_rejected() {
        assert!(matches!(RunConfig::parse("stepz = 3"), Err(PlanError::Config(_))));
        assert!(matches!(RunConfig::parse("steps = 0"), Err(PlanError::Config(_))));
        assert!(matches!(RunConfig::parse("beta = -0.1"), Err(PlanError::Config(_))));
        assert!(matches!(RunConfig::parse("batch = 1"), Err(PlanError::Config(_))));
    }

    #[test]
    fn command_line_beats_file() {
        let dir = std::env::temp_dir().join(format!("cfg-prec-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.toml");
        std::fs::write(&path, "steps = 20\nbatch = 32\n").unwrap();
        let over = Overrides {
            steps: Some(5),
            ..Default::default()
        };
        let c = RunConfig::resolve(Some(&path), &over).unwrap();
        assert_eq!((c.steps, c.batch, c.candidates), (5, 32, 30));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn placement_names() {
        for p in [Placement::Outer, Placement::Inner, Placement::Off] {
            assert_eq!(p.to_string().parse::<Placement>().unwrap(), p);
        }
        assert!("both".parse::<Placement>().is_err());
    }
}
