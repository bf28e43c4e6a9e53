//! The command implementations behind the `trajdiff` binary. Every command is
//! a function of its [`RunConfig`], so reruns produce identical files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cli::config::RunConfig;
use crate::cli::render::render_svg;
use crate::evalsuite::{constant_velocity, metrics_csv, summarize, MetricsSummary, SampleMetrics};
use crate::model::{Planner, TrainState};
use crate::pipeline::{episode_seed, evaluate_constant_velocity, evaluate_episode, evaluate_planner};
use crate::scenesim::{make_dataset, read_dataset, write_dataset, EpisodeRecord, KindMix};
use crate::train::{log_header, train, CheckpointWriter, EpochLog, Placement, TrainConfig, TrainObserver};
use crate::PlanError;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const LOG_FILE: &str = "train_log.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<EpisodeRecord>,
    pub val: Vec<EpisodeRecord>,
    pub test: Vec<EpisodeRecord>,
}

/// 80/10/10 by position; records already carry independent derived seeds
/// and a shuffled kind assignment.
pub fn split_dataset(mut records: Vec<EpisodeRecord>) -> Splits {
    let n = records.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = records.split_off(n_train + n_val);
    let val = records.split_off(n_train);
    Splits {
        train: records,
        val,
        test,
    }
}

fn create_dir(dir: &Path) -> Result<(), PlanError> {
    fs::create_dir_all(dir).map_err(|e| PlanError::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<(), PlanError> {
    fs::write(path, contents).map_err(|e| PlanError::io(path, e))
}

pub fn generate_splits(cfg: &RunConfig) -> Splits {
    split_dataset(make_dataset(cfg.episodes, cfg.seed, KindMix::default()))
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Splits, PlanError> {
    let splits = generate_splits(cfg);
    create_dir(&cfg.dataset)?;
    write_dataset(&cfg.dataset.join(TRAIN_FILE), &splits.train)?;
    write_dataset(&cfg.dataset.join(VAL_FILE), &splits.val)?;
    write_dataset(&cfg.dataset.join(TEST_FILE), &splits.test)?;
    Ok(splits)
}

pub fn load_split(dataset: &Path, file: &str) -> Result<Vec<EpisodeRecord>, PlanError> {
    read_dataset(&dataset.join(file))
}

/// Appends each epoch's row to the log as it finishes, then checkpoints.
struct LogAndCheckpoint<'a> {
    log_path: PathBuf,
    lines: Vec<String>,
    ckpt: CheckpointWriter<'a>,
}

impl TrainObserver for LogAndCheckpoint<'_> {
    fn epoch_done(&mut self, planner: &Planner, log: &EpochLog, state: TrainState, improved: bool) -> Result<(), PlanError> {
        self.lines.push(log.csv_row());
        let mut text = self.lines.join("\n");
        text.push('\n');
        write_file(&self.log_path, &text)?;
        self.ckpt.epoch_done(planner, log, state, improved)
    }
}

/// Trains into `out_dir`, writing `train_log.csv`, `best.ckpt` (best
/// validation denoising loss) and `last.ckpt`. With `resume`, continues from
/// `last.ckpt` and keeps the log rows of the epochs already done.
/// `stop_after` ends the run early without changing its schedule.
pub fn cmd_train(cfg: &RunConfig, resume: bool, stop_after: Option<usize>) -> Result<Vec<EpochLog>, PlanError> {
    let train_set = load_split(&cfg.dataset, TRAIN_FILE)?;
    let val_set = load_split(&cfg.dataset, VAL_FILE)?;
    create_dir(&cfg.out_dir)?;
    cfg.save(&cfg.out_dir.join("config.toml"))?;
    let log_path = cfg.out_dir.join(LOG_FILE);
    let (mut planner, state, mut lines) = if resume {
        let (p, state) = Planner::load(&cfg.out_dir.join(LAST_CKPT))?;
        let state = state.ok_or_else(|| PlanError::Format(format!("{LAST_CKPT} has no training state")))?;
        if p.cfg != cfg.model() {
            return Err(PlanError::Config("checkpoint architecture differs from the configuration".into()));
        }
        let text = fs::read_to_string(&log_path).map_err(|e| PlanError::io(&log_path, e))?;
        let lines: Vec<String> = text.lines().take(1 + state.epochs_done).map(String::from).collect();
        (p, Some(state), lines)
    } else {
        (Planner::new(cfg.model(), cfg.seed)?, None, vec![log_header()])
    };
    if lines.first().map(String::as_str) != Some(log_header().as_str()) {
        lines.insert(0, log_header());
    }
    let mut obs = LogAndCheckpoint {
        log_path,
        lines,
        ckpt: CheckpointWriter { dir: &cfg.out_dir },
    };
    let tcfg = TrainConfig {
        stop_after,
        ..cfg.train()
    };
    train(&mut planner, &train_set, &val_set, &tcfg, state, &mut obs)
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<SampleMetrics>,
    pub summary: MetricsSummary,
    pub csv_path: PathBuf,
}

/// Scores the test split with a trained checkpoint and writes `metrics.csv`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, post_filter_diversity: bool) -> Result<EvalReport, PlanError> {
    let test = load_split(&cfg.dataset, TEST_FILE)?;
    let (planner, _) = Planner::load(checkpoint)?;
    let results = evaluate_planner(&planner, &test, &cfg.eval(post_filter_diversity))?;
    let rows: Vec<SampleMetrics> = results.into_iter().map(|r| r.metrics).collect();
    finish_eval(cfg, rows, "metrics.csv")
}

/// Constant-velocity baseline on the test split, written to `metrics_cv.csv`.
pub fn cmd_eval_baseline(cfg: &RunConfig) -> Result<EvalReport, PlanError> {
    let test = load_split(&cfg.dataset, TEST_FILE)?;
    finish_eval(cfg, evaluate_constant_velocity(&test), "metrics_cv.csv")
}

fn finish_eval(cfg: &RunConfig, rows: Vec<SampleMetrics>, name: &str) -> Result<EvalReport, PlanError> {
    create_dir(&cfg.out_dir)?;
    let csv_path = cfg.out_dir.join(name);
    write_file(&csv_path, &metrics_csv(&rows))?;
    Ok(EvalReport {
        summary: summarize(&rows),
        rows,
        csv_path,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Steps,
    Batch,
    Beta,
    Candidates,
    Placement,
}

impl SweepAxis {
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::Steps => &["5", "10", "20"],
            SweepAxis::Batch => &["32", "64", "128"],
            SweepAxis::Beta => &["0", "0.02", "0.05", "0.1"],
            SweepAxis::Candidates => &["10", "15", "30"],
            SweepAxis::Placement => &["off", "inner", "outer"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig, PlanError> {
        fn num<T: FromStr>(v: &str) -> Result<T, PlanError> {
            v.parse().map_err(|_| PlanError::Config(format!("bad sweep value `{v}`")))
        }
        let mut c = base.clone();
        match self {
            SweepAxis::Steps => c.steps = num(value)?,
            SweepAxis::Batch => c.batch = num(value)?,
            SweepAxis::Beta => c.beta = num(value)?,
            SweepAxis::Candidates => c.candidates = num(value)?,
            SweepAxis::Placement => c.placement = value.parse::<Placement>()?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Steps => "T",
            SweepAxis::Batch => "B",
            SweepAxis::Beta => "beta",
            SweepAxis::Candidates => "N",
            SweepAxis::Placement => "placement",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, PlanError> {
        match s {
            "T" | "t" | "steps" => Ok(SweepAxis::Steps),
            "B" | "b" | "batch" => Ok(SweepAxis::Batch),
            "beta" => Ok(SweepAxis::Beta),
            "N" | "n" | "candidates" => Ok(SweepAxis::Candidates),
            "placement" => Ok(SweepAxis::Placement),
            other => Err(PlanError::Config(format!("unknown sweep axis `{other}`; expected T, B, beta, N or placement"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub summary: MetricsSummary,
}

pub fn sweep_table(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut s = format!("{axis},PDMS,D\n");
    for r in rows {
        s.push_str(&format!("{},{:.2},{:.2}\n", r.value, 100.0 * r.summary.pdms, 100.0 * r.summary.diversity));
    }
    s
}

/// Trains and evaluates one configuration per axis value under
/// `out_dir/sweep_<axis>/<value>`, then writes `out_dir/sweep_<axis>.csv`
/// with PDMS and D scaled by 100. The candidate axis shares one model.
pub fn cmd_sweep(cfg: &RunConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<SweepRow>, PlanError> {
    let root = cfg.out_dir.join(format!("sweep_{axis}"));
    let mut rows = Vec::with_capacity(values.len());
    let shared = root.join("model");
    if axis == SweepAxis::Candidates {
        let mut c = cfg.clone();
        c.out_dir = shared.clone();
        cmd_train(&c, false, None)?;
    }
    for v in values {
        let mut c = axis.apply(cfg, v)?;
        c.out_dir = root.join(v);
        let ckpt = if axis == SweepAxis::Candidates {
            shared.join(BEST_CKPT)
        } else {
            cmd_train(&c, false, None)?;
            c.out_dir.join(BEST_CKPT)
        };
        let report = cmd_eval(&c, &ckpt, false)?;
        rows.push(SweepRow {
            value: v.clone(),
            summary: report.summary,
        });
    }
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join(format!("sweep_{axis}.csv")), &sweep_table(axis, &rows))?;
    Ok(rows)
}

/// Draws test episode `index` with its candidates. Without a checkpoint the
/// single constant-velocity plan is drawn.
pub fn cmd_render(cfg: &RunConfig, checkpoint: Option<&Path>, index: usize, out: &Path) -> Result<String, PlanError> {
    let test = load_split(&cfg.dataset, TEST_FILE)?;
    let rec = test
        .get(index)
        .ok_or_else(|| PlanError::Config(format!("test split has {} episodes, asked for {index}", test.len())))?;
    let cands = match checkpoint {
        Some(path) => {
            let (planner, _) = Planner::load(path)?;
            planner.sample_for_record(rec, cfg.candidates, episode_seed(cfg.seed, rec))?
        }
        None => vec![constant_velocity(&rec.ego)],
    };
    let result = evaluate_episode(rec, cands, &cfg.eval(false));
    let svg = render_svg(&rec.scene, &result.candidates, Some(result.selected));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(out, &svg)?;
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_sum_to_n() {
        let cfg = RunConfig {
            episodes: 37,
            ..RunConfig::default()
        };
        let s = generate_splits(&cfg);
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 37);
        assert_eq!((s.train.len(), s.val.len()), (29, 3));
    }

    #[test]
    fn sweep_axis_parsing_and_application() {
        let base = RunConfig::default();
        for axis in [SweepAxis::Steps, SweepAxis::Batch, SweepAxis::Beta, SweepAxis::Candidates, SweepAxis::Placement] {
            assert_eq!(axis.to_string().parse::<SweepAxis>().unwrap(), axis);
            for v in axis.default_values() {
                axis.apply(&base, &v).unwrap();
            }
        }
        assert_eq!(SweepAxis::Steps.apply(&base, "20").unwrap().steps, 20);
        assert!(SweepAxis::Steps.apply(&base, "0").is_err());
        assert!(SweepAxis::Beta.apply(&base, "x").is_err());
    }

    #[test]
    fn sweep_table_is_scaled_by_100() {
        let summary = MetricsSummary {
            scores: crate::evalsuite::SubScores {
                nc: 1.0,
                dac: 1.0,
                ep: 1.0,
                ttc: 1.0,
                comfort: 1.0,
                ddc: 1.0,
            },
            pdms: 0.5,
            diversity: 0.25,
            n_surviving: 3.0,
        };
        let t = sweep_table(SweepAxis::Beta, &[SweepRow { value: "0.02".into(), summary }]);
        assert_eq!(t, "beta,PDMS,D\n0.02,50.00,25.00\n");
    }
}
