//! Minibatch training of the planner on the denoising loss plus the weighted
//! decorrelation penalty, with per-epoch diagnostics.

use std::path::Path;

use gradcore::{onecycle_lr, AdamConfig, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decorr::{combined_loss, corr_matrix, decorr_loss, mean_abs_offdiag, singular_spectrum};
use crate::diffusion::{diff_loss, Normalizer};
use crate::featenc::EncoderInputs;
use crate::model::{Planner, TrainState};
use crate::scenesim::{derive_seed, EpisodeRecord};
use crate::PlanError;

pub const SPECTRUM_LEN: usize = 16;

/// Whether the decorrelation penalty is active, and where it reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    #[default]
    Outer,
    Inner,
    /// Logged but never weighted.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch: usize,
    pub beta: f64,
    pub epochs: usize,
    pub max_lr: f64,
    pub placement: Placement,
    pub grad_clip: f64,
    /// Stop once this many epochs are done, keeping the learning-rate
    /// schedule of the full `epochs` run so it can be resumed later.
    pub stop_after: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch: 64,
            beta: crate::decorr::DEFAULT_BETA,
            epochs: 120,
            max_lr: 1e-4,
            placement: Placement::Outer,
            grad_clip: 1.0,
            stop_after: None,
        }
    }
}

impl TrainConfig {
    pub fn effective_beta(&self) -> f64 {
        if self.placement == Placement::Off {
            0.0
        } else {
            self.beta
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_diff: f64,
    pub l_rep: f64,
    pub val_l_diff: f64,
    pub val_l_rep: f64,
    pub mean_abs_corr: f64,
    pub lr: f64,
    pub spectrum: Vec<f64>,
}

pub fn log_header() -> String {
    let mut h = String::from("epoch,L_diff,L_rep,val_L_diff,val_L_rep,mean_abs_corr,lr");
    for k in 1..=SPECTRUM_LEN {
        h.push_str(&format!(",sv{k}"));
    }
    h
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let mut r = format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.epoch, self.l_diff, self.l_rep, self.val_l_diff, self.val_l_rep, self.mean_abs_corr, self.lr
        );
        for k in 0..SPECTRUM_LEN {
            r.push_str(&format!(",{:.9e}", self.spectrum.get(k).copied().unwrap_or(0.0)));
        }
        r
    }
}

/// Precomputed encoder inputs and labels for a split.
pub struct PreparedSplit {
    pub inputs: EncoderInputs,
    pub labels: Tensor,
}

impl PreparedSplit {
    pub fn new(planner: &Planner, records: &[EpisodeRecord]) -> Self {
        let refs: Vec<&EpisodeRecord> = records.iter().collect();
        let trajs: Vec<_> = records.iter().map(|r| &r.expert).collect();
        Self {
            inputs: EncoderInputs::from_records(&refs),
            labels: planner.labels(&trajs),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.batch
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn batch(&self, rows: &[usize]) -> (EncoderInputs, Tensor) {
        let w = crate::diffusion::ACTION_DIM;
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(&self.labels.data()[r * w..(r + 1) * w]);
        }
        let labels = Tensor::new(&[rows.len() * crate::trajspace::HORIZON, 2], data).expect("label rows");
        (self.inputs.select(rows), labels)
    }
}

/// Minibatches of an epoch: shuffled full batches, with a trailing partial
/// batch kept only when it has at least two rows.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xE90C_0000 + epoch as u64));
    idx.shuffle(&mut rng);
    idx.chunks(batch).filter(|c| c.len() >= 2).map(|c| c.to_vec()).collect()
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    epoch_batches(n, batch, 0, 0).len()
}

struct BatchOut {
    l_diff: f64,
    l_rep: f64,
    repr: Tensor,
}

fn run_batch(
    planner: &mut Planner,
    inputs: &EncoderInputs,
    labels: &Tensor,
    beta: f64,
    rng: &mut ChaCha8Rng,
    learn: Option<(f64, f64)>,
) -> Result<BatchOut, PlanError> {
    let mut g = Graph::new();
    let feat = planner.features(&mut g, inputs)?;
    let dl = diff_loss(&mut g, &planner.store, &planner.denoiser, labels, &feat, &planner.sched, rng)?;
    let l_rep = decorr_loss(&mut g, dl.repr)?;
    let total = combined_loss(&mut g, dl.loss, l_rep, beta)?;
    let out = BatchOut {
        l_diff: g.value(dl.loss).item(),
        l_rep: g.value(l_rep).item(),
        repr: g.value(dl.repr).clone(),
    };
    if let Some((lr, clip)) = learn {
        let grads = g.backward(total)?;
        planner.store.zero_grad();
        grads.accumulate_into(&g, &mut planner.store);
        if clip > 0.0 {
            planner.store.clip_grad_norm(clip);
        }
        planner.store.adam_step(lr, AdamConfig::default());
    }
    Ok(out)
}

/// Validation metrics with a fixed noise stream so epochs are comparable.
pub struct Validation {
    pub l_diff: f64,
    pub l_rep: f64,
    pub mean_abs_corr: f64,
    pub spectrum: Vec<f64>,
}

pub fn validate(planner: &mut Planner, split: &PreparedSplit, batch: usize, seed: u64) -> Result<Validation, PlanError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7A11D));
    let rows: Vec<usize> = (0..split.len()).collect();
    let (mut ld, mut lr, mut corr, mut n) = (0.0, 0.0, 0.0, 0usize);
    let mut spectrum = Vec::new();
    for chunk in rows.chunks(batch).filter(|c| c.len() >= 2) {
        let (inputs, labels) = split.batch(chunk);
        let out = run_batch(planner, &inputs, &labels, 0.0, &mut rng, None)?;
        let w = chunk.len() as f64;
        ld += out.l_diff * w;
        lr += out.l_rep * w;
        let c = corr_matrix(&out.repr)?;
        corr += mean_abs_offdiag(&c) * w;
        if spectrum.is_empty() {
            spectrum = singular_spectrum(&c, SPECTRUM_LEN);
        }
        n += chunk.len();
    }
    if n == 0 {
        return Err(PlanError::DegenerateBatch(split.len()));
    }
    let nf = n as f64;
    Ok(Validation {
        l_diff: ld / nf,
        l_rep: lr / nf,
        mean_abs_corr: corr / nf,
        spectrum,
    })
}

/// Hooks invoked by [`train`]; the default does nothing.
pub trait TrainObserver {
    fn epoch_done(&mut self, _planner: &Planner, _log: &EpochLog, _state: TrainState, _improved: bool) -> Result<(), PlanError> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Fits the normaliser (fresh runs only) and trains from `state` up to
/// `cfg.epochs`. Every epoch uses a random stream derived from
/// `(seed, epoch)`, so a run resumed from a saved state continues exactly.
pub fn train(
    planner: &mut Planner,
    train_set: &[EpisodeRecord],
    val_set: &[EpisodeRecord],
    cfg: &TrainConfig,
    state: Option<TrainState>,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<EpochLog>, PlanError> {
    if cfg.batch < 2 {
        return Err(PlanError::Config(format!("batch size must be at least 2, got {}", cfg.batch)));
    }
    if train_set.len() < 2 || val_set.len() < 2 {
        return Err(PlanError::Config("training and validation splits need at least 2 records each".into()));
    }
    if state.is_none() {
        planner.norm = Normalizer::fit(train_set.iter().map(|r| &r.expert));
    }
    let train_split = PreparedSplit::new(planner, train_set);
    let val_split = PreparedSplit::new(planner, val_set);
    let per_epoch = steps_per_epoch(train_split.len(), cfg.batch);
    let total = per_epoch * cfg.epochs;
    let beta = cfg.effective_beta();
    let mut st = state.unwrap_or(TrainState {
        epochs_done: 0,
        best_val: f64::INFINITY,
    });
    let mut logs = Vec::new();
    let end = cfg.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    for epoch in st.epochs_done..end {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5EED_0000 + epoch as u64));
        let (mut sd, mut sr, mut nb) = (0.0, 0.0, 0usize);
        let mut lr = 0.0;
        for (i, rows) in epoch_batches(train_split.len(), cfg.batch, cfg.seed, epoch).iter().enumerate() {
            let step = epoch * per_epoch + i;
            lr = onecycle_lr(step, total.max(1), cfg.max_lr);
            let (inputs, labels) = train_split.batch(rows);
            let out = run_batch(planner, &inputs, &labels, beta, &mut rng, Some((lr, cfg.grad_clip)))?;
            if !out.l_diff.is_finite() || !out.l_rep.is_finite() {
                return Err(PlanError::Config(format!("non-finite loss at epoch {}", epoch + 1)));
            }
            sd += out.l_diff;
            sr += out.l_rep;
            nb += 1;
        }
        let val = validate(planner, &val_split, cfg.batch, cfg.seed)?;
        let log = EpochLog {
            epoch: epoch + 1,
            l_diff: sd / nb.max(1) as f64,
            l_rep: sr / nb.max(1) as f64,
            val_l_diff: val.l_diff,
            val_l_rep: val.l_rep,
            mean_abs_corr: val.mean_abs_corr,
            lr,
            spectrum: val.spectrum,
        };
        let improved = log.val_l_diff < st.best_val;
        if improved {
            st.best_val = log.val_l_diff;
        }
        st.epochs_done = epoch + 1;
        observer.epoch_done(planner, &log, st, improved)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Writes checkpoints as training progresses: `best.ckpt` on validation
/// improvement and `last.ckpt` (with optimizer state) every epoch.
pub struct CheckpointWriter<'a> {
    pub dir: &'a Path,
}

impl TrainObserver for CheckpointWriter<'_> {
    fn epoch_done(&mut self, planner: &Planner, _log: &EpochLog, state: TrainState, improved: bool) -> Result<(), PlanError> {
        if improved {
            planner.save(&self.dir.join("best.ckpt"), false, None)?;
        }
        planner.save(&self.dir.join("last.ckpt"), true, Some(state))
    }
}
