//! The trainable planner: feature encoders, denoiser, action normaliser and
//! noise schedule, with checkpoint persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use gradcore::checkpoint::{read_tensors, write_tensors};
use gradcore::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{Denoiser, DenoiserConfig, ReprTap};
use crate::diffusion::{build_schedule, sample_candidates, NoiseSchedule, Normalizer, ACTION_DIM};
use crate::featenc::{EncoderInputs, FeatureEncoder, FeatureGroup, FeatureVars, NUM_SCENE_TOKENS};
use crate::scenesim::{derive_seed, EpisodeRecord};
use crate::trajspace::{to_actions, to_trajectory, Trajectory};
use crate::PlanError;

pub const ENCODER_PREFIX: &str = "encoder.";
pub const DENOISER_PREFIX: &str = "denoiser.";
const META_ARCH: &str = "meta.arch";
const META_NORM: &str = "meta.normalizer";
const META_TRAIN: &str = "meta.train";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub steps: usize,
    pub tap: ReprTap,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            steps: 10,
            tap: ReprTap::Outer,
        }
    }
}

/// Where a resumable run stopped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub best_val: f64,
}

pub struct Planner {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: FeatureEncoder,
    pub denoiser: Denoiser,
    pub norm: Normalizer,
    pub sched: NoiseSchedule,
}

impl Planner {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, PlanError> {
        let sched = build_schedule(cfg.steps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1417));
        let mut store = ParamStore::new();
        let encoder = FeatureEncoder::new(&mut store, ENCODER_PREFIX, cfg.denoiser.width, &mut rng)?;
        let mut denoiser = Denoiser::new(&mut store, DENOISER_PREFIX, cfg.denoiser, &mut rng)?;
        denoiser.tap = cfg.tap;
        Ok(Self {
            cfg,
            store,
            encoder,
            denoiser,
            norm: Normalizer::default(),
            sched,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Normalised action labels, `[records * 8, 2]`.
    pub fn labels(&self, trajs: &[&Trajectory]) -> Tensor {
        let data: Vec<f64> = trajs.iter().flat_map(|t| self.norm.normalize(&to_actions(t))).collect();
        Tensor::new(&[trajs.len() * crate::trajspace::HORIZON, 2], data).expect("label shape")
    }

    pub fn features(&self, g: &mut Graph, inputs: &EncoderInputs) -> Result<FeatureVars, PlanError> {
        self.encoder.forward(g, &self.store, inputs)
    }

    pub fn feature_groups(&self, inputs: &EncoderInputs) -> Result<Vec<FeatureGroup>, PlanError> {
        self.encoder.feature_groups(&self.store, inputs)
    }

    /// `n` candidate trajectories for one evaluated feature group.
    pub fn sample(&self, feat: &FeatureGroup, n: usize, seed: u64) -> Result<Vec<Trajectory>, PlanError> {
        let make = |g: &mut Graph| -> Result<FeatureVars, PlanError> {
            Ok(FeatureVars {
                batch: 1,
                scene_tokens: g.constant(feat.scene_tokens.clone()),
                emb_action: g.constant(feat.emb_action.clone()),
                emb_ego: g.constant(feat.emb_ego.clone()),
            })
        };
        let acts = sample_candidates(&self.store, &self.denoiser, &make, n, &self.sched, &self.norm, seed)?;
        Ok(acts.iter().map(to_trajectory).collect())
    }

    pub fn sample_for_record(&self, rec: &EpisodeRecord, n: usize, seed: u64) -> Result<Vec<Trajectory>, PlanError> {
        let inputs = EncoderInputs::from_records(&[rec]);
        let feat = self.feature_groups(&inputs)?.remove(0);
        self.sample(&feat, n, seed)
    }

    pub fn to_named(&self, with_optimizer: bool, state: Option<TrainState>) -> Vec<(String, Tensor)> {
        let d = self.cfg.denoiser;
        let tap = match self.cfg.tap {
            ReprTap::Outer => 0.0,
            ReprTap::Inner => 1.0,
        };
        let mut out = self.store.to_named(with_optimizer);
        out.push((
            META_ARCH.into(),
            Tensor::new(&[5], vec![d.width as f64, d.heads as f64, d.ffn_hidden as f64, self.cfg.steps as f64, tap])
                .expect("arch"),
        ));
        out.push((META_NORM.into(), self.norm.to_tensor()));
        if let Some(s) = state {
            out.push((
                META_TRAIN.into(),
                Tensor::new(&[2], vec![s.epochs_done as f64, s.best_val]).expect("train state"),
            ));
        }
        out
    }

    pub fn save(&self, path: &Path, with_optimizer: bool, state: Option<TrainState>) -> Result<(), PlanError> {
        let f = File::create(path).map_err(|e| PlanError::io(path, e))?;
        write_tensors(BufWriter::new(f), &self.to_named(with_optimizer, state)).map_err(|e| match e {
            gradcore::GradError::Io(io) => PlanError::io(path, io),
            other => other.into(),
        })
    }

    pub fn from_named(named: &[(String, Tensor)]) -> Result<(Self, Option<TrainState>), PlanError> {
        let find = |n: &str| named.iter().find(|(k, _)| k == n).map(|(_, t)| t);
        let arch = find(META_ARCH).ok_or_else(|| PlanError::Format(format!("checkpoint lacks `{META_ARCH}`")))?;
        if arch.len() != 5 {
            return Err(PlanError::Format(format!("`{META_ARCH}` has {} entries", arch.len())));
        }
        let a = arch.data();
        let cfg = ModelConfig {
            denoiser: DenoiserConfig {
                width: a[0] as usize,
                heads: a[1] as usize,
                ffn_hidden: a[2] as usize,
            },
            steps: a[3] as usize,
            tap: if a[4] == 1.0 { ReprTap::Inner } else { ReprTap::Outer },
        };
        let mut p = Self::new(cfg, 0)?;
        p.store.load_named(named)?;
        if let Some(n) = find(META_NORM) {
            p.norm = Normalizer::from_tensor(n)?;
        }
        let state = find(META_TRAIN).map(|t| TrainState {
            epochs_done: t.data()[0] as usize,
            best_val: t.data()[1],
        });
        Ok((p, state))
    }

    pub fn load(path: &Path) -> Result<(Self, Option<TrainState>), PlanError> {
        let f = File::open(path).map_err(|e| PlanError::io(path, e))?;
        let named = read_tensors(BufReader::new(f)).map_err(|e| match e {
            gradcore::GradError::Io(io) => PlanError::io(path, io),
            gradcore::GradError::Checkpoint(m) => PlanError::Format(format!("{}: {m}", path.display())),
            other => other.into(),
        })?;
        Self::from_named(&named)
    }
}

/// Checks that scene tokens and action rows line up for a batch.
pub fn check_batch(inputs: &EncoderInputs, labels: &Tensor) -> Result<(), PlanError> {
    if inputs.patches.rows() != inputs.batch * NUM_SCENE_TOKENS || labels.len() != inputs.batch * ACTION_DIM {
        return Err(PlanError::Grad(gradcore::GradError::ShapeMismatch(format!(
            "batch {} with labels {:?}",
            inputs.batch,
            labels.shape()
        ))));
    }
    Ok(())
}
