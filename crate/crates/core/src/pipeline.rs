//! Test-split evaluation: sample, filter, select and score each episode.

use rayon::prelude::*;

use crate::evalsuite::{
    constant_velocity, pdm_score, rejection_filter, select_top1, trajectory_diversity, SampleMetrics, ScoringContext,
};
use crate::featenc::EncoderInputs;
use crate::model::Planner;
use crate::scenesim::{derive_seed, EpisodeRecord};
use crate::trajspace::Trajectory;
use crate::PlanError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub candidates: usize,
    pub seed: u64,
    /// Measure diversity over the filtered survivors instead of all candidates.
    pub post_filter_diversity: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            candidates: 30,
            seed: 0,
            post_filter_diversity: false,
        }
    }
}

/// Everything produced for one test episode.
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub metrics: SampleMetrics,
    pub candidates: Vec<Trajectory>,
    pub survivors: Vec<usize>,
    /// Index into `candidates` of the selected plan.
    pub selected: usize,
}

pub fn evaluate_episode(rec: &EpisodeRecord, candidates: Vec<Trajectory>, opts: &EvalOptions) -> EpisodeResult {
    let survivors = rejection_filter(&candidates);
    let kept: Vec<Trajectory> = survivors.iter().map(|&i| candidates[i]).collect();
    let ctx = ScoringContext::new(&rec.scene, &rec.ego).with_drivable_mask();
    let sel = select_top1(&kept, &ctx);
    let diversity = if opts.post_filter_diversity {
        trajectory_diversity(&kept)
    } else {
        trajectory_diversity(&candidates)
    };
    EpisodeResult {
        metrics: SampleMetrics {
            sample_id: rec.id.to_string(),
            scores: sel.scores,
            pdms: sel.pdms,
            diversity,
            n_surviving: survivors.len(),
        },
        selected: survivors[sel.index],
        candidates,
        survivors,
    }
}

/// Candidate seed for an episode; independent of evaluation order.
pub fn episode_seed(seed: u64, rec: &EpisodeRecord) -> u64 {
    derive_seed(seed, 0xCA4D_0000_0000 ^ rec.id)
}

pub fn evaluate_planner(planner: &Planner, test: &[EpisodeRecord], opts: &EvalOptions) -> Result<Vec<EpisodeResult>, PlanError> {
    if opts.candidates == 0 {
        return Err(PlanError::Config("candidate count must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(test.len());
    for chunk in test.chunks(64) {
        let refs: Vec<&EpisodeRecord> = chunk.iter().collect();
        let feats = planner.feature_groups(&EncoderInputs::from_records(&refs))?;
        let results: Vec<Result<EpisodeResult, PlanError>> = chunk
            .par_iter()
            .zip(feats.par_iter())
            .map(|(rec, feat)| {
                let cands = planner.sample(feat, opts.candidates, episode_seed(opts.seed, rec))?;
                Ok(evaluate_episode(rec, cands, opts))
            })
            .collect();
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Constant-velocity extrapolation scored the same way (a single candidate).
pub fn evaluate_constant_velocity(test: &[EpisodeRecord]) -> Vec<SampleMetrics> {
    test.par_iter()
        .map(|rec| {
            let t = constant_velocity(&rec.ego);
            let s = ScoringContext::new(&rec.scene, &rec.ego).score(&t);
            SampleMetrics {
                sample_id: rec.id.to_string(),
                scores: s,
                pdms: pdm_score(&s),
                diversity: 0.0,
                n_surviving: 1,
            }
        })
        .collect()
}
