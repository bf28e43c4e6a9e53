#![allow(dead_code)]

use gradcore::{Graph, ParamId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajdiff::denoiser::DenoiserConfig;
use trajdiff::diffusion::diff_loss;
use trajdiff::featenc::EncoderInputs;
use trajdiff::model::{ModelConfig, Planner};
use trajdiff::scenesim::{make_dataset, EpisodeRecord, KindMix};

pub const SHRUNK: DenoiserConfig = DenoiserConfig {
    width: 16,
    heads: 2,
    ffn_hidden: 32,
};

pub fn shrunk_planner(seed: u64) -> Planner {
    Planner::new(
        ModelConfig {
            denoiser: SHRUNK,
            ..ModelConfig::default()
        },
        seed,
    )
    .unwrap()
}

fn loss_at(p: &Planner, recs: &[EpisodeRecord], seed: u64) -> (Graph, gradcore::Var) {
    let refs: Vec<&EpisodeRecord> = recs.iter().collect();
    let inputs = EncoderInputs::from_records(&refs);
    let labels = p.labels(&recs.iter().map(|r| &r.expert).collect::<Vec<_>>());
    let mut g = Graph::new();
    let feat = p.features(&mut g, &inputs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = diff_loss(&mut g, &p.store, &p.denoiser, &labels, &feat, &p.sched, &mut rng).unwrap();
    (g, l.loss)
}

/// Norm-wise relative error between the tape gradient of the denoising loss
/// (encoders plus denoiser) and central differences, over `coords` randomly
/// chosen parameter scalars.
pub fn planner_fd_error(seed: u64, coords: usize) -> f64 {
    let mut p = shrunk_planner(seed);
    let recs = make_dataset(3, seed, KindMix::default());
    let (g, loss) = loss_at(&p, &recs, seed);
    let grads = g.backward(loss).unwrap();
    p.store.zero_grad();
    grads.accumulate_into(&g, &mut p.store);
    let ids: Vec<ParamId> = p.store.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let h = 1e-5;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for _ in 0..coords {
        let id = ids[rng.random_range(0..ids.len())];
        let k = rng.random_range(0..p.store.value(id).len());
        analytic.push(p.store.grad(id).data()[k]);
        let orig = p.store.value(id).data()[k];
        p.store.value_mut(id).data_mut()[k] = orig + h;
        let (gp, lp) = loss_at(&p, &recs, seed);
        p.store.value_mut(id).data_mut()[k] = orig - h;
        let (gm, lm) = loss_at(&p, &recs, seed);
        p.store.value_mut(id).data_mut()[k] = orig;
        numeric.push((gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h));
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = numeric.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}
