//! DDPM machinery in action space: noise schedule, forward noising, the
//! reverse step, the denoising training loss and the candidate sampler.

use gradcore::{Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::featenc::FeatureVars;
use crate::scenesim::derive_seed;
use crate::trajspace::{to_actions, ActionSequence, Trajectory, HORIZON};
use crate::PlanError;

/// Scalars per action sequence.
pub const ACTION_DIM: usize = 2 * HORIZON;

const REFERENCE_STEPS: f64 = 1000.0;
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;
const BETA_MAX: f64 = 0.999;

/// Per-step tables, indexed by `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }
}

/// Linear 1000-step reference schedule stretched onto `steps` levels.
pub fn build_schedule(steps: usize) -> Result<NoiseSchedule, PlanError> {
    if steps < 1 {
        return Err(PlanError::InvalidT(steps));
    }
    let scale = REFERENCE_STEPS / steps as f64;
    let (lo, hi) = (BETA_START * scale, BETA_END * scale);
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            (lo + (hi - lo) * f).min(BETA_MAX)
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let sigma = beta.iter().map(|b| b.sqrt()).collect();
    Ok(NoiseSchedule {
        steps,
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

/// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`, elementwise.
pub fn add_noise(x0: &[f64], eps: &[f64], t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    noise_with(x0, eps, sched.alpha_bar(t))
}

fn noise_with(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    assert_eq!(x0.len(), eps.len());
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

/// One ancestral step from `t` to `t - 1`. `z` is ignored at `t = 1`.
pub fn reverse_step(x_t: &[f64], eps_hat: &[f64], t: usize, z: &[f64], sched: &NoiseSchedule) -> Vec<f64> {
    reverse_with(x_t, eps_hat, z, sched.alpha(t), sched.alpha_bar(t), if t == 1 { 0.0 } else { sched.sigma(t) })
}

fn reverse_with(x_t: &[f64], eps_hat: &[f64], z: &[f64], alpha: f64, alpha_bar: f64, sigma: f64) -> Vec<f64> {
    assert_eq!(x_t.len(), eps_hat.len());
    let inv = 1.0 / alpha.sqrt();
    let coef = (1.0 - alpha) / (1.0 - alpha_bar).sqrt();
    x_t.iter()
        .zip(eps_hat)
        .enumerate()
        .map(|(i, (x, e))| {
            let noise = if sigma == 0.0 { 0.0 } else { sigma * z[i] };
            inv * (x - coef * e) + noise
        })
        .collect()
}

/// Bound on the clean-sample estimate during sampling, in normalised units.
pub const X0_CLIP: f64 = 10.0;

/// Re-expresses `eps_hat` through a clamped clean-sample estimate
/// `x0 = (x_t - sqrt(1 - abar) eps) / sqrt(abar)`. Late steps of short
/// schedules have `alpha` near zero, where unclamped prediction errors are
/// amplified by `1 / sqrt(alpha)` at every step.
pub fn clip_eps(x_t: &[f64], eps_hat: &[f64], t: usize, sched: &NoiseSchedule, bound: f64) -> Vec<f64> {
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.iter()
        .zip(eps_hat)
        .map(|(x, e)| {
            let x0 = ((x - b * e) / a).clamp(-bound, bound);
            (x - a * x0) / b
        })
        .collect()
}

pub fn gaussian<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Per-coordinate affine normalisation of actions, fitted on training labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            mean: [0.0; 2],
            std: [1.0; 2],
        }
    }
}

impl Normalizer {
    pub fn fit<'a>(labels: impl IntoIterator<Item = &'a Trajectory>) -> Self {
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        let mut n = 0usize;
        for t in labels {
            for a in to_actions(t).actions {
                sum[0] += a.x;
                sum[1] += a.y;
                sq[0] += a.x * a.x;
                sq[1] += a.y * a.y;
                n += 1;
            }
        }
        if n == 0 {
            return Self::default();
        }
        let nf = n as f64;
        let mean = [sum[0] / nf, sum[1] / nf];
        let std = std::array::from_fn(|c| ((sq[c] / nf - mean[c] * mean[c]).max(0.0)).sqrt().max(1e-3));
        Self { mean, std }
    }

    pub fn normalize(&self, a: &ActionSequence) -> [f64; ACTION_DIM] {
        let mut v = a.to_flat();
        for (k, x) in v.iter_mut().enumerate() {
            *x = (*x - self.mean[k % 2]) / self.std[k % 2];
        }
        v
    }

    pub fn denormalize(&self, v: &[f64]) -> ActionSequence {
        let raw: Vec<f64> = v.iter().enumerate().map(|(k, x)| x * self.std[k % 2] + self.mean[k % 2]).collect();
        ActionSequence::from_flat(&raw)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[2, 2], vec![self.mean[0], self.mean[1], self.std[0], self.std[1]]).expect("2x2")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, PlanError> {
        if t.shape() != [2, 2] {
            return Err(PlanError::Format(format!("normaliser tensor has shape {:?}", t.shape())));
        }
        let d = t.data();
        Ok(Self {
            mean: [d[0], d[1]],
            std: [d[2], d[3]],
        })
    }
}

/// A conditional noise predictor: `x_t` is `[batch * 8, 2]`, `t` holds one
/// step per sample (or a single step shared by the batch), and the returned
/// pair is the predicted noise (same shape as `x_t`) and the `[batch, d]`
/// representation used for decorrelation.
pub trait NoisePredictor {
    fn predict(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_t: Var,
        t: &[usize],
        feat: &FeatureVars,
    ) -> Result<(Var, Var), PlanError>;
}

/// Output of the denoising loss on one batch.
#[derive(Debug, Clone, Copy)]
pub struct DiffLoss {
    pub loss: Var,
    pub repr: Var,
}

/// Denoising loss on a batch of normalised labels (`[batch * 8, 2]`): draw
/// noise and a uniform step per sample, noise the labels, predict the noise
/// and return its mean squared error.
#[allow(clippy::too_many_arguments)]
pub fn diff_loss<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    g: &mut Graph,
    store: &ParamStore,
    model: &P,
    labels: &Tensor,
    feat: &FeatureVars,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<DiffLoss, PlanError> {
    let batch = feat.batch;
    if labels.len() != batch * ACTION_DIM {
        return Err(PlanError::Grad(gradcore::GradError::ShapeMismatch(format!(
            "labels {:?} for batch {batch}",
            labels.shape()
        ))));
    }
    let eps = gaussian(batch * ACTION_DIM, rng);
    let steps: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=sched.steps())).collect();
    let mut x_t = Vec::with_capacity(batch * ACTION_DIM);
    for (b, &t) in steps.iter().enumerate() {
        let r = b * ACTION_DIM..(b + 1) * ACTION_DIM;
        x_t.extend(add_noise(&labels.data()[r.clone()], &eps[r], t, sched));
    }
    let x_t = g.constant(Tensor::new(&[batch * HORIZON, 2], x_t)?);
    let target = g.constant(Tensor::new(&[batch * HORIZON, 2], eps)?);
    let (pred, repr) = model.predict(g, store, x_t, &steps, feat)?;
    let loss = g.mse(pred, target)?;
    Ok(DiffLoss { loss, repr })
}

/// Draws `n` candidates for one sample by running the reverse chain from
/// `t = T` to 1. Candidate `i` owns the random stream `derive_seed(seed, i)`.
/// Returned actions are in the model's normalised space.
pub fn sample_normalized<P: NoisePredictor + ?Sized>(
    store: &ParamStore,
    model: &P,
    feat: &dyn Fn(&mut Graph) -> Result<FeatureVars, PlanError>,
    n: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<[f64; ACTION_DIM]>, PlanError> {
    let mut rngs: Vec<ChaCha8Rng> = (0..n as u64).map(|i| ChaCha8Rng::seed_from_u64(derive_seed(seed, i))).collect();
    let mut x: Vec<Vec<f64>> = rngs.iter_mut().map(|r| gaussian(ACTION_DIM, r)).collect();
    for t in (1..=sched.steps()).rev() {
        let mut g = Graph::new();
        let fv = feat(&mut g)?;
        let flat: Vec<f64> = x.iter().flatten().copied().collect();
        let xv = g.constant(Tensor::new(&[n * HORIZON, 2], flat)?);
        let (eps, _) = model.predict(&mut g, store, xv, &[t], &fv)?;
        let eps = g.value(eps).data();
        for (i, (xi, rng)) in x.iter_mut().zip(rngs.iter_mut()).enumerate() {
            // always consume the stream so that t = 1 behaves like any other step
            let z = gaussian(ACTION_DIM, rng);
            let e = clip_eps(xi, &eps[i * ACTION_DIM..(i + 1) * ACTION_DIM], t, sched, X0_CLIP);
            *xi = reverse_step(xi, &e, t, &z, sched);
        }
    }
    Ok(x.into_iter()
        .map(|v| v.try_into().expect("action length"))
        .collect())
}

/// Like [`sample_normalized`] but mapped back to metric actions.
pub fn sample_candidates<P: NoisePredictor + ?Sized>(
    store: &ParamStore,
    model: &P,
    feat: &dyn Fn(&mut Graph) -> Result<FeatureVars, PlanError>,
    n: usize,
    sched: &NoiseSchedule,
    norm: &Normalizer,
    seed: u64,
) -> Result<Vec<ActionSequence>, PlanError> {
    Ok(sample_normalized(store, model, feat, n, sched, seed)?
        .iter()
        .map(|v| norm.denormalize(v))
        .collect())
}

/// Empirical mean and variance of `add_noise` for a fixed `x0` and step.
pub fn noising_moments(x0: f64, t: usize, sched: &NoiseSchedule, samples: usize, seed: u64) -> (f64, f64) {
    let chunks = 16;
    let per = samples.div_ceil(chunks);
    let parts: Vec<(f64, f64, usize)> = (0..chunks as u64)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c));
            let (mut s, mut sq, mut n) = (0.0, 0.0, 0);
            let start = c as usize * per;
            for _ in start..(start + per).min(samples) {
                let e: f64 = rng.sample(StandardNormal);
                let v = add_noise(&[x0], &[e], t, sched)[0];
                s += v;
                sq += v * v;
                n += 1;
            }
            (s, sq, n)
        })
        .collect();
    let (s, sq, n) = parts.iter().fold((0.0, 0.0, 0), |a, p| (a.0 + p.0, a.1 + p.1, a.2 + p.2));
    let mean = s / n as f64;
    (mean, sq / n as f64 - mean * mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_schedule_endpoints() {
        let s = build_schedule(1000).unwrap();
        assert!((s.beta(1) - 1e-4).abs() < 1e-15);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_is_rejected() {
        assert!(matches!(build_schedule(0), Err(PlanError::InvalidT(0))));
    }

    #[test]
    fn alpha_bar_matches_direct_product() {
        let s = build_schedule(10).unwrap();
        let mut p = 1.0;
        for t in 1..=10 {
            // independent recomputation of beta from the endpoints
            let beta = (0.01 + (2.0 - 0.01) * (t - 1) as f64 / 9.0).min(0.999);
            p *= 1.0 - beta;
            assert!((s.alpha_bar(t) - p).abs() < 1e-12, "t={t}");
        }
        for t in 2..=10 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn noising_limits() {
        let x0 = [1.0, -2.0];
        let e = [0.5, 0.25];
        assert_eq!(noise_with(&x0, &e, 1.0), x0.to_vec());
        let s = build_schedule(10).unwrap();
        let a = s.alpha_bar(3).sqrt();
        assert_eq!(add_noise(&x0, &[0.0, 0.0], 3, &s), vec![a * 1.0, a * -2.0]);
        let b = (1.0 - s.alpha_bar(3)).sqrt();
        assert_eq!(add_noise(&[0.0, 0.0], &e, 3, &s), vec![b * 0.5, b * 0.25]);
    }

    #[test]
    fn reverse_step_limits() {
        let x = [1.0, 2.0];
        let e = [3.0, -1.0];
        assert_eq!(reverse_with(&x, &e, &[7.0, 7.0], 1.0, 0.5, 0.0), x.to_vec());
        let s = build_schedule(10).unwrap();
        let got = reverse_step(&x, &[0.0, 0.0], 1, &[9.0, 9.0], &s);
        let inv = 1.0 / s.alpha(1).sqrt();
        assert_eq!(got, vec![inv * 1.0, inv * 2.0]);
    }

    #[test]
    fn single_step_chain_recovers_x0_with_exact_noise() {
        let s = build_schedule(1).unwrap();
        let x0 = [0.3, -1.2, 2.5];
        let eps = [1.1, 0.4, -0.7];
        let xt = add_noise(&x0, &eps, 1, &s);
        let back = reverse_step(&xt, &eps, 1, &[0.0; 3], &s);
        // with abar_1 = alpha_1 the step is algebraically the inverse of noising
        for (b, x) in back.iter().zip(x0) {
            assert!((b - x).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_is_identity_inside_the_bound() {
        let s = build_schedule(10).unwrap();
        let x0 = [1.5, -2.0];
        let eps = [0.3, 0.8];
        for t in 1..=4 {
            let xt = add_noise(&x0, &eps, t, &s);
            let e = clip_eps(&xt, &eps, t, &s, X0_CLIP);
            for (a, b) in e.iter().zip(eps) {
                assert!((a - b).abs() < 1e-9, "t={t}");
            }
        }
        let xt = add_noise(&[50.0], &[0.0], 2, &s);
        let e = clip_eps(&xt, &[0.0], 2, &s, X0_CLIP);
        let back = (xt[0] - (1.0 - s.alpha_bar(2)).sqrt() * e[0]) / s.alpha_bar(2).sqrt();
        assert!((back - X0_CLIP).abs() < 1e-9);
    }

    #[test]
    fn normaliser_round_trip() {
        let t = Trajectory::from_fn(|k| crate::geometry::Vec2::new(2.0 * (k + 1) as f64, 0.1 * k as f64));
        let n = Normalizer::fit([&t]);
        let a = to_actions(&t);
        let back = n.denormalize(&n.normalize(&a));
        for (x, y) in back.to_flat().iter().zip(a.to_flat()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(Normalizer::from_tensor(&n.to_tensor()).unwrap(), n);
    }
}
