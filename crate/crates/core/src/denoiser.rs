//! Conditional noise predictor. Noisy action tokens are fused with the scene
//! tokens, the action-history embedding and the ego embedding, in that order,
//! by three pre-norm cross-attention blocks, then decoded back to actions.

use gradcore::nn::{CrossAttention, LayerNorm, Linear, Mlp};
use gradcore::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::diffusion::NoisePredictor;
use crate::featenc::{FeatureVars, NUM_SCENE_TOKENS};
use crate::trajspace::HORIZON;
use crate::PlanError;

/// Where the representation handed to the decorrelation loss is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReprTap {
    /// After the last fusion block, before the decoder.
    #[default]
    Outer,
    /// After the second fusion block.
    Inner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            width: 128,
            heads: 4,
            ffn_hidden: 256,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub norm_attn: LayerNorm,
    pub attn: CrossAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: Mlp,
}

impl FusionBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: DenoiserConfig, rng: &mut R) -> Result<Self, PlanError> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), cfg.width)?,
            attn: CrossAttention::new(store, &format!("{name}.attn"), cfg.width, cfg.heads, rng)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), cfg.width)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), cfg.width, cfg.ffn_hidden, cfg.width, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var, ctx: Var, lk: usize) -> Result<Var, PlanError> {
        let q = self.norm_attn.forward(g, store, h)?;
        let a = self.attn.forward(g, store, q, ctx, HORIZON, lk)?;
        let h = g.add(h, a)?;
        let f = self.norm_ffn.forward(g, store, h)?;
        let f = self.ffn.forward(g, store, f)?;
        Ok(g.add(h, f)?)
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub input: Linear,
    pub step_pos: ParamId,
    pub time_mlp: Mlp,
    pub blocks: Vec<FusionBlock>,
    pub norm_out: LayerNorm,
    pub head: Linear,
    pub tap: ReprTap,
}

/// Everything the forward pass exposes.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserOutput {
    /// `[batch * 8, 2]`
    pub eps_hat: Var,
    /// `[batch, width]`, mean over action tokens after the last block.
    pub m_outer: Var,
    /// `[batch, width]`, mean over action tokens after the second block.
    pub m_inner: Var,
}

/// Sinusoidal embedding of a diffusion step, `[t.len(), width]`.
pub fn time_embedding(t: &[usize], width: usize) -> Tensor {
    let half = width / 2;
    let mut data = vec![0.0; t.len() * width];
    for (r, &step) in t.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let a = step as f64 * freq;
            data[r * width + i] = a.sin();
            data[r * width + half + i] = a.cos();
        }
    }
    Tensor::new(&[t.len(), width], data).expect("time embedding shape")
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: DenoiserConfig,
        rng: &mut R,
    ) -> Result<Self, PlanError> {
        let d = cfg.width;
        let input = Linear::new(store, &format!("{prefix}input"), 2, d, rng)?;
        let step_pos = store.add(&format!("{prefix}step_pos"), Tensor::uniform(&[HORIZON, d], 0.1, rng))?;
        let time_mlp = Mlp::new(store, &format!("{prefix}time"), d, d, d, rng)?;
        let blocks = (0..3)
            .map(|i| FusionBlock::new(store, &format!("{prefix}block{i}"), cfg, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let norm_out = LayerNorm::new(store, &format!("{prefix}norm_out"), d)?;
        let head = Linear::new(store, &format!("{prefix}head"), d, 2, rng)?;
        Ok(Self {
            cfg,
            input,
            step_pos,
            time_mlp,
            blocks,
            norm_out,
            head,
            tap: ReprTap::Outer,
        })
    }

    /// `x_t` is `[batch * 8, 2]`; `t` has one entry per sample or a single
    /// entry shared by all. Features may carry one sample for the whole batch.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_t: Var,
        t: &[usize],
        feat: &FeatureVars,
    ) -> Result<DenoiserOutput, PlanError> {
        let rows = g.value(x_t).rows();
        if rows % HORIZON != 0 || g.value(x_t).cols() != 2 {
            return Err(shape("noisy actions", g.value(x_t).shape()));
        }
        let batch = rows / HORIZON;
        if feat.batch != batch && feat.batch != 1 {
            return Err(shape("feature batch", &[feat.batch, batch]));
        }
        if t.len() != batch && t.len() != 1 {
            return Err(shape("step batch", &[t.len(), batch]));
        }

        let h = self.input.forward(g, store, x_t)?;
        let pos = g.param(store, self.step_pos);
        let h = g.add_tiled(h, pos)?;
        let temb = g.constant(time_embedding(t, self.cfg.width));
        let temb = self.time_mlp.forward(g, store, temb)?;
        let mut h = if t.len() == 1 {
            g.add_tiled(h, temb)?
        } else {
            g.add_repeated(h, temb, HORIZON)?
        };

        let contexts = [
            (feat.scene_tokens, NUM_SCENE_TOKENS),
            (feat.emb_action, 1),
            (feat.emb_ego, 1),
        ];
        let mut m_inner = None;
        for (i, (block, (ctx, lk))) in self.blocks.iter().zip(contexts).enumerate() {
            h = block.forward(g, store, h, ctx, lk)?;
            if i == 1 {
                m_inner = Some(g.group_mean(h, HORIZON)?);
            }
        }
        let m_outer = g.group_mean(h, HORIZON)?;
        let out = self.norm_out.forward(g, store, h)?;
        let eps_hat = self.head.forward(g, store, out)?;
        Ok(DenoiserOutput {
            eps_hat,
            m_outer,
            m_inner: m_inner.expect("three blocks"),
        })
    }
}

fn shape(what: &str, s: &[usize]) -> PlanError {
    PlanError::Grad(gradcore::GradError::ShapeMismatch(format!("{what}: {s:?}")))
}

impl NoisePredictor for Denoiser {
    fn predict(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_t: Var,
        t: &[usize],
        feat: &FeatureVars,
    ) -> Result<(Var, Var), PlanError> {
        let out = self.forward(g, store, x_t, t, feat)?;
        let m = match self.tap {
            ReprTap::Outer => out.m_outer,
            ReprTap::Inner => out.m_inner,
        };
        Ok((out.eps_hat, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SMALL: DenoiserConfig = DenoiserConfig {
        width: 16,
        heads: 2,
        ffn_hidden: 32,
    };

    fn setup(seed: u64) -> (ParamStore, Denoiser, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = Denoiser::new(&mut store, "d.", SMALL, &mut rng).unwrap();
        (store, d, rng)
    }

    fn features(g: &mut Graph, batch: usize, rng: &mut ChaCha8Rng) -> FeatureVars {
        let w = SMALL.width;
        FeatureVars {
            batch,
            scene_tokens: g.constant(Tensor::uniform(&[batch * NUM_SCENE_TOKENS, w], 1.0, rng)),
            emb_action: g.constant(Tensor::uniform(&[batch, w], 1.0, rng)),
            emb_ego: g.constant(Tensor::uniform(&[batch, w], 1.0, rng)),
        }
    }

    #[test]
    fn output_shapes() {
        let (store, d, mut rng) = setup(1);
        let mut g = Graph::new();
        let feat = features(&mut g, 3, &mut rng);
        let x = g.constant(Tensor::uniform(&[3 * HORIZON, 2], 1.0, &mut rng));
        let out = d.forward(&mut g, &store, x, &[1, 5, 10], &feat).unwrap();
        assert_eq!(g.value(out.eps_hat).shape(), &[24, 2]);
        assert_eq!(g.value(out.m_outer).shape(), &[3, 16]);
        assert_eq!(g.value(out.m_inner).shape(), &[3, 16]);
    }

    #[test]
    fn samples_do_not_interact() {
        let (store, d, mut rng) = setup(2);
        let x1 = Tensor::uniform(&[HORIZON, 2], 1.0, &mut rng);
        let others = Tensor::uniform(&[3 * HORIZON, 2], 1.0, &mut rng);
        let mut g = Graph::new();
        let feat = features(&mut g, 1, &mut rng);
        let xv = g.constant(x1.clone());
        let single = d.forward(&mut g, &store, xv, &[4], &feat).unwrap();
        let mut stacked = x1.data().to_vec();
        stacked.extend_from_slice(others.data());
        let xs = g.constant(Tensor::new(&[4 * HORIZON, 2], stacked).unwrap());
        let batch = d.forward(&mut g, &store, xs, &[4], &feat).unwrap();
        let a = g.value(single.eps_hat).data();
        let b = &g.value(batch.eps_hat).data()[..2 * HORIZON];
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_network_outputs_the_head_bias() {
        let (mut store, d, mut rng) = setup(3);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            store.value_mut(id).data_mut().fill(0.0);
        }
        store.value_mut(d.head.bias).data_mut().copy_from_slice(&[0.25, -1.5]);
        let mut g = Graph::new();
        let feat = features(&mut g, 2, &mut rng);
        let x = g.constant(Tensor::uniform(&[2 * HORIZON, 2], 3.0, &mut rng));
        let out = d.forward(&mut g, &store, x, &[2, 7], &feat).unwrap();
        for row in g.value(out.eps_hat).data().chunks(2) {
            assert_eq!(row, &[0.25, -1.5]);
        }
    }

    #[test]
    fn tap_changes_only_the_representation() {
        let (store, mut d, mut rng) = setup(4);
        let mut g = Graph::new();
        let feat = features(&mut g, 2, &mut rng);
        let x = g.constant(Tensor::uniform(&[2 * HORIZON, 2], 1.0, &mut rng));
        let (e_out, m_out) = d.predict(&mut g, &store, x, &[3, 3], &feat).unwrap();
        d.tap = ReprTap::Inner;
        let (e_in, m_in) = d.predict(&mut g, &store, x, &[3, 3], &feat).unwrap();
        assert_eq!(g.value(e_out), g.value(e_in));
        assert!(g.value(m_out).max_abs_diff(g.value(m_in)) > 1e-6);
    }

    #[test]
    fn step_embedding_matters() {
        let (store, d, mut rng) = setup(5);
        let mut g = Graph::new();
        let feat = features(&mut g, 1, &mut rng);
        let x = g.constant(Tensor::uniform(&[HORIZON, 2], 1.0, &mut rng));
        let a = d.forward(&mut g, &store, x, &[1], &feat).unwrap().eps_hat;
        let b = d.forward(&mut g, &store, x, &[9], &feat).unwrap().eps_hat;
        assert!(g.value(a).max_abs_diff(g.value(b)) > 1e-6);
    }

    #[test]
    fn mismatched_batches_are_rejected() {
        let (store, d, mut rng) = setup(6);
        let mut g = Graph::new();
        let feat = features(&mut g, 2, &mut rng);
        let x = g.constant(Tensor::zeros(&[3 * HORIZON, 2]));
        assert!(d.forward(&mut g, &store, x, &[1], &feat).is_err());
        let x = g.constant(Tensor::zeros(&[2 * HORIZON, 2]));
        assert!(d.forward(&mut g, &store, x, &[1, 2, 3], &feat).is_err());
    }
}
