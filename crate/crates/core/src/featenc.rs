//! Conditioning features: a fixed bird's-eye-view rasteriser plus trainable
//! scene, action-history and ego-status encoders.

use gradcore::nn::{Linear, Mlp};
use gradcore::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rayon::prelude::*;

use crate::geometry::{Grid, BEV_WINDOW};
use crate::scenesim::{point_in_drivable, EgoStatus, EpisodeRecord, SceneSpec, HISTORY_LEN};
use crate::PlanError;

pub const RASTER_N: usize = 32;
pub const RASTER_CHANNELS: usize = 3;
pub const PATCH: usize = 8;
pub const PATCHES_PER_SIDE: usize = RASTER_N / PATCH;
pub const NUM_SCENE_TOKENS: usize = PATCHES_PER_SIDE * PATCHES_PER_SIDE;
pub const PATCH_LEN: usize = PATCH * PATCH * RASTER_CHANNELS;
pub const HISTORY_FEATURES: usize = 2 * HISTORY_LEN;
pub const EGO_FEATURES: usize = 5;
pub const DEFAULT_WIDTH: usize = 128;

pub const RASTER_GRID: Grid = Grid {
    window: BEV_WINDOW,
    n: RASTER_N,
};

/// Speed that maps to a flow value of 1.
const FLOW_SCALE: f64 = 20.0;
const HISTORY_SCALE: f64 = 10.0;
const SPEED_SCALE: f64 = 10.0;
const ACCEL_SCALE: f64 = 2.0;

pub const CH_DRIVABLE: usize = 0;
pub const CH_OCCUPANCY: usize = 1;
pub const CH_FLOW: usize = 2;

/// `RASTER_N x RASTER_N x 3` grid, stored cell-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRaster {
    data: Vec<f64>,
}

impl SceneRaster {
    pub fn zeros() -> Self {
        Self {
            data: vec![0.0; RASTER_N * RASTER_N * RASTER_CHANNELS],
        }
    }

    fn offset(i: usize, j: usize, c: usize) -> usize {
        (i * RASTER_N + j) * RASTER_CHANNELS + c
    }

    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[Self::offset(i, j, c)]
    }

    pub fn set(&mut self, i: usize, j: usize, c: usize, v: f64) {
        self.data[Self::offset(i, j, c)] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Patch `p` (row-major over the 4x4 patch grid) flattened as `[di][dj][c]`.
    pub fn patch(&self, p: usize) -> Vec<f64> {
        let (pi, pj) = (p / PATCHES_PER_SIDE, p % PATCHES_PER_SIDE);
        let mut out = Vec::with_capacity(PATCH_LEN);
        for di in 0..PATCH {
            let start = Self::offset(pi * PATCH + di, pj * PATCH, 0);
            out.extend_from_slice(&self.data[start..start + PATCH * RASTER_CHANNELS]);
        }
        out
    }

    pub fn patches(&self) -> Vec<f64> {
        (0..NUM_SCENE_TOKENS).flat_map(|p| self.patch(p)).collect()
    }
}

pub fn rasterize(scene: &SceneSpec) -> SceneRaster {
    let mut r = SceneRaster::zeros();
    let rects: Vec<_> = scene.obstacles.iter().map(|o| (o.rect_at(0.0), o.velocity.norm())).collect();
    for i in 0..RASTER_N {
        for j in 0..RASTER_N {
            let c = RASTER_GRID.center(i, j);
            if point_in_drivable(scene, c) {
                r.set(i, j, CH_DRIVABLE, 1.0);
            }
            for (rect, speed) in &rects {
                if rect.contains(c) {
                    r.set(i, j, CH_OCCUPANCY, 1.0);
                    let flow = (speed / FLOW_SCALE).min(1.0);
                    if flow > r.get(i, j, CH_FLOW) {
                        r.set(i, j, CH_FLOW, flow);
                    }
                }
            }
        }
    }
    r
}

pub fn history_features(history: &[crate::geometry::Vec2; HISTORY_LEN]) -> [f64; HISTORY_FEATURES] {
    let mut out = [0.0; HISTORY_FEATURES];
    for (k, p) in history.iter().enumerate() {
        out[2 * k] = p.x / HISTORY_SCALE;
        out[2 * k + 1] = p.y / HISTORY_SCALE;
    }
    out
}

pub fn ego_features(ego: &EgoStatus) -> [f64; EGO_FEATURES] {
    let c = ego.command.one_hot();
    [ego.velocity / SPEED_SCALE, ego.acceleration / ACCEL_SCALE, c[0], c[1], c[2]]
}

/// Parameter-free encoder inputs for a batch of episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInputs {
    pub batch: usize,
    /// `[batch * 16, 192]`
    pub patches: Tensor,
    /// `[batch, 8]`
    pub history: Tensor,
    /// `[batch, 5]`
    pub ego: Tensor,
}

impl EncoderInputs {
    pub fn from_records(records: &[&EpisodeRecord]) -> Self {
        let rasters: Vec<SceneRaster> = records.par_iter().map(|r| rasterize(&r.scene)).collect();
        let parts: Vec<_> = records.iter().map(|r| (r.history, r.ego)).collect();
        Self::from_parts(&rasters, &parts)
    }

    pub fn from_parts(rasters: &[SceneRaster], motion: &[([crate::geometry::Vec2; HISTORY_LEN], EgoStatus)]) -> Self {
        assert_eq!(rasters.len(), motion.len());
        let b = rasters.len();
        let patches = rasters.iter().flat_map(|r| r.patches()).collect();
        let history = motion.iter().flat_map(|(h, _)| history_features(h)).collect();
        let ego = motion.iter().flat_map(|(_, e)| ego_features(e)).collect();
        Self {
            batch: b,
            patches: Tensor::new(&[b * NUM_SCENE_TOKENS, PATCH_LEN], patches).expect("patch shape"),
            history: Tensor::new(&[b, HISTORY_FEATURES], history).expect("history shape"),
            ego: Tensor::new(&[b, EGO_FEATURES], ego).expect("ego shape"),
        }
    }

    /// Row subset, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let pick = |t: &Tensor, group: usize| {
            let c = t.cols();
            let mut data = Vec::with_capacity(rows.len() * group * c);
            for &r in rows {
                data.extend_from_slice(&t.data()[r * group * c..(r + 1) * group * c]);
            }
            Tensor::new(&[rows.len() * group, c], data).expect("subset shape")
        };
        Self {
            batch: rows.len(),
            patches: pick(&self.patches, NUM_SCENE_TOKENS),
            history: pick(&self.history, 1),
            ego: pick(&self.ego, 1),
        }
    }
}

/// The conditioning feature group as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct FeatureVars {
    pub batch: usize,
    /// `[batch * 16, width]`
    pub scene_tokens: Var,
    /// `[batch, width]`
    pub emb_action: Var,
    /// `[batch, width]`
    pub emb_ego: Var,
}

/// Evaluated feature group for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGroup {
    pub scene_tokens: Tensor,
    pub emb_action: Tensor,
    pub emb_ego: Tensor,
}

impl FeatureGroup {
    pub fn is_finite(&self) -> bool {
        self.scene_tokens.is_finite() && self.emb_action.is_finite() && self.emb_ego.is_finite()
    }
}

#[derive(Debug, Clone)]
pub struct FeatureEncoder {
    pub width: usize,
    pub patch_proj: Linear,
    pub scene_pos: ParamId,
    pub action: Mlp,
    pub ego: Mlp,
}

impl FeatureEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut R) -> Result<Self, PlanError> {
        let patch_proj = Linear::new(store, &format!("{prefix}scene.proj"), PATCH_LEN, width, rng)?;
        let scene_pos = store.add(
            &format!("{prefix}scene.pos"),
            Tensor::uniform(&[NUM_SCENE_TOKENS, width], 0.1, rng),
        )?;
        let action = Mlp::new(store, &format!("{prefix}action"), HISTORY_FEATURES, width, width, rng)?;
        let ego = Mlp::new(store, &format!("{prefix}ego"), EGO_FEATURES, width, width, rng)?;
        Ok(Self {
            width,
            patch_proj,
            scene_pos,
            action,
            ego,
        })
    }

    pub fn encode_scene(&self, g: &mut Graph, store: &ParamStore, patches: Var) -> Result<Var, PlanError> {
        let t = self.patch_proj.forward(g, store, patches)?;
        let pos = g.param(store, self.scene_pos);
        Ok(g.add_tiled(t, pos)?)
    }

    pub fn encode_action_history(&self, g: &mut Graph, store: &ParamStore, history: Var) -> Result<Var, PlanError> {
        Ok(self.action.forward(g, store, history)?)
    }

    pub fn encode_ego(&self, g: &mut Graph, store: &ParamStore, ego: Var) -> Result<Var, PlanError> {
        Ok(self.ego.forward(g, store, ego)?)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: &EncoderInputs) -> Result<FeatureVars, PlanError> {
        let patches = g.constant(inputs.patches.clone());
        let history = g.constant(inputs.history.clone());
        let ego = g.constant(inputs.ego.clone());
        Ok(FeatureVars {
            batch: inputs.batch,
            scene_tokens: self.encode_scene(g, store, patches)?,
            emb_action: self.encode_action_history(g, store, history)?,
            emb_ego: self.encode_ego(g, store, ego)?,
        })
    }

    /// Evaluates the feature group of every sample in `inputs`.
    pub fn feature_groups(&self, store: &ParamStore, inputs: &EncoderInputs) -> Result<Vec<FeatureGroup>, PlanError> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, store, inputs)?;
        let d = self.width;
        let (s, a, e) = (g.value(f.scene_tokens), g.value(f.emb_action), g.value(f.emb_ego));
        Ok((0..inputs.batch)
            .map(|b| FeatureGroup {
                scene_tokens: Tensor::new(
                    &[NUM_SCENE_TOKENS, d],
                    s.data()[b * NUM_SCENE_TOKENS * d..(b + 1) * NUM_SCENE_TOKENS * d].to_vec(),
                )
                .expect("token shape"),
                emb_action: Tensor::new(&[1, d], a.row(b).to_vec()).expect("row shape"),
                emb_ego: Tensor::new(&[1, d], e.row(b).to_vec()).expect("row shape"),
            })
            .collect())
    }
}
