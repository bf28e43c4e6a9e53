//! Candidate filtering, PDM-style scoring and the mode-diversity metric.

use std::fmt::Write as _;

use serde::Serialize;

use crate::geometry::{menger_curvature, wrap_angle, Grid, Vec2, BEV_WINDOW};
use crate::scenesim::{collision_at, EGO_HALF_LENGTH, EGO_HALF_WIDTH, ego_footprint, expert_trajectory, point_in_drivable, EgoStatus, Pose, SceneSpec};
use crate::trajspace::{Trajectory, HORIZON, STEP_DT};

pub const TTC_THRESHOLD: f64 = 0.95;
pub const TTC_RESOLUTION: f64 = 0.1;
pub const COMFORT_MAX_ACCEL: f64 = 3.0;
pub const COMFORT_MAX_JERK: f64 = 5.0;
pub const COMFORT_MAX_YAW_RATE: f64 = 0.6;
/// Expert progress below which every candidate is granted full progress.
pub const MIN_REFERENCE_PROGRESS: f64 = 1.0;

pub const FEASIBLE_MAX_STEP: f64 = 12.0;
pub const FEASIBLE_MAX_ACCEL: f64 = 8.0;
pub const FEASIBLE_MAX_CURVATURE: f64 = 0.3;
/// Segments shorter than this carry no reliable heading.
const MIN_HEADING_SEGMENT: f64 = 0.25;
const MIN_CURVATURE_SEGMENT: f64 = 0.5;

/// 0.2 m cells over the bird's-eye-view window.
pub const SWEEP_GRID: Grid = Grid {
    window: BEV_WINDOW,
    n: 320,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubScores {
    pub nc: f64,
    pub dac: f64,
    pub ep: f64,
    pub ttc: f64,
    pub comfort: f64,
    /// Driving-direction compliance is exempt and always 1.
    pub ddc: f64,
}

impl SubScores {
    pub fn is_perfect(&self) -> bool {
        self.nc == 1.0 && self.dac == 1.0 && self.ep == 1.0 && self.ttc == 1.0 && self.comfort == 1.0
    }
}

pub fn pdm_score(s: &SubScores) -> f64 {
    s.nc * s.dac * s.ttc * (5.0 * s.ddc + 2.0 * s.comfort + 5.0 * s.ep) / 12.0
}

/// Set of occupied cells on [`SWEEP_GRID`], stored as a bitset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterSet {
    bits: Vec<u64>,
}

impl Default for RasterSet {
    fn default() -> Self {
        Self::empty()
    }
}

impl RasterSet {
    const CELLS: usize = 320 * 320;

    pub fn empty() -> Self {
        Self {
            bits: vec![0; Self::CELLS.div_ceil(64)],
        }
    }

    pub fn from_cells(cells: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::empty();
        for c in cells {
            s.insert(c);
        }
        s
    }

    pub fn insert(&mut self, cell: usize) {
        self.bits[cell / 64] |= 1 << (cell % 64);
    }

    pub fn contains(&self, cell: usize) -> bool {
        self.bits[cell / 64] & (1 << (cell % 64)) != 0
    }

    pub fn len(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&w| w == 0)
    }

    pub fn union_with(&mut self, other: &RasterSet) {
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    pub fn intersection_len(&self, other: &RasterSet) -> usize {
        self.bits.iter().zip(&other.bits).map(|(a, b)| (a & b).count_ones() as usize).sum()
    }

    pub fn union_len(&self, other: &RasterSet) -> usize {
        self.bits.iter().zip(&other.bits).map(|(a, b)| (a | b).count_ones() as usize).sum()
    }

    pub fn is_subset(&self, other: &RasterSet) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| a & !b == 0)
    }

    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().flat_map(|(w, &word)| {
            (0..64).filter(move |b| word & (1 << b) != 0).map(move |b| w * 64 + b)
        })
    }
}

fn cell_index(i: usize, j: usize) -> usize {
    i * SWEEP_GRID.n + j
}

fn cell_center(cell: usize) -> Vec2 {
    SWEEP_GRID.center(cell / SWEEP_GRID.n, cell % SWEEP_GRID.n)
}

/// Heading of each segment of `pts`, carrying the previous heading across
/// segments too short to define one. The ego starts at heading zero.
fn segment_headings(pts: &[Vec2]) -> Vec<f64> {
    let mut prev = 0.0;
    pts.windows(2)
        .map(|w| {
            let d = w[1] - w[0];
            if d.norm() >= 1e-6 {
                prev = d.angle();
            }
            prev
        })
        .collect()
}

/// Ego pose at each waypoint, heading taken from the incoming segment.
pub fn waypoint_poses(traj: &Trajectory) -> [Pose; HORIZON] {
    let pts = traj.with_origin();
    let h = segment_headings(&pts);
    std::array::from_fn(|k| Pose {
        position: pts[k + 1],
        heading: h[k],
    })
}

/// Cells whose centres are covered by the ego footprint swept along the
/// trajectory (origin included), sampled every 0.1 m.
pub fn swept_footprint(traj: &Trajectory) -> RasterSet {
    let pts = traj.with_origin();
    let headings = segment_headings(&pts);
    let mut set = RasterSet::empty();
    let mut stamp = |pose: Pose| {
        let rect = ego_footprint(pose);
        let (lo, hi) = rect.bounding_box();
        if let Some((ri, rj)) = SWEEP_GRID.cell_range(lo, hi) {
            for i in ri {
                for j in rj.clone() {
                    if rect.contains(SWEEP_GRID.center(i, j)) {
                        set.insert(cell_index(i, j));
                    }
                }
            }
        }
    };
    stamp(Pose {
        position: Vec2::ZERO,
        heading: 0.0,
    });
    // poses farther than this outside the grid cannot cover any cell centre
    let reach = EGO_HALF_LENGTH.hypot(EGO_HALF_WIDTH);
    let w = SWEEP_GRID.window;
    let lo = Vec2::new(w.x_min - reach, w.y_min - reach);
    let hi = Vec2::new(w.x_max() + reach, w.y_max() + reach);
    for (k, seg) in pts.windows(2).enumerate() {
        let d = seg[1] - seg[0];
        let Some((u0, u1)) = clip_segment(seg[0], d, lo, hi) else {
            continue;
        };
        let n = (d.norm() * (u1 - u0) / 0.1).ceil().max(1.0) as usize;
        for s in 0..=n {
            let u = u0 + (u1 - u0) * (s as f64 / n as f64);
            if s == 0 && u == 0.0 {
                continue;
            }
            stamp(Pose {
                position: seg[0] + d * u,
                heading: headings[k],
            });
        }
    }
    set
}

/// Parameter interval of `a + u * d`, `u` in `[0, 1]`, inside the box `[lo, hi]`.
fn clip_segment(a: Vec2, d: Vec2, lo: Vec2, hi: Vec2) -> Option<(f64, f64)> {
    if !a.is_finite() || !d.is_finite() {
        return None;
    }
    let (mut u0, mut u1) = (0.0f64, 1.0f64);
    for (p, dp, l, h) in [(a.x, d.x, lo.x, hi.x), (a.y, d.y, lo.y, hi.y)] {
        if dp == 0.0 {
            if p < l || p > h {
                return None;
            }
            continue;
        }
        let (ta, tb) = ((l - p) / dp, (h - p) / dp);
        u0 = u0.max(ta.min(tb));
        u1 = u1.min(ta.max(tb));
    }
    (u0 <= u1).then_some((u0, u1))
}

/// Per-scene scoring state: reference progress and an optional drivable mask.
pub struct ScoringContext<'a> {
    scene: &'a SceneSpec,
    reference_progress: f64,
    drivable: Option<RasterSet>,
}

impl<'a> ScoringContext<'a> {
    /// Uses the expert controller's trajectory as the progress reference.
    pub fn new(scene: &'a SceneSpec, ego: &EgoStatus) -> Self {
        let reference_progress = match expert_trajectory(scene, ego) {
            Ok(t) => progress(scene, &t),
            Err(_) => scene.speed_limit * HORIZON as f64 * STEP_DT,
        };
        Self {
            scene,
            reference_progress,
            drivable: None,
        }
    }

    pub fn with_reference(scene: &'a SceneSpec, reference: &Trajectory) -> Self {
        Self {
            scene,
            reference_progress: progress(scene, reference),
            drivable: None,
        }
    }

    /// Precomputes drivability of every sweep cell; worthwhile when scoring many candidates.
    pub fn with_drivable_mask(mut self) -> Self {
        let mut mask = RasterSet::empty();
        for i in 0..SWEEP_GRID.n {
            for j in 0..SWEEP_GRID.n {
                if point_in_drivable(self.scene, SWEEP_GRID.center(i, j)) {
                    mask.insert(cell_index(i, j));
                }
            }
        }
        self.drivable = Some(mask);
        self
    }

    pub fn reference_progress(&self) -> f64 {
        self.reference_progress
    }

    pub fn score(&self, traj: &Trajectory) -> SubScores {
        let scene = self.scene;
        let poses = waypoint_poses(traj);
        let nc = poses
            .iter()
            .enumerate()
            .all(|(k, p)| !collision_at(scene, *p, (k + 1) as f64 * STEP_DT));
        let swept = swept_footprint(traj);
        let dac = match &self.drivable {
            Some(mask) => swept.is_subset(mask),
            None => swept.cells().all(|c| point_in_drivable(scene, cell_center(c))),
        };
        let ep = if self.reference_progress < MIN_REFERENCE_PROGRESS {
            1.0
        } else {
            (progress(scene, traj) / self.reference_progress).clamp(0.0, 1.0)
        };
        SubScores {
            nc: f64::from(u8::from(nc)),
            dac: f64::from(u8::from(dac)),
            ep,
            ttc: f64::from(u8::from(ttc_ok(scene, traj))),
            comfort: f64::from(u8::from(comfort_ok(traj))),
            ddc: 1.0,
        }
    }
}

/// Arc-length progress of the final waypoint along the route, never negative.
pub fn progress(scene: &SceneSpec, traj: &Trajectory) -> f64 {
    scene.centerline.project(traj.final_point()).s.max(0.0)
}

pub fn sub_scores(traj: &Trajectory, scene: &SceneSpec, ego: &EgoStatus) -> SubScores {
    ScoringContext::new(scene, ego).score(traj)
}

pub fn sub_scores_with_reference(traj: &Trajectory, scene: &SceneSpec, reference: &Trajectory) -> SubScores {
    ScoringContext::with_reference(scene, reference).score(traj)
}

/// No overlap within `TTC_THRESHOLD` seconds when the ego is extrapolated at
/// constant velocity from every point of its trajectory (0.1 s grid).
pub fn ttc_ok(scene: &SceneSpec, traj: &Trajectory) -> bool {
    if scene.obstacles.is_empty() {
        return true;
    }
    let pts = traj.with_origin();
    let headings = segment_headings(&pts);
    let horizon = HORIZON as f64 * STEP_DT;
    let n_t = (horizon / TTC_RESOLUTION).round() as usize;
    let n_look = (TTC_THRESHOLD / TTC_RESOLUTION).ceil() as usize;
    for i in 0..=n_t {
        let t = i as f64 * TTC_RESOLUTION;
        let k = ((t / STEP_DT).floor() as usize).min(HORIZON - 1);
        let u = (t - k as f64 * STEP_DT) / STEP_DT;
        let seg = pts[k + 1] - pts[k];
        let pos = pts[k] + seg * u;
        let vel = seg * (1.0 / STEP_DT);
        for j in 0..n_look {
            let dt = j as f64 * TTC_RESOLUTION;
            let pose = Pose {
                position: pos + vel * dt,
                heading: headings[k],
            };
            if collision_at(scene, pose, t + dt) {
                return false;
            }
        }
    }
    true
}

fn finite_differences(traj: &Trajectory) -> (Vec<Vec2>, Vec<Vec2>, Vec<Vec2>) {
    let pts = traj.with_origin();
    let vel: Vec<Vec2> = pts.windows(2).map(|w| (w[1] - w[0]) * (1.0 / STEP_DT)).collect();
    let acc: Vec<Vec2> = vel.windows(2).map(|w| (w[1] - w[0]) * (1.0 / STEP_DT)).collect();
    let jerk: Vec<Vec2> = acc.windows(2).map(|w| (w[1] - w[0]) * (1.0 / STEP_DT)).collect();
    (vel, acc, jerk)
}

pub fn comfort_ok(traj: &Trajectory) -> bool {
    let (vel, acc, jerk) = finite_differences(traj);
    if acc.iter().any(|a| a.norm() > COMFORT_MAX_ACCEL) || jerk.iter().any(|j| j.norm() > COMFORT_MAX_JERK) {
        return false;
    }
    let mut last: Option<f64> = None;
    for v in &vel {
        if v.norm() * STEP_DT < MIN_HEADING_SEGMENT {
            last = None;
            continue;
        }
        let h = v.angle();
        if let Some(prev) = last {
            if (wrap_angle(h - prev) / STEP_DT).abs() > COMFORT_MAX_YAW_RATE {
                return false;
            }
        }
        last = Some(h);
    }
    true
}

/// Sum of amounts by which the kinematic feasibility bounds and the window
/// are exceeded; zero means feasible.
pub fn feasibility_violation(traj: &Trajectory) -> f64 {
    let pts = traj.with_origin();
    let (_, acc, _) = finite_differences(traj);
    let mut total = 0.0;
    for w in pts.windows(2) {
        total += ((w[1] - w[0]).norm() - FEASIBLE_MAX_STEP).max(0.0);
    }
    for a in &acc {
        total += (a.norm() - FEASIBLE_MAX_ACCEL).max(0.0);
    }
    for w in pts.windows(3) {
        if (w[1] - w[0]).norm() >= MIN_CURVATURE_SEGMENT && (w[2] - w[1]).norm() >= MIN_CURVATURE_SEGMENT {
            total += (menger_curvature(w[0], w[1], w[2]) - FEASIBLE_MAX_CURVATURE).max(0.0);
        }
    }
    for p in &traj.waypoints {
        total += BEV_WINDOW.excess(*p);
    }
    total
}

/// Indices of feasible candidates; when none is feasible, the single least
/// violating one (lowest index on ties).
pub fn rejection_filter(cands: &[Trajectory]) -> Vec<usize> {
    assert!(!cands.is_empty(), "rejection_filter needs at least one candidate");
    let violations: Vec<f64> = cands.iter().map(feasibility_violation).collect();
    let feasible: Vec<usize> = (0..cands.len()).filter(|&i| violations[i] == 0.0).collect();
    if !feasible.is_empty() {
        return feasible;
    }
    let best = (0..cands.len())
        .min_by(|&a, &b| violations[a].total_cmp(&violations[b]).then(a.cmp(&b)))
        .expect("non-empty");
    vec![best]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    /// Position within the survivor list.
    pub index: usize,
    pub scores: SubScores,
    pub pdms: f64,
}

/// Highest PDMS; ties go to higher EP, then the lower index.
pub fn select_top1(survivors: &[Trajectory], ctx: &ScoringContext<'_>) -> Selection {
    assert!(!survivors.is_empty(), "select_top1 needs at least one survivor");
    let scored: Vec<(SubScores, f64)> = survivors
        .iter()
        .map(|t| {
            let s = ctx.score(t);
            (s, pdm_score(&s))
        })
        .collect();
    select_by_scores(&scored)
}

/// Argmax over precomputed `(sub-scores, pdms)` pairs with the same tie rules.
pub fn select_by_scores(scored: &[(SubScores, f64)]) -> Selection {
    let mut best = 0;
    for i in 1..scored.len() {
        let (s, p) = &scored[i];
        let (bs, bp) = &scored[best];
        if *p > *bp || (*p == *bp && s.ep > bs.ep) {
            best = i;
        }
    }
    Selection {
        index: best,
        scores: scored[best].0,
        pdms: scored[best].1,
    }
}

/// One minus the mean IoU between each raster set and the union of all sets.
pub fn diversity(sets: &[RasterSet]) -> f64 {
    assert!(!sets.is_empty(), "diversity needs at least one candidate");
    let mut union = RasterSet::empty();
    for s in sets {
        union.union_with(s);
    }
    let mean_iou = sets
        .iter()
        .map(|s| {
            let u = s.union_len(&union);
            if u == 0 {
                1.0
            } else {
                s.intersection_len(&union) as f64 / u as f64
            }
        })
        .sum::<f64>()
        / sets.len() as f64;
    1.0 - mean_iou
}

pub fn trajectory_diversity(cands: &[Trajectory]) -> f64 {
    let sets: Vec<RasterSet> = cands.iter().map(swept_footprint).collect();
    diversity(&sets)
}

/// Straight-ahead extrapolation of the current ego speed.
pub fn constant_velocity(ego: &EgoStatus) -> Trajectory {
    Trajectory::from_fn(|k| Vec2::new(ego.velocity * STEP_DT * (k + 1) as f64, 0.0))
}

/// One CSV row of evaluation output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub scores: SubScores,
    pub pdms: f64,
    pub diversity: f64,
    pub n_surviving: usize,
}

pub const METRICS_HEADER: &str = "sample_id,NC,DAC,EP,TTC,Comfort,PDMS,D,N_surviving";

/// Per-sample rows followed by a `mean` summary row.
pub fn metrics_csv(rows: &[SampleMetrics]) -> String {
    let mut out = String::new();
    out.push_str(METRICS_HEADER);
    out.push('\n');
    let fmt = |out: &mut String, id: &str, s: &SubScores, pdms: f64, d: f64, n: f64| {
        let _ = writeln!(
            out,
            "{id},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            s.nc,
            s.dac,
            s.ep,
            s.ttc,
            s.comfort,
            pdms,
            d,
            if n.fract() == 0.0 { format!("{n:.0}") } else { format!("{n:.3}") }
        );
    };
    for r in rows {
        fmt(&mut out, &r.sample_id, &r.scores, r.pdms, r.diversity, r.n_surviving as f64);
    }
    let s = summarize(rows);
    fmt(&mut out, "mean", &s.scores, s.pdms, s.diversity, s.n_surviving);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSummary {
    pub scores: SubScores,
    pub pdms: f64,
    pub diversity: f64,
    pub n_surviving: f64,
}

pub fn summarize(rows: &[SampleMetrics]) -> MetricsSummary {
    let n = rows.len().max(1) as f64;
    let mean = |f: &dyn Fn(&SampleMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    MetricsSummary {
        scores: SubScores {
            nc: mean(&|r| r.scores.nc),
            dac: mean(&|r| r.scores.dac),
            ep: mean(&|r| r.scores.ep),
            ttc: mean(&|r| r.scores.ttc),
            comfort: mean(&|r| r.scores.comfort),
            ddc: 1.0,
        },
        pdms: mean(&|r| r.pdms),
        diversity: mean(&|r| r.diversity),
        n_surviving: mean(&|r| r.n_surviving as f64),
    }
}
