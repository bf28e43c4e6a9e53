//! Deterministic synthetic driving scenes.
//!
//! Every scene is expressed in the ego frame at `t = 0`: the ego sits at the
//! origin heading along `+x`, the route centreline starts at the origin, and
//! obstacles move with constant velocity. An expert controller (pure pursuit
//! on the centreline plus a jerk-limited speed profile that follows blocking
//! traffic) produces the ground-truth future trajectory.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{menger_curvature, wrap_angle, OrientedRect, Polyline, Vec2, BEV_WINDOW};
use crate::trajspace::{Trajectory, HORIZON, STEP_DT};
use crate::PlanError;

pub const EGO_HALF_LENGTH: f64 = 2.0;
pub const EGO_HALF_WIDTH: f64 = 0.9;
pub const HISTORY_LEN: usize = 4;
pub const MAX_OBSTACLES: usize = 8;

const CENTERLINE_LENGTH: usize = 100;
const SIM_DT: f64 = 0.05;
const SUBSTEPS: usize = 10;

// expert controller limits, kept inside the comfort bounds used for scoring
const MAX_ACCEL: f64 = 1.8;
const MAX_BRAKE: f64 = 2.6;
const MAX_JERK: f64 = 4.0;
const LAT_ACCEL: f64 = 1.5;
const YAW_RATE: f64 = 0.45;
const PLAN_DECEL: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SceneKind {
    Straight,
    Curve,
    LaneChange,
    Intersection,
}

impl SceneKind {
    pub const ALL: [SceneKind; 4] = [
        SceneKind::Straight,
        SceneKind::Curve,
        SceneKind::LaneChange,
        SceneKind::Intersection,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Command {
    Follow,
    Left,
    Right,
}

impl Command {
    pub fn one_hot(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self as usize] = 1.0;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec2,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            position: Vec2::new(x, y),
            heading,
        }
    }
}

pub fn ego_footprint(pose: Pose) -> OrientedRect {
    OrientedRect::new(pose.position, pose.heading, EGO_HALF_LENGTH, EGO_HALF_WIDTH)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec2,
    pub heading: f64,
    /// (length / 2, width / 2)
    pub half_extent: Vec2,
    pub velocity: Vec2,
}

impl Obstacle {
    /// Footprint after `t` seconds of constant-velocity motion.
    pub fn rect_at(&self, t: f64) -> OrientedRect {
        OrientedRect::new(
            self.center + self.velocity * t,
            self.heading,
            self.half_extent.x,
            self.half_extent.y,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub kind: SceneKind,
    pub centerline: Polyline,
    pub corridor_half_width: f64,
    pub speed_limit: f64,
    pub obstacles: Vec<Obstacle>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoStatus {
    pub velocity: f64,
    pub acceleration: f64,
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub id: u64,
    pub scene: SceneSpec,
    pub ego: EgoStatus,
    /// Past ego positions at -2.0, -1.5, -1.0 and -0.5 s, oldest first.
    pub history: [Vec2; HISTORY_LEN],
    pub expert: Trajectory,
}

/// SplitMix64 finaliser used to derive independent sub-seeds.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn integrate_centerline(curvature: impl Fn(f64) -> f64) -> Polyline {
    let mut pts = Vec::with_capacity(CENTERLINE_LENGTH + 1);
    let mut p = Vec2::ZERO;
    let mut heading = 0.0;
    pts.push(p);
    // midpoint rule on 10 sub-steps per metre
    for i in 0..CENTERLINE_LENGTH {
        for j in 0..10 {
            let s = i as f64 + (j as f64 + 0.5) * 0.1;
            let k = curvature(s);
            let mid = heading + 0.5 * k * 0.1;
            p += Vec2::from_angle(mid) * 0.1;
            heading += k * 0.1;
        }
        pts.push(p);
    }
    Polyline::new(pts)
}

impl SceneSpec {
    /// Route command implied by the scene geometry.
    pub fn route_command(&self) -> Command {
        match self.kind {
            SceneKind::Straight | SceneKind::Curve => Command::Follow,
            SceneKind::LaneChange | SceneKind::Intersection => {
                let end = *self.centerline.points().last().expect("non-empty");
                if end.y >= 0.0 {
                    Command::Left
                } else {
                    Command::Right
                }
            }
        }
    }

    /// Discrete curvature at each centreline vertex (endpoints copy their neighbour).
    pub fn curvature_profile(&self) -> Vec<f64> {
        let pts = self.centerline.points();
        let mut k = vec![0.0; pts.len()];
        for i in 1..pts.len() - 1 {
            k[i] = menger_curvature(pts[i - 1], pts[i], pts[i + 1]);
        }
        k[0] = k[1];
        let n = k.len();
        k[n - 1] = k[n - 2];
        k
    }

    fn check(&self) -> bool {
        self.corridor_half_width >= EGO_HALF_WIDTH + 0.2 && self.obstacles.len() <= MAX_OBSTACLES
    }
}

pub fn generate_scene(seed: u64, kind: SceneKind) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1 + kind.index() as u64));
    let speed_limit = rng.random_range(5.0..=15.0);
    let corridor_half_width = rng.random_range(2.2..=4.5);
    let centerline = match kind {
        SceneKind::Straight => integrate_centerline(|_| 0.0),
        SceneKind::Curve => {
            let k0 = rng.random_range(0.005..0.025) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let start = rng.random_range(0.0..10.0);
            integrate_centerline(move |s| k0 * ((s - start) / 10.0).clamp(0.0, 1.0))
        }
        SceneKind::LaneChange => {
            let shift = rng.random_range(3.0..4.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let len = rng.random_range(25.0..40.0);
            let start = rng.random_range(5.0..20.0);
            let amp = std::f64::consts::TAU * shift / (len * len);
            integrate_centerline(move |s| {
                let u = s - start;
                if (0.0..=len).contains(&u) {
                    amp * (std::f64::consts::TAU * u / len).sin()
                } else {
                    0.0
                }
            })
        }
        SceneKind::Intersection => {
            let k0: f64 = rng.random_range(1.0 / 25.0..1.0 / 15.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let start = rng.random_range(10.0..25.0);
            let arc = std::f64::consts::FRAC_PI_2 / k0.abs();
            integrate_centerline(move |s| if s >= start && s < start + arc { k0 } else { 0.0 })
        }
    };
    let mut scene = SceneSpec {
        seed,
        kind,
        centerline,
        corridor_half_width,
        speed_limit,
        obstacles: Vec::new(),
    };
    scene.obstacles = place_obstacles(&scene, &mut rng);
    debug_assert!(scene.check());
    scene
}

fn car(rng: &mut ChaCha8Rng) -> Vec2 {
    Vec2::new(rng.random_range(2.0..2.5), rng.random_range(0.85..1.0))
}

fn place_obstacles(scene: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Obstacle> {
    let line = &scene.centerline;
    let hw = scene.corridor_half_width;
    let mut out = Vec::new();
    if rng.random_bool(0.5) {
        let (p, h) = line.sample(rng.random_range(12.0..40.0));
        let speed = rng.random_range(0.0..0.8) * scene.speed_limit;
        out.push(Obstacle {
            center: p,
            heading: h,
            half_extent: car(rng),
            velocity: Vec2::from_angle(h) * speed,
        });
    }
    let parked = rng.random_range(0..=4);
    for _ in 0..parked {
        let (p, h) = line.sample(rng.random_range(5.0..70.0));
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let offset = hw + rng.random_range(1.2..4.0);
        out.push(Obstacle {
            center: p + Vec2::from_angle(h).perp() * (side * offset),
            heading: h,
            half_extent: car(rng),
            velocity: Vec2::ZERO,
        });
    }
    if scene.kind == SceneKind::Straight {
        let oncoming = rng.random_range(0..=2);
        for _ in 0..oncoming {
            let (p, h) = line.sample(rng.random_range(20.0..80.0));
            let offset = hw + rng.random_range(2.0..3.5);
            let speed = rng.random_range(5.0..12.0);
            out.push(Obstacle {
                center: p + Vec2::from_angle(h).perp() * offset,
                heading: h + std::f64::consts::PI,
                half_extent: car(rng),
                velocity: Vec2::from_angle(h) * -speed,
            });
        }
    }
    let ego = ego_footprint(Pose::new(0.0, 0.0, 0.0));
    out.retain(|o| {
        let r = o.rect_at(0.0);
        !r.contains(Vec2::ZERO) && !r.overlaps(&ego)
    });
    out.truncate(MAX_OBSTACLES);
    out
}

/// Closed corridor: lateral distance to the centreline at most the half-width.
pub fn point_in_drivable(scene: &SceneSpec, p: Vec2) -> bool {
    scene.centerline.project(p).lateral.abs() <= scene.corridor_half_width
}

pub fn collision_at(scene: &SceneSpec, pose: Pose, t: f64) -> bool {
    let ego = ego_footprint(pose);
    scene.obstacles.iter().any(|o| o.rect_at(t).overlaps(&ego))
}

/// Highest speed that lets the ego reach every upcoming curvature-limited
/// speed within the planning deceleration.
pub fn comfortable_speed(scene: &SceneSpec, curvature: &[f64], s: f64) -> f64 {
    let mut v = scene.speed_limit;
    let n = curvature.len();
    for step in 0..=25 {
        let ds = step as f64 * 2.0;
        let idx = (s + ds).round().clamp(0.0, (n - 1) as f64) as usize;
        let k = curvature[idx];
        if k > 1e-6 {
            let cap = (LAT_ACCEL / k).sqrt().min(YAW_RATE / k);
            v = v.min((cap * cap + 2.0 * PLAN_DECEL * ds).sqrt());
        }
    }
    v
}

/// Ego speed a blocking obstacle asks for, expressed as an acceleration bound.
fn follow_accel(scene: &SceneSpec, s_ego: f64, v: f64, t: f64) -> f64 {
    let mut accel = f64::INFINITY;
    for o in &scene.obstacles {
        let r = o.rect_at(t);
        let f = scene.centerline.project(r.center);
        if f.s <= s_ego {
            continue;
        }
        let (_, tangent) = scene.centerline.sample(f.s);
        let dth = wrap_angle(o.heading - tangent);
        let lat_ext = (o.half_extent.y * dth.cos()).abs() + (o.half_extent.x * dth.sin()).abs();
        let lon_ext = (o.half_extent.x * dth.cos()).abs() + (o.half_extent.y * dth.sin()).abs();
        if f.lateral.abs() - lat_ext >= EGO_HALF_WIDTH + 0.5 {
            continue;
        }
        let gap = f.s - s_ego - EGO_HALF_LENGTH - lon_ext;
        let v_o = o.velocity.dot(Vec2::from_angle(tangent)).max(0.0);
        let desired = 2.5 + 1.2 * v + v * (v - v_o) / (2.0 * (MAX_ACCEL * MAX_BRAKE).sqrt());
        let a = MAX_ACCEL * (1.0 - (desired.max(0.0) / gap.max(0.1)).powi(2));
        accel = accel.min(a);
    }
    accel
}

pub fn expert_trajectory(scene: &SceneSpec, ego: &EgoStatus) -> Result<Trajectory, PlanError> {
    let curvature = scene.curvature_profile();
    let mut pos = Vec2::ZERO;
    let mut heading: f64 = 0.0;
    let mut v = ego.velocity.max(0.0);
    let mut a = ego.acceleration;
    let mut waypoints = [Vec2::ZERO; HORIZON];
    let infeasible = |why: &str, t: f64| PlanError::InfeasibleScene(format!("scene {}: {why} at t={t:.2}", scene.seed));
    for step in 0..HORIZON * SUBSTEPS {
        let t = step as f64 * SIM_DT;
        let f = scene.centerline.project(pos);

        let lookahead = (0.8 * v + 4.0).clamp(4.0, 20.0);
        let (target, _) = scene.centerline.sample(f.s + lookahead);
        let rel = target - pos;
        let alpha = wrap_angle(rel.angle() - heading);
        let kappa = (2.0 * alpha.sin() / lookahead).clamp(-0.2, 0.2);

        let v_des = comfortable_speed(scene, &curvature, f.s);
        let a_cmd = (v_des - v).min(follow_accel(scene, f.s, v, t)).clamp(-MAX_BRAKE, MAX_ACCEL);
        a += (a_cmd - a).clamp(-MAX_JERK * SIM_DT, MAX_JERK * SIM_DT);

        let mut v_next = v + a * SIM_DT;
        if v_next <= 0.0 {
            v_next = 0.0;
            a = a.max(0.0);
        }
        let v_mid = 0.5 * (v + v_next);
        let dtheta = v_mid * kappa * SIM_DT;
        pos += Vec2::from_angle(heading + 0.5 * dtheta) * (v_mid * SIM_DT);
        heading += dtheta;
        v = v_next;

        let t_next = t + SIM_DT;
        let pose = Pose {
            position: pos,
            heading,
        };
        if collision_at(scene, pose, t_next) {
            return Err(infeasible("collision", t_next));
        }
        if ego_footprint(pose)
            .corners()
            .iter()
            .any(|c| !point_in_drivable(scene, *c))
        {
            return Err(infeasible("left corridor", t_next));
        }
        if (step + 1) % SUBSTEPS == 0 {
            waypoints[(step + 1) / SUBSTEPS - 1] = pos;
        }
    }
    Trajectory::new(waypoints).map_err(|e| infeasible(&e.to_string(), 4.0))
}

/// Past positions from integrating the ego speed backwards along the initial heading.
pub fn backward_history(ego: &EgoStatus) -> [Vec2; HISTORY_LEN] {
    let mut out = [Vec2::ZERO; HISTORY_LEN];
    let mut x = 0.0;
    let steps = (STEP_DT / SIM_DT).round() as usize;
    for k in 0..HISTORY_LEN {
        for j in 0..steps {
            let tau = (k * steps + j) as f64 * SIM_DT + 0.5 * SIM_DT;
            let v = (ego.velocity - ego.acceleration * tau).clamp(0.0, 20.0);
            x -= v * SIM_DT;
        }
        out[HISTORY_LEN - 1 - k] = Vec2::new(x, 0.0);
    }
    out
}

/// Relative weights of scene kinds in a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KindMix(pub [f64; 4]);

impl Default for KindMix {
    fn default() -> Self {
        Self([1.0; 4])
    }
}

impl KindMix {
    /// Kind for each of `n` records: largest-remainder quotas, then a seeded shuffle.
    fn assign(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<SceneKind> {
        let total: f64 = self.0.iter().sum();
        let exact: Vec<f64> = self.0.iter().map(|w| w / total * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut rem: Vec<(usize, f64)> = exact.iter().enumerate().map(|(i, e)| (i, e - e.floor())).collect();
        rem.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let missing = n - counts.iter().sum::<usize>();
        for (i, _) in rem.into_iter().take(missing) {
            counts[i] += 1;
        }
        let mut kinds: Vec<SceneKind> = counts
            .iter()
            .enumerate()
            .flat_map(|(i, &c)| std::iter::repeat_n(SceneKind::ALL[i], c))
            .collect();
        for i in (1..kinds.len()).rev() {
            let j = rng.random_range(0..=i);
            kinds.swap(i, j);
        }
        kinds
    }
}

const MAX_ATTEMPTS: u64 = 64;

fn sample_ego(scene: &SceneSpec, rng: &mut ChaCha8Rng) -> EgoStatus {
    let vmax = comfortable_speed(scene, &scene.curvature_profile(), 0.0);
    EgoStatus {
        velocity: rng.random_range(0.0..=1.0) * vmax,
        acceleration: rng.random_range(-0.5..=0.5),
        command: scene.route_command(),
    }
}

/// One record whose expert passes every scoring gate; retries scene seeds and
/// falls back to an empty straight road.
pub fn make_record(id: u64, record_seed: u64, kind: SceneKind) -> EpisodeRecord {
    for attempt in 0..MAX_ATTEMPTS {
        let scene_seed = derive_seed(record_seed, attempt);
        let scene = generate_scene(scene_seed, kind);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scene_seed, 0xE60));
        let ego = sample_ego(&scene, &mut rng);
        if let Some(rec) = accept(id, scene, ego) {
            return rec;
        }
    }
    let mut scene = generate_scene(record_seed, SceneKind::Straight);
    scene.obstacles.clear();
    let ego = EgoStatus {
        velocity: 0.5 * scene.speed_limit,
        acceleration: 0.0,
        command: Command::Follow,
    };
    accept(id, scene, ego).expect("empty straight road always admits an expert")
}

fn accept(id: u64, scene: SceneSpec, ego: EgoStatus) -> Option<EpisodeRecord> {
    let expert = expert_trajectory(&scene, &ego).ok()?;
    if !expert.waypoints.iter().all(|p| BEV_WINDOW.contains(*p)) {
        return None;
    }
    let scores = crate::evalsuite::sub_scores_with_reference(&expert, &scene, &expert);
    if !scores.is_perfect() || crate::evalsuite::feasibility_violation(&expert) > 0.0 {
        return None;
    }
    let history = backward_history(&ego);
    Some(EpisodeRecord {
        id,
        scene,
        ego,
        history,
        expert,
    })
}

pub fn make_dataset(n: usize, seed: u64, mix: KindMix) -> Vec<EpisodeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xDA7A));
    let kinds = mix.assign(n, &mut rng);
    kinds
        .into_par_iter()
        .enumerate()
        .map(|(i, kind)| make_record(i as u64, derive_seed(seed, 1000 + i as u64), kind))
        .collect()
}

/// Writes one JSON object per line.
pub fn write_dataset(path: &Path, records: &[EpisodeRecord]) -> Result<(), PlanError> {
    let file = std::fs::File::create(path).map_err(|e| PlanError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| PlanError::Format(format!("{}: {e}", path.display())))?;
        w.write_all(b"\n").map_err(|e| PlanError::io(path, e))?;
    }
    w.flush().map_err(|e| PlanError::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<EpisodeRecord>, PlanError> {
    let file = std::fs::File::open(path).map_err(|e| PlanError::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PlanError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| PlanError::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
