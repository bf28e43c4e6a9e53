use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajdiff::featenc::{rasterize, CH_DRIVABLE, CH_OCCUPANCY, RASTER_GRID, RASTER_N};
use trajdiff::geometry::{OrientedRect, Vec2};
use trajdiff::scenesim::{
    expert_trajectory, generate_scene, make_dataset, point_in_drivable, read_dataset, write_dataset, KindMix,
    SceneKind,
};
use trajdiff::trajspace::{to_actions, to_trajectory, ActionSequence, Trajectory, HORIZON};

fn random_rect(rng: &mut ChaCha8Rng) -> OrientedRect {
    OrientedRect::new(
        Vec2::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)),
        rng.random_range(-3.2..3.2),
        rng.random_range(0.3..3.0),
        rng.random_range(0.3..2.0),
    )
}

/// Dense point sampling of `a` tested against `b`: a lower bound on overlap.
fn sampled_overlap(a: &OrientedRect, b: &OrientedRect, per_side: usize) -> bool {
    let [u, v] = a.axes();
    (0..per_side).any(|i| {
        (0..per_side).any(|j| {
            let s = -1.0 + 2.0 * i as f64 / (per_side - 1) as f64;
            let t = -1.0 + 2.0 * j as f64 / (per_side - 1) as f64;
            b.contains(a.center + u * (s * a.half_length) + v * (t * a.half_width))
        })
    })
}

#[test]
fn separating_axis_test_agrees_with_dense_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut overlapping = 0;
    for _ in 0..100 {
        let (a, b) = (random_rect(&mut rng), random_rect(&mut rng));
        let dense = sampled_overlap(&a, &b, 100) || sampled_overlap(&b, &a, 100);
        // sampling can only miss slivers thinner than the 100 x 100 spacing
        if dense {
            assert!(a.overlaps(&b), "sampling found overlap the SAT test missed: {a:?} {b:?}");
        } else if a.overlaps(&b) {
            let shrink = |r: &OrientedRect| OrientedRect::new(r.center, r.heading, r.half_length * 0.97, r.half_width * 0.97);
            assert!(!shrink(&a).overlaps(&shrink(&b)), "SAT overlap not seen by sampling: {a:?} {b:?}");
        }
        overlapping += a.overlaps(&b) as usize;
    }
    assert!(overlapping > 10 && overlapping < 90, "{overlapping} of 100 overlap");
}

#[test]
fn kind_frequencies_follow_the_mix() {
    let data = make_dataset(1000, 3, KindMix::default());
    for kind in SceneKind::ALL {
        let n = data.iter().filter(|r| r.scene.kind == kind).count() as f64;
        assert!((n / 1000.0 - 0.25).abs() <= 0.025, "{kind:?}: {n}");
    }
}

#[test]
fn dataset_is_deterministic_and_round_trips() {
    let a = make_dataset(24, 9, KindMix::default());
    assert_eq!(a, make_dataset(24, 9, KindMix::default()));
    let seeds: HashSet<u64> = a.iter().map(|r| r.scene.seed).collect();
    assert_eq!(seeds.len(), a.len());
    let dir = std::env::temp_dir().join(format!("trajdiff-ds-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("d.jsonl");
    write_dataset(&path, &a).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), a);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn raster_channels_match_direct_queries() {
    for (seed, kind) in [(1, SceneKind::Curve), (2, SceneKind::Intersection), (3, SceneKind::LaneChange)] {
        let scene = generate_scene(seed, kind);
        let r = rasterize(&scene);
        for i in 0..RASTER_N {
            for j in 0..RASTER_N {
                let c = RASTER_GRID.center(i, j);
                let drivable = point_in_drivable(&scene, c);
                assert_eq!(r.get(i, j, CH_DRIVABLE) == 1.0, drivable, "cell ({i},{j})");
                let occupied = scene.obstacles.iter().any(|o| o.rect_at(0.0).contains(c));
                assert_eq!(r.get(i, j, CH_OCCUPANCY) == 1.0, occupied);
            }
        }
    }
}

#[test]
fn experts_start_at_the_origin_heading_forward() {
    for rec in make_dataset(40, 5, KindMix::default()) {
        let e = expert_trajectory(&rec.scene, &rec.ego).unwrap();
        assert_eq!(e, rec.expert);
        assert!(e.waypoints[0].x >= 0.0);
    }
}

fn waypoints() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-150.0f64..150.0, -150.0f64..150.0), HORIZON)
}

proptest! {
    #[test]
    fn waypoint_action_round_trip(pts in waypoints()) {
        let t = Trajectory::from_fn(|k| Vec2::new(pts[k].0, pts[k].1));
        let back = to_trajectory(&to_actions(&t));
        for (a, b) in back.waypoints.iter().zip(&t.waypoints) {
            prop_assert!((a.x - b.x).abs() <= 1e-9 && (a.y - b.y).abs() <= 1e-9);
        }
    }

    #[test]
    fn action_waypoint_round_trip_is_exact_for_dyadic_steps(steps in prop::collection::vec((-64i32..64, -64i32..64), HORIZON)) {
        let acts = ActionSequence::from_fn(|k| Vec2::new(steps[k].0 as f64 / 8.0, steps[k].1 as f64 / 8.0));
        prop_assert_eq!(to_actions(&to_trajectory(&acts)), acts);
    }

    #[test]
    fn overlap_is_symmetric_and_rigid(seed in any::<u64>(), shift in (-20.0f64..20.0, -20.0f64..20.0), turn in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_rect(&mut rng), random_rect(&mut rng));
        prop_assert_eq!(a.overlaps(&b), b.overlaps(&a));
        // translate and rotate both rectangles about the origin together
        let (c, s) = (turn.cos(), turn.sin());
        let rot = |p: Vec2| Vec2::new(c * p.x - s * p.y + shift.0, s * p.x + c * p.y + shift.1);
        let moved = |r: &OrientedRect| OrientedRect::new(rot(r.center), r.heading + turn, r.half_length, r.half_width);
        let (ma, mb) = (moved(&a), moved(&b));
        let margin = |r: &OrientedRect| OrientedRect::new(r.center, r.heading, r.half_length * 1.001, r.half_width * 1.001);
        if a.overlaps(&b) {
            prop_assert!(margin(&ma).overlaps(&margin(&mb)));
        } else {
            let shrink = |r: &OrientedRect| OrientedRect::new(r.center, r.heading, r.half_length * 0.999, r.half_width * 0.999);
            prop_assert!(!shrink(&ma).overlaps(&shrink(&mb)));
        }
    }
}
