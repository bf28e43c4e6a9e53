use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajdiff::evalsuite::{
    diversity, metrics_csv, pdm_score, rejection_filter, swept_footprint, trajectory_diversity, RasterSet,
    SampleMetrics, SubScores, METRICS_HEADER,
};
use trajdiff::geometry::Vec2;
use trajdiff::trajspace::Trajectory;

fn scores(nc: f64, dac: f64, ep: f64, ttc: f64, comfort: f64) -> SubScores {
    SubScores {
        nc,
        dac,
        ep,
        ttc,
        comfort,
        ddc: 1.0,
    }
}

/// One minus the mean IoU with the union, using ordinary sets.
fn brute_force(sets: &[BTreeSet<usize>]) -> f64 {
    let union: BTreeSet<usize> = sets.iter().flatten().copied().collect();
    let mut total = 0.0;
    for s in sets {
        let inter = s.intersection(&union).count() as f64;
        let uni = s.union(&union).count() as f64;
        total += if uni == 0.0 { 1.0 } else { inter / uni };
    }
    1.0 - total / sets.len() as f64
}

#[test]
fn diversity_matches_set_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let sets: Vec<BTreeSet<usize>> = (0..n)
            .map(|_| (0..rng.random_range(0..40)).map(|_| rng.random_range(0..200)).collect())
            .collect();
        let rasters: Vec<RasterSet> = sets.iter().map(|s| RasterSet::from_cells(s.iter().copied())).collect();
        assert_eq!(diversity(&rasters), brute_force(&sets));
    }
}

#[test]
fn diversity_reference_cases() {
    let a = RasterSet::from_cells([1, 2]);
    let b = RasterSet::from_cells([2, 3]);
    assert!((diversity(&[a.clone(), b]) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(diversity(&[a.clone(), a.clone(), a]), 0.0);

    let t = Trajectory::from_fn(|k| Vec2::new(2.0 * (k + 1) as f64, 0.0));
    assert_eq!(trajectory_diversity(&[t; 30]), 0.0);
    assert_eq!(trajectory_diversity(&[t]), 0.0);
}

#[test]
fn pdms_reference_cases() {
    assert_eq!(pdm_score(&scores(1.0, 1.0, 1.0, 1.0, 1.0)), 1.0);
    assert!((pdm_score(&scores(1.0, 1.0, 0.5, 1.0, 1.0)) - 9.5 / 12.0).abs() < 1e-12);
    for k in 0..3 {
        let mut s = scores(1.0, 1.0, 1.0, 1.0, 1.0);
        match k {
            0 => s.nc = 0.0,
            1 => s.dac = 0.0,
            _ => s.ttc = 0.0,
        }
        assert_eq!(pdm_score(&s), 0.0);
    }
}

#[test]
fn footprints_grow_with_length() {
    let short = Trajectory::from_fn(|k| Vec2::new((k + 1) as f64, 0.0));
    let long = Trajectory::from_fn(|k| Vec2::new(4.0 * (k + 1) as f64, 0.0));
    let (a, b) = (swept_footprint(&short), swept_footprint(&long));
    assert!(a.is_subset(&b));
    assert!(b.len() > a.len());
}

#[test]
fn rejection_filter_keeps_the_least_bad_when_nothing_is_feasible() {
    let wild = |s: f64| Trajectory::from_fn(|k| Vec2::new(if k % 2 == 0 { s } else { 0.0 }, 0.0));
    assert_eq!(rejection_filter(&[wild(30.0), wild(20.0), wild(25.0)]), vec![1]);
    let ok = Trajectory::from_fn(|k| Vec2::new(3.0 * (k + 1) as f64, 0.0));
    assert_eq!(rejection_filter(&[wild(30.0), ok, ok]), vec![1, 2]);
}

#[test]
fn metrics_csv_layout() {
    let row = |id: &str, p: f64| SampleMetrics {
        sample_id: id.into(),
        scores: scores(1.0, 1.0, p, 1.0, 0.0),
        pdms: p,
        diversity: 0.5,
        n_surviving: 3,
    };
    let csv = metrics_csv(&[row("a", 1.0), row("b", 0.0)]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("mean,"));
    assert!(lines[3].contains(",0.500000,"));
}

fn subscores() -> impl Strategy<Value = SubScores> {
    (any::<bool>(), any::<bool>(), 0.0f64..=1.0, any::<bool>(), any::<bool>())
        .prop_map(|(nc, dac, ep, ttc, c)| scores(nc as u8 as f64, dac as u8 as f64, ep, ttc as u8 as f64, c as u8 as f64))
}

proptest! {
    #[test]
    fn pdms_is_bounded_and_monotone_in_progress(s in subscores(), bump in 0.0f64..1.0) {
        let p = pdm_score(&s);
        prop_assert!((0.0..=1.0).contains(&p));
        let mut better = s;
        better.ep = (s.ep + bump).min(1.0);
        prop_assert!(pdm_score(&better) >= p);
    }

    #[test]
    fn diversity_is_order_free_and_in_range(cells in prop::collection::vec(prop::collection::vec(0usize..500, 0..30), 1..6)) {
        let sets: Vec<RasterSet> = cells.iter().map(|c| RasterSet::from_cells(c.iter().copied())).collect();
        let d = diversity(&sets);
        prop_assert!((0.0..1.0).contains(&d));
        let mut rev = sets.clone();
        rev.reverse();
        prop_assert!((diversity(&rev) - d).abs() < 1e-12);
    }
}
