mod common;

use common::*;
use crowdgaze_core::geometry::BBox;
use crowdgaze_core::tracker::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn exact_assignment_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..300 {
        let (tracks, dets) = random_scene(&mut rng, 6);
        let a = assign(&tracks, &dets);
        let (n, cost) = brute_force(&tracks, &dets);
        assert_eq!(a.pairs.len(), n);
        assert!((a.cost(&tracks, &dets) - cost).abs() < 1e-9);
    }
}

#[test]
fn hungarian_on_known_matrix() {
    let m = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
    let r = hungarian(&m);
    let cost: f64 = r.iter().enumerate().map(|(i, &j)| m[i][j]).sum();
    assert_eq!(cost, 5.0);
}

#[test]
fn greedy_is_used_above_the_limit_and_stays_admissible() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (tracks, dets) = random_scene(&mut rng, 40);
    let a = assign(&tracks, &dets);
    for &(t, d) in &a.pairs {
        assert!(admissible(&tracks[t], &dets[d]));
    }
}

#[test]
fn identities_follow_moving_faces() {
    let mut tracker = Tracker::new(TrackerConfig::default());
    let mut ids = None;
    for step in 0..50 {
        let x = step as f32 * 2.0;
        let boxes = [BBox::new(x, 10.0, 30.0, 30.0), BBox::new(200.0 - x, 80.0, 30.0, 30.0)];
        let u = tracker.update(&boxes);
        match &ids {
            None => ids = Some(u.detection_ids.clone()),
            Some(first) => assert_eq!(&u.detection_ids, first),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn assignment_optimal_on_random_scenes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tracks, dets) = random_scene(&mut rng, 5);
        let a = assign(&tracks, &dets);
        let (n, cost) = brute_force(&tracks, &dets);
        prop_assert_eq!(a.pairs.len(), n);
        prop_assert!((a.cost(&tracks, &dets) - cost).abs() < 1e-9);
        prop_assert_eq!(a.pairs.len() + a.unmatched_tracks.len(), tracks.len());
        prop_assert_eq!(a.pairs.len() + a.unmatched_detections.len(), dets.len());
    }

    #[test]
    fn ids_are_never_reused_and_centres_stay_in_boxes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tracker = Tracker::new(TrackerConfig { max_misses: rng.gen_range(1..5) });
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..30 {
            let (_, dets) = random_scene(&mut rng, 4);
            let u = tracker.update(&dets);
            for id in &u.spawned {
                prop_assert!(seen.insert(*id));
            }
            let live: Vec<u64> = tracker.tracks().iter().map(|t| t.id).collect();
            prop_assert!(live.windows(2).all(|w| w[0] < w[1]));
            for t in tracker.tracks() {
                prop_assert!(t.last_bbox.contains(t.last_center.0, t.last_center.1));
                prop_assert!(t.misses < tracker.config.max_misses);
            }
        }
    }
}
