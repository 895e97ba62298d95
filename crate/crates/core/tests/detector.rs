mod common;

use common::*;
use crowdgaze_core::detector::*;
use crowdgaze_core::geometry::{iou, BBox};
use crowdgaze_core::image::Frame;
use crowdgaze_core::nets::DetectorArch;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn blob_centroid_round_trips_through_every_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (w, h) = (rng.gen_range(160..400), rng.gen_range(120..300));
        let x = rng.gen_range(0.3..0.7) * w as f64;
        let y = rng.gen_range(0.3..0.7) * h as f64;
        let pyr = build_pyramid(&blob(w, h, x, y, 6.0), PYRAMID_LEVELS);
        assert_eq!(pyr.plan.levels.len(), PYRAMID_LEVELS);
        for level in &pyr.plan.levels {
            let (cx, cy) = tile_centroid(&pyr.canvas, level);
            let (ox, oy) = level.to_original(cx, cy);
            assert!(
                (ox - x).abs() <= 1.0 && (oy - y).abs() <= 1.0,
                "level {level:?}: ({ox}, {oy}) vs ({x}, {y})"
            );
        }
    }
}

#[test]
fn level_coordinates_round_trip() {
    let plan = plan_pyramid(640, 480, PYRAMID_LEVELS);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let (x, y) = (rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0));
        for level in &plan.levels {
            let (lx, ly) = level.from_original(x, y);
            let (bx, by) = level.to_original(lx, ly);
            assert!((bx - x).abs() < 1e-9 && (by - y).abs() < 1e-9);
        }
    }
}

#[test]
fn canvas_holds_every_tile() {
    for (w, h) in [(640, 480), (192, 144), (100, 400), (401, 37)] {
        let plan = plan_pyramid(w, h, PYRAMID_LEVELS);
        for l in &plan.levels {
            assert!(l.offset.0 + l.width <= plan.canvas_width);
            assert!(l.offset.1 + l.height <= plan.canvas_height);
            assert!(l.width >= MIN_LEVEL_SIZE.min(w) && l.height >= MIN_LEVEL_SIZE.min(h));
        }
        assert_eq!(plan.truncated, plan.levels.len() < PYRAMID_LEVELS);
    }
}

#[test]
fn blank_frame_gives_no_detections_after_threshold() {
    let mut det = FaceDetector::random(DetectorArch::table(), 1).unwrap();
    det.config.score_threshold = f32::INFINITY;
    assert!(det.detect(&Frame::filled(96, 64, [0, 0, 0])).unwrap().is_empty());
    assert!(det.detect(&Frame::new(0, 0, Vec::new())).unwrap().is_empty());
}

#[test]
fn score_map_covers_canvas_at_stride_eight() {
    let det = FaceDetector::random(DetectorArch::table(), 3).unwrap();
    let frame = Frame::filled(120, 90, [30, 60, 90]);
    let (pyr, scores, _) = det.score_map(&frame).unwrap();
    let (_, c, mh, mw) = scores.dims4("scores").unwrap();
    assert_eq!(c, 1);
    assert_eq!(mw, pyr.plan.canvas_width.div_ceil(8));
    assert_eq!(mh, pyr.plan.canvas_height.div_ceil(8));
}

#[test]
fn invalid_config_is_rejected() {
    let mut det = FaceDetector::random(DetectorArch::table(), 1).unwrap();
    det.config.upscale_factor = 0.5;
    assert!(det.detect(&Frame::filled(64, 64, [0, 0, 0])).is_err());
}

#[test]
fn weights_round_trip() {
    let det = FaceDetector::random(DetectorArch::table(), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("det.ggwt");
    det.save(&path).unwrap();
    let back = FaceDetector::load(&path).unwrap();
    let frame = Frame::filled(64, 48, [200, 100, 50]);
    let (_, a, _) = det.score_map(&frame).unwrap();
    let (_, b, _) = back.score_map(&frame).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn matching_counts() {
    let truth = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(50.0, 50.0, 10.0, 10.0)];
    let d = |x: f32| Detection {
        bbox: BBox::new(x, 0.0, 10.0, 10.0),
        score: 1.0,
        level: 0,
    };
    assert_eq!(match_detections(&[d(1.0), d(2.0), d(100.0)], &truth, 0.5), (1, 2, 1));
}

fn random_dets(rng: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection {
            bbox: BBox::new(
                rng.gen_range(0.0..60.0),
                rng.gen_range(0.0..60.0),
                rng.gen_range(4.0..30.0),
                rng.gen_range(4.0..30.0),
            ),
            score: rng.gen_range(-3.0..3.0),
            level: 0,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn nms_output_is_sparse_and_covering(seed in any::<u64>(), n in 0usize..40, t in 0.1f32..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dets = random_dets(&mut rng, n);
        let kept = nms(&dets, t);
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                prop_assert!(iou(&kept[i].bbox, &kept[j].bbox) < t);
            }
        }
        for d in &dets {
            let survived = kept.iter().any(|k| k == d);
            let covered = kept.iter().any(|k| k.score >= d.score && iou(&k.bbox, &d.bbox) >= t);
            prop_assert!(survived || covered);
        }
        prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn decoded_boxes_land_inside_the_upscaled_frame_bounds(seed in any::<u64>(), u in 1.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.gen_range(64usize..200), rng.gen_range(64usize..200));
        let (uw, uh) = (((w as f64) * u).round() as usize, ((h as f64) * u).round() as usize);
        let plan = plan_pyramid(uw, uh, PYRAMID_LEVELS);
        let (mw, mh) = (plan.canvas_width.div_ceil(8), plan.canvas_height.div_ceil(8));
        let scores = vec![1.0f32; mw * mh];
        let factor = (uw as f64 / w as f64, uh as f64 / h as f64);
        for d in decode_candidates(&plan, &scores, mw, mh, 8, 8.0, 0.0, factor) {
            let (cx, cy) = d.bbox.center();
            prop_assert!(cx >= 0.0 && cx <= w as f32 && cy >= 0.0 && cy <= h as f32);
        }
    }
}
