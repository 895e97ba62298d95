use crowdgaze_core::calibration::{fit_polynomial, CalibrationSample, ValidityConfig};
use crowdgaze_core::detector::FaceDetector;
use crowdgaze_core::gaze::{extract_crop, make_batch, BatchConfig, GazeEstimator};
use crowdgaze_core::geometry::BBox;
use crowdgaze_core::image::Frame;
use crowdgaze_core::nets::{DetectorArch, GazeArch};
use crowdgaze_core::session::*;
use crowdgaze_core::synth::{random_fixations, SyntheticScene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn session(batch: usize, validity: ValidityConfig) -> Session {
    let cfg = SessionConfig {
        batch: BatchConfig { batch_size: batch },
        validity,
        ..Default::default()
    };
    Session::new(
        cfg,
        FaceDetector::random(DetectorArch::table(), 1).unwrap(),
        GazeEstimator::random(GazeArch::desk(), 2).unwrap(),
    )
    .unwrap()
}

fn grid_boxes(n: usize) -> Vec<BBox> {
    (0..n)
        .map(|i| BBox::new((i % 9) as f32 * 40.0 + 2.0, (i / 9) as f32 * 40.0 + 2.0, 36.0, 36.0))
        .collect()
}

fn noise_frame(w: usize, h: usize, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Frame::new(w, h, (0..w * h * 3).map(|_| rng.gen()).collect())
}

/// An affine map installed for `id` so its entries become OK.
fn install_map(s: &mut Session, id: u64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<CalibrationSample> = (0..8)
        .map(|_| CalibrationSample {
            features: std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
            target: (rng.gen(), rng.gen()),
            person_id: id,
            timestamp_ms: 0,
        })
        .collect();
    s.calibration.set_map(id, fit_polynomial(&samples, 1, 1e-6).unwrap().map);
}

#[test]
fn empty_frame_gives_empty_state() {
    let mut s = session(4, ValidityConfig::default());
    let st = s.process_detections(&Frame::filled(64, 48, [0, 0, 0]), &[]);
    assert!(st.persons.is_empty());
    assert_eq!(st.group_mean, None);
}

#[test]
fn forty_five_faces_run_in_two_chunks_in_track_order() {
    let mut s = session(
        40,
        ValidityConfig {
            min_start_conf: 0.0,
            min_vec_conf: 0.0,
        },
    );
    let frame = noise_frame(370, 210, 3);
    let boxes = grid_boxes(45);
    let st = s.process_detections(&frame, &boxes);
    assert_eq!(st.persons.len(), 45);
    let ids: Vec<u64> = st.persons.iter().map(|p| p.person_id).collect();
    assert_eq!(ids, (0..45).collect::<Vec<_>>());
    // Each person's estimate equals a lone run of its crop.
    for (p, b) in st.persons.iter().zip(&boxes) {
        let crop = extract_crop(&frame, b).unwrap();
        let one = s.estimator.estimate(&make_batch(&[&crop.pixels], 40).unwrap()).unwrap()[0];
        assert_eq!(p.vec, one.vec.map(|v| v as f64));
        assert_eq!(p.vec_conf, one.vec_conf as f64);
    }
}

#[test]
fn statuses_and_group_mean() {
    let mut s = session(
        4,
        ValidityConfig {
            min_start_conf: 0.0,
            min_vec_conf: 0.0,
        },
    );
    let frame = noise_frame(200, 100, 5);
    let boxes = grid_boxes(3);
    s.process_detections(&frame, &boxes);
    install_map(&mut s, 0, 1);
    install_map(&mut s, 2, 2);
    let st = s.process_detections(&frame, &boxes);
    let status: Vec<PersonStatus> = st.persons.iter().map(|p| p.status).collect();
    assert_eq!(status, vec![PersonStatus::Ok, PersonStatus::Uncal, PersonStatus::Ok]);
    let (a, c) = (st.persons[0].mapped.unwrap(), st.persons[2].mapped.unwrap());
    assert_eq!(st.group_mean, Some(((a.0 + c.0) / 2.0, (a.1 + c.1) / 2.0)));

    s.reconfigure(SessionConfig {
        validity: ValidityConfig {
            min_start_conf: 1.1,
            min_vec_conf: 1.1,
        },
        batch: BatchConfig { batch_size: 4 },
        ..Default::default()
    })
    .unwrap();
    let st = s.process_detections(&frame, &boxes);
    assert!(st.persons.iter().all(|p| p.status == PersonStatus::Invalid && p.mapped.is_none()));
    assert_eq!(st.group_mean, None);
}

#[test]
fn clicks_pair_with_fresh_state_only() {
    let mut s = session(
        4,
        ValidityConfig {
            min_start_conf: 0.0,
            min_vec_conf: 0.0,
        },
    );
    let mut frame = noise_frame(200, 100, 5);
    frame.timestamp_ms = 1000;
    assert!(s.click(0.5, 0.5, 1000).rejected.is_some());
    s.process_detections(&frame, &grid_boxes(2));
    let ok = s.click(0.5, 0.5, 1100);
    assert_eq!(ok.stored, vec![0, 1]);
    let stale = s.click(0.5, 0.5, 1500);
    assert!(stale.stored.is_empty() && stale.rejected.is_some());
    let fits = s.fit_all(1);
    assert!(fits.iter().all(|(_, r)| r.as_ref().unwrap_err().missing() == 5));
}

#[test]
fn invalid_config_is_refused() {
    let cfg = SessionConfig {
        batch: BatchConfig { batch_size: 0 },
        ..Default::default()
    };
    assert!(Session::new(
        cfg,
        FaceDetector::random(DetectorArch::table(), 1).unwrap(),
        GazeEstimator::random(GazeArch::desk(), 2).unwrap()
    )
    .is_err());
}

fn recorded_session(path: &std::path::Path, frames: u64) -> Vec<GroupGazeState> {
    let mut s = session(
        8,
        ValidityConfig {
            min_start_conf: 0.3,
            min_vec_conf: 0.3,
        },
    );
    let scene = SyntheticScene::audience(5, 200, 150, 4, random_fixations(5, 5, 1.0, 0.1));
    let mut rec = Recorder::create(path).unwrap();
    let mut states = Vec::new();
    for i in 0..frames {
        let (frame, truth) = scene.render_index(i);
        let boxes: Vec<BBox> = truth.faces.iter().map(|f| f.bbox).collect();
        if i == 2 {
            install_map(&mut s, 0, 4);
            install_map(&mut s, 1, 5);
        }
        let st = s.process_detections(&frame, &boxes);
        rec.record(&st).unwrap();
        if i == 3 {
            rec.record_click(i, st.timestamp_ms + 5, 0.25, 0.75).unwrap();
        }
        states.push(st);
    }
    states
}

#[test]
fn log_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    let states = recorded_session(&path, 20);
    let replay = replay(&path).unwrap();
    assert_eq!(replay.skipped, 0);
    assert_eq!(replay.states.len(), states.len());
    assert_eq!(replay.clicks.len(), 1);
    assert_eq!((replay.clicks[0].u, replay.clicks[0].v), (0.25, 0.75));
    let close = |a: f64, b: f64| (a - b).abs() <= 5e-7 * (1.0 + a.abs() * 1e-6);
    for (a, b) in states.iter().zip(&replay.states) {
        assert_eq!((a.frame_index, a.timestamp_ms), (b.frame_index, b.timestamp_ms));
        assert_eq!(a.persons.len(), b.persons.len());
        for (p, q) in a.persons.iter().zip(&b.persons) {
            assert_eq!((p.person_id, p.status, p.mapped), (q.person_id, q.status, q.mapped));
            let pa = [
                p.bbox.x as f64,
                p.bbox.y as f64,
                p.bbox.w as f64,
                p.bbox.h as f64,
                p.start.0,
                p.start.1,
                p.start_conf,
                p.vec[0],
                p.vec[1],
                p.vec[2],
                p.vec_conf,
            ];
            let qa = [
                q.bbox.x as f64,
                q.bbox.y as f64,
                q.bbox.w as f64,
                q.bbox.h as f64,
                q.start.0,
                q.start.1,
                q.start_conf,
                q.vec[0],
                q.vec[1],
                q.vec[2],
                q.vec_conf,
            ];
            for (x, y) in pa.iter().zip(&qa) {
                assert!(close(*x, *y), "{x} vs {y}");
            }
        }
        let recomputed = group_average(&b.persons);
        assert_eq!(recomputed.map(|(u, v)| (round6(u), round6(v))), b.group_mean);
    }
    assert!(states.iter().any(|s| s.group_mean.is_some()));
    assert!(states.iter().flat_map(|s| &s.persons).any(|p| p.status == PersonStatus::Uncal));
}

#[test]
fn log_has_only_complete_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    recorded_session(&path, 5);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.ends_with('\n'));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(LOG_HEADER));
    for l in lines {
        assert_eq!(l.split(',').count(), 17, "{l}");
    }
}

#[test]
fn truncated_log_replays_complete_frames() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    recorded_session(&path, 6);
    let text = std::fs::read_to_string(&path).unwrap();
    let cut = &text[..text.len() - 30];
    let r = replay_from(cut.as_bytes()).unwrap();
    assert_eq!(r.states.len(), 5);
    assert!(r.skipped >= 1);
}
