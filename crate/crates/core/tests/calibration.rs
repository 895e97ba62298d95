mod common;

use common::*;
use crowdgaze_core::calibration::*;
use crowdgaze_core::session::calibration_features;
use crowdgaze_core::synth::ScreenGeometry;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn monomial_counts_match_enumeration() {
    for (d, expected) in [(0, 1), (1, 6), (2, 21), (3, 56)] {
        assert_eq!(enumerate_exponents(d), expected);
        assert_eq!(monomial_count(5, d), expected);
        assert_eq!(monomial_exponents(5, d).len(), expected);
    }
}

#[test]
fn exponent_list_is_graded_and_unique() {
    let ex = monomial_exponents(5, 3);
    let totals: Vec<u32> = ex.iter().map(|e| e.iter().sum()).collect();
    assert!(totals.windows(2).all(|w| w[0] <= w[1]));
    let mut sorted = ex.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), ex.len());
}

#[test]
fn affine_map_recovered_from_ten_samples() {
    let (samples, cu, cv) = polynomial_samples(3, 1, 10);
    let fit = fit_polynomial(&samples, 1, 0.0).unwrap().map;
    assert!(fit.rmse_u < 1e-8 && fit.rmse_v < 1e-8);
    for (a, b) in fit.coefficients_u.iter().zip(&cu).chain(fit.coefficients_v.iter().zip(&cv)) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn quadratic_recovery_matches_normal_equations() {
    let (samples, cu, _) = polynomial_samples(9, 2, 25);
    let fit = fit_polynomial(&samples, 2, 0.0).unwrap().map;
    assert!(fit.rmse_u < 1e-8 && fit.rmse_v < 1e-8);
    let ex = monomial_exponents(5, 2);
    let a: Vec<Vec<f64>> = samples.iter().map(|s| eval_monomials(&ex, &s.features)).collect();
    let bu: Vec<f64> = samples.iter().map(|s| s.target.0).collect();
    let oracle = normal_equations(&a, &bu, 0.0);
    for ((c, o), t) in fit.coefficients_u.iter().zip(&oracle).zip(&cu) {
        assert!((c - o).abs() < 1e-8, "{c} vs oracle {o}");
        assert!((c - t).abs() < 1e-8);
    }
}

#[test]
fn ridge_solution_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let samples: Vec<_> = (0..30).map(|_| sample(random_features(&mut rng), (rng.gen(), rng.gen()))).collect();
    let ex = monomial_exponents(5, 2);
    let a: Vec<Vec<f64>> = samples.iter().map(|s| eval_monomials(&ex, &s.features)).collect();
    let fit = fit_polynomial(&samples, 2, 0.05).unwrap().map;
    let bv: Vec<f64> = samples.iter().map(|s| s.target.1).collect();
    for (c, o) in fit.coefficients_v.iter().zip(normal_equations(&a, &bv, 0.05)) {
        assert!((c - o).abs() < 1e-9);
    }
}

#[test]
fn interpolates_training_point() {
    let (samples, _, _) = polynomial_samples(5, 2, 40);
    let fit = fit_polynomial(&samples, 2, DEFAULT_RIDGE).unwrap().map;
    let p = fit.map(&samples[7].features);
    assert!((p.u - samples[7].target.0.clamp(MAP_MIN, MAP_MAX)).abs() < 1e-6);
    assert!((p.v - samples[7].target.1.clamp(MAP_MIN, MAP_MAX)).abs() < 1e-6);
}

#[test]
fn degree_zero_maps_to_mean() {
    let samples = vec![sample([0.1; 5], (0.4, 0.6)), sample([0.9; 5], (0.6, 0.4))];
    let fit = fit_polynomial(&samples, 0, 0.0).unwrap().map;
    let p = fit.map(&[0.3, -2.0, 0.0, 1.0, 5.0]);
    assert!((p.u - 0.5).abs() < 1e-12 && (p.v - 0.5).abs() < 1e-12);
}

#[test]
fn underdetermined_fit_reports_deficit_and_keeps_old_map() {
    let mut store = CalibrationStore::new(ValidityConfig::default());
    let (samples, _, _) = polynomial_samples(1, 1, 10);
    for s in &samples {
        store.add_sample(*s);
    }
    store.fit(0, 1, DEFAULT_RIDGE).unwrap();
    let before = store.map_for(0).cloned();
    let err = store.fit(0, 2, DEFAULT_RIDGE).unwrap_err();
    assert_eq!(err.missing(), 11);
    assert_eq!(store.map_for(0).cloned(), before);
}

#[test]
fn geometric_world_twelve_clicks_within_one_percent() {
    // One viewer, exact gaze, random click points.
    let screen = ScreenGeometry::default();
    let (w, h) = (320usize, 240usize);
    let start = (150.0, 110.0);
    let eye = screen.eye_position(w, h, start.0, start.1);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mk = |rng: &mut ChaCha8Rng| {
        let (u, v) = (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9));
        let g = screen.gaze_to(eye, u, v);
        sample(calibration_features(start, w, h, g), (u, v))
    };
    let train: Vec<_> = (0..12).map(|_| mk(&mut rng)).collect();
    let map = fit_polynomial(&train, 1, DEFAULT_RIDGE).unwrap().map;
    let mut err = 0.0;
    for _ in 0..500 {
        let s = mk(&mut rng);
        let p = map.map(&s.features);
        let du = (p.u - s.target.0) * screen.width_m;
        let dv = (p.v - s.target.1) * screen.height_m;
        err += (du * du + dv * dv).sqrt() / screen.width_m;
    }
    assert!(err / 500.0 < 0.01, "mean error {}", err / 500.0);
}

fn candidate(id: u64, sc: f32, vc: f32) -> ClickCandidate {
    ClickCandidate {
        person_id: id,
        start_conf: sc,
        vec_conf: vc,
        valid: true,
        features: [0.5, 0.5, 0.0, 0.0, -1.0],
    }
}

#[test]
fn click_stores_only_confident_persons() {
    let mut store = CalibrationStore::new(ValidityConfig::default());
    let out = store.add_click(0.5, 0.5, 1000, Some(990), &[candidate(0, 0.9, 0.9), candidate(1, 0.3, 0.9)]);
    assert_eq!(out.stored, vec![0]);
    assert_eq!(out.skipped, vec![1]);
    assert_eq!(store.samples(0).len(), 1);
    assert!(store.samples(1).is_empty());
}

#[test]
fn repeated_clicks_keep_duplicates() {
    let mut store = CalibrationStore::new(ValidityConfig::default());
    for _ in 0..3 {
        store.add_click(0.2, 0.2, 50, Some(50), &[candidate(4, 1.0, 1.0)]);
    }
    assert_eq!(store.samples(4).len(), 3);
}

#[test]
fn stale_missing_and_out_of_range_clicks_are_rejected() {
    let mut store = CalibrationStore::new(ValidityConfig::default());
    let c = [candidate(0, 1.0, 1.0)];
    assert_eq!(
        store.add_click(0.5, 0.5, 2000, Some(1000), &c).rejected,
        Some(ClickRejection::Stale)
    );
    assert_eq!(store.add_click(0.5, 0.5, 2000, None, &c).rejected, Some(ClickRejection::NoSamples));
    assert_eq!(
        store.add_click(0.5, 0.5, 2000, Some(2000), &[]).rejected,
        Some(ClickRejection::NoSamples)
    );
    assert_eq!(
        store.add_click(1.2, 0.5, 2000, Some(2000), &c).rejected,
        Some(ClickRejection::OutOfRange)
    );
    assert!(store.samples(0).is_empty());
}

#[test]
fn saved_maps_load_back() {
    let mut store = CalibrationStore::new(ValidityConfig::default());
    let (samples, _, _) = polynomial_samples(2, 2, 30);
    for s in samples {
        store.add_sample(CalibrationSample { person_id: 3, ..s });
    }
    store.fit(3, 2, DEFAULT_RIDGE).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cal.json");
    store.save(&path).unwrap();
    let mut other = CalibrationStore::new(ValidityConfig::default());
    assert_eq!(other.load_maps(&path).unwrap(), 1);
    assert_eq!(other.map_for(3), store.map_for(3));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let p = &json["persons"][0];
    for key in [
        "person_id",
        "degree",
        "exponents",
        "coefficients_u",
        "coefficients_v",
        "rmse_u",
        "rmse_v",
        "sample_count",
    ] {
        assert!(!p[key].is_null(), "missing {key}");
    }
}

#[test]
fn corrupt_map_file_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cal.json");
    std::fs::write(
        &path,
        r#"{"persons":[{"person_id":0,"degree":1,"exponents":[[0,0,0,0,0]],"coefficients_u":[0.5],"coefficients_v":[0.5],"rmse_u":0,"rmse_v":0,"sample_count":1}]}"#,
    )
    .unwrap();
    let mut store = CalibrationStore::new(ValidityConfig::default());
    assert!(store.load_maps(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sample_order_does_not_matter(seed in any::<u64>(), shift in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<_> = (0..30).map(|_| sample(random_features(&mut rng), (rng.gen(), rng.gen()))).collect();
        let mut rotated = samples.clone();
        rotated.rotate_left(shift);
        let a = fit_polynomial(&samples, 2, DEFAULT_RIDGE).unwrap().map;
        let b = fit_polynomial(&rotated, 2, DEFAULT_RIDGE).unwrap().map;
        for (x, y) in a.coefficients_u.iter().zip(&b.coefficients_u).chain(a.coefficients_v.iter().zip(&b.coefficients_v)) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn residual_does_not_grow_with_degree(seed in any::<u64>(), d in 0u32..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<_> = (0..60).map(|_| sample(random_features(&mut rng), (rng.gen(), rng.gen()))).collect();
        let lo = fit_polynomial(&samples, d, 0.0).unwrap().map;
        let hi = fit_polynomial(&samples, d + 1, 0.0).unwrap().map;
        prop_assert!(hi.rmse_u <= lo.rmse_u + 1e-12);
        prop_assert!(hi.rmse_v <= lo.rmse_v + 1e-12);
    }

    #[test]
    fn fitting_one_person_leaves_others_untouched(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = CalibrationStore::new(ValidityConfig::default());
        for id in 0..2u64 {
            for _ in 0..8 {
                store.add_sample(CalibrationSample { person_id: id, ..sample(random_features(&mut rng), (rng.gen(), rng.gen())) });
            }
        }
        store.fit(0, 1, DEFAULT_RIDGE).unwrap();
        let b_samples = store.samples(1).to_vec();
        store.fit(0, 1, 0.1).unwrap();
        prop_assert_eq!(store.samples(1), b_samples.as_slice());
        prop_assert!(store.map_for(1).is_none());
    }

    #[test]
    fn mapped_points_stay_in_clamp_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<_> = (0..25).map(|_| sample(random_features(&mut rng), (rng.gen(), rng.gen()))).collect();
        let map = fit_polynomial(&samples, 2, DEFAULT_RIDGE).unwrap().map;
        for _ in 0..20 {
            let f: [f64; 5] = std::array::from_fn(|_| rng.gen_range(-5.0..5.0));
            let p = map.map(&f);
            prop_assert!((MAP_MIN..=MAP_MAX).contains(&p.u) && (MAP_MIN..=MAP_MAX).contains(&p.v));
        }
    }
}
