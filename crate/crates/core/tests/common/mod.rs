//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use crowdgaze_core::calibration::{eval_monomials, monomial_exponents, CalibrationSample};
use crowdgaze_core::detector::PyramidLevel;
use crowdgaze_core::geometry::BBox;
use crowdgaze_core::image::Planes;
use crowdgaze_core::tracker::{admissible, center_distance, PersonTrack};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Normal equations `(A^T A + l I) c = A^T b` solved by Gauss-Jordan with
/// partial pivoting.
pub fn normal_equations(a: &[Vec<f64>], b: &[f64], ridge: f64) -> Vec<f64> {
    let m = a[0].len();
    let mut g = vec![vec![0.0; m + 1]; m];
    for (row, &y) in a.iter().zip(b) {
        for i in 0..m {
            for j in 0..m {
                g[i][j] += row[i] * row[j];
            }
            g[i][m] += row[i] * y;
        }
    }
    for (i, r) in g.iter_mut().enumerate() {
        r[i] += ridge;
    }
    for col in 0..m {
        let piv = (col..m).max_by(|&x, &y| g[x][col].abs().total_cmp(&g[y][col].abs())).unwrap();
        g.swap(col, piv);
        let p = g[col][col];
        for v in g[col].iter_mut() {
            *v /= p;
        }
        for r in 0..m {
            if r != col {
                let f = g[r][col];
                if f != 0.0 {
                    for c in 0..=m {
                        g[r][c] -= f * g[col][c];
                    }
                }
            }
        }
    }
    g.iter().map(|r| r[m]).collect()
}

/// Every exponent tuple over 5 variables with entries `<= d`, filtered by total degree.
pub fn enumerate_exponents(d: u32) -> usize {
    let mut n = 0;
    for a in 0..=d {
        for b in 0..=d {
            for c in 0..=d {
                for e in 0..=d {
                    for f in 0..=d {
                        if a + b + c + e + f <= d {
                            n += 1;
                        }
                    }
                }
            }
        }
    }
    n
}

pub fn sample(features: [f64; 5], target: (f64, f64)) -> CalibrationSample {
    CalibrationSample {
        features,
        target,
        person_id: 0,
        timestamp_ms: 0,
    }
}

pub fn random_features(rng: &mut ChaCha8Rng) -> [f64; 5] {
    std::array::from_fn(|_| rng.gen_range(-1.0..1.0))
}

/// Random polynomial samples of total degree `<= d`.
pub fn polynomial_samples(seed: u64, d: u32, n: usize) -> (Vec<CalibrationSample>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ex = monomial_exponents(5, d);
    let cu: Vec<f64> = ex.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cv: Vec<f64> = ex.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
    let samples = (0..n)
        .map(|_| {
            let f = random_features(&mut rng);
            let phi = eval_monomials(&ex, &f);
            let dot = |c: &[f64]| c.iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>();
            sample(f, (dot(&cu), dot(&cv)))
        })
        .collect();
    (samples, cu, cv)
}

/// Best (pair count, cost) over every admissible injective matching.
pub fn brute_force(tracks: &[PersonTrack], dets: &[BBox]) -> (usize, f64) {
    fn go(t: usize, tracks: &[PersonTrack], dets: &[BBox], used: &mut Vec<bool>, n: usize, cost: f64, best: &mut (usize, f64)) {
        if t == tracks.len() {
            if n > best.0 || (n == best.0 && cost < best.1) {
                *best = (n, cost);
            }
            return;
        }
        go(t + 1, tracks, dets, used, n, cost, best);
        for d in 0..dets.len() {
            if !used[d] && admissible(&tracks[t], &dets[d]) {
                used[d] = true;
                go(t + 1, tracks, dets, used, n + 1, cost + center_distance(&tracks[t], &dets[d]), best);
                used[d] = false;
            }
        }
    }
    let mut best = (0, 0.0);
    go(0, tracks, dets, &mut vec![false; dets.len()], 0, 0.0, &mut best);
    best
}

pub fn random_scene(rng: &mut ChaCha8Rng, max_n: usize) -> (Vec<PersonTrack>, Vec<BBox>) {
    let nt = rng.gen_range(0..=max_n);
    let nd = rng.gen_range(0..=max_n);
    let tracks = (0..nt)
        .map(|i| {
            let b = BBox::new(
                rng.gen_range(0.0..100.0),
                rng.gen_range(0.0..100.0),
                rng.gen_range(10.0..40.0),
                rng.gen_range(10.0..40.0),
            );
            PersonTrack {
                id: i as u64,
                last_bbox: b,
                last_center: b.center(),
                misses: 0,
            }
        })
        .collect();
    let dets = (0..nd)
        .map(|_| {
            BBox::new(
                rng.gen_range(0.0..110.0),
                rng.gen_range(0.0..110.0),
                rng.gen_range(10.0..40.0),
                rng.gen_range(10.0..40.0),
            )
        })
        .collect();
    (tracks, dets)
}

/// Single-channel image of a Gaussian blob centred at continuous `(x, y)`.
pub fn blob(w: usize, h: usize, x: f64, y: f64, sigma: f64) -> Planes {
    let mut p = Planes::zeros(1, w, h);
    for j in 0..h {
        for i in 0..w {
            let dx = i as f64 + 0.5 - x;
            let dy = j as f64 + 0.5 - y;
            p.data[j * w + i] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp() as f32;
        }
    }
    p
}

/// Intensity centroid of a level tile, in continuous level coordinates.
pub fn tile_centroid(canvas: &Planes, level: &PyramidLevel) -> (f64, f64) {
    let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
    for j in 0..level.height {
        for i in 0..level.width {
            let v = canvas.data[(level.offset.1 + j) * canvas.width + level.offset.0 + i] as f64;
            sx += v * (i as f64 + 0.5);
            sy += v * (j as f64 + 0.5);
            s += v;
        }
    }
    (sx / s, sy / s)
}
