//! Per-person polynomial maps from gaze features to screen coordinates.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Features are `(sx, sy, gx, gy, gz)`: frame-normalized gaze start and unit gaze vector.
pub const N_FEATURES: usize = 5;
pub const DEFAULT_RIDGE: f64 = 1e-6;
pub const DEFAULT_DEGREE: u32 = 2;
pub const STALENESS_MS: u64 = 200;
/// Mapped points are clamped to this range on both axes.
pub const MAP_MIN: f64 = -0.25;
pub const MAP_MAX: f64 = 1.25;

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("degree {degree} needs {needed} samples, have {samples}")]
    Underdetermined { samples: usize, needed: usize, degree: u32 },
    #[error("fit produced non-finite coefficients")]
    NonFinite,
}

impl FitError {
    /// How many more samples an under-determined fit needs.
    pub fn missing(&self) -> usize {
        match self {
            Self::Underdetermined { samples, needed, .. } => needed.saturating_sub(*samples),
            Self::NonFinite => 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum CalibrationIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("calibration for person {0} is inconsistent: {1}")]
    Invalid(u64, String),
}

/// `C(n + d, d)`.
pub fn monomial_count(n_vars: usize, degree: u32) -> usize {
    let d = degree as usize;
    (1..=d).fold(1usize, |acc, i| acc * (n_vars + i) / i)
}

/// Exponent tuples of total degree `<= degree` in graded lexicographic order:
/// by total degree, then lexicographically descending within a degree.
pub fn monomial_exponents(n_vars: usize, degree: u32) -> Vec<Vec<u32>> {
    fn fill(rest: u32, i: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if i + 1 == cur.len() {
            cur[i] = rest;
            out.push(cur.clone());
            return;
        }
        for e in (0..=rest).rev() {
            cur[i] = e;
            fill(rest - e, i + 1, cur, out);
        }
        cur[i] = 0;
    }
    let mut out = Vec::new();
    if n_vars == 0 {
        out.push(Vec::new());
        return out;
    }
    for total in 0..=degree {
        let mut cur = vec![0; n_vars];
        fill(total, 0, &mut cur, &mut out);
    }
    out
}

pub fn eval_monomials(exponents: &[Vec<u32>], x: &[f64]) -> Vec<f64> {
    exponents
        .iter()
        .map(|e| e.iter().zip(x).map(|(&k, &v)| v.powi(k as i32)).product())
        .collect()
}

/// Solves `min |A c - b|^2 + ridge |c|^2` for every right-hand side by
/// Householder QR of the ridge-augmented system. `a` is row-major `rows x cols`.
/// Also returns `min |R_ii| / max |R_ii|` as a conditioning indicator.
pub fn ridge_least_squares(a: &[f64], rows: usize, cols: usize, rhs: &[Vec<f64>], ridge: f64) -> (Vec<Vec<f64>>, f64) {
    let m = rows + if ridge > 0.0 { cols } else { 0 };
    let n = cols;
    let mut q = vec![0.0; m * n];
    q[..rows * n].copy_from_slice(&a[..rows * n]);
    let mut bs: Vec<Vec<f64>> = rhs
        .iter()
        .map(|b| {
            let mut v = b.clone();
            v.resize(m, 0.0);
            v
        })
        .collect();
    if ridge > 0.0 {
        let s = ridge.sqrt();
        for j in 0..n {
            q[(rows + j) * n + j] = s;
        }
    }
    let steps = n.min(m);
    for k in 0..steps {
        let norm = (k..m).map(|i| q[i * n + k] * q[i * n + k]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if q[k * n + k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| q[i * n + k]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k..n {
            let dot: f64 = (k..m).map(|i| v[i - k] * q[i * n + j]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..m {
                q[i * n + j] -= f * v[i - k];
            }
        }
        for b in &mut bs {
            let dot: f64 = (k..m).map(|i| v[i - k] * b[i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..m {
                b[i] -= f * v[i - k];
            }
        }
    }
    let diag: Vec<f64> = (0..steps).map(|i| q[i * n + i].abs()).collect();
    let max_d = diag.iter().copied().fold(0.0, f64::max);
    let min_d = diag.iter().copied().fold(f64::INFINITY, f64::min);
    let cond = if max_d > 0.0 { min_d / max_d } else { 0.0 };
    let solutions = bs
        .iter()
        .map(|b| {
            let mut c = vec![0.0; n];
            for i in (0..steps).rev() {
                let s: f64 = (i + 1..n).map(|j| q[i * n + j] * c[j]).sum();
                let d = q[i * n + i];
                c[i] = if d == 0.0 { 0.0 } else { (b[i] - s) / d };
            }
            c
        })
        .collect();
    (solutions, cond)
}

/// Validity filter for storing calibration samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidityConfig {
    pub min_start_conf: f32,
    pub min_vec_conf: f32,
}

impl Default for ValidityConfig {
    fn default() -> Self {
        Self {
            min_start_conf: 0.5,
            min_vec_conf: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub features: [f64; N_FEATURES],
    pub target: (f64, f64),
    pub person_id: u64,
    pub timestamp_ms: u64,
}

/// Fitted map for one person; coefficients follow `exponents`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolynomialMap {
    pub degree: u32,
    pub exponents: Vec<Vec<u32>>,
    pub coefficients_u: Vec<f64>,
    pub coefficients_v: Vec<f64>,
    pub rmse_u: f64,
    pub rmse_v: f64,
    pub sample_count: usize,
}

/// A mapped screen point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappedPoint {
    pub u: f64,
    pub v: f64,
    /// The unclamped point fell outside `[0, 1]^2`.
    pub off_screen: bool,
}

impl PolynomialMap {
    /// Unclamped polynomial value.
    pub fn eval(&self, features: &[f64; N_FEATURES]) -> (f64, f64) {
        let phi = eval_monomials(&self.exponents, features);
        let dot = |c: &[f64]| c.iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>();
        (dot(&self.coefficients_u), dot(&self.coefficients_v))
    }

    pub fn map(&self, features: &[f64; N_FEATURES]) -> MappedPoint {
        let (u, v) = self.eval(features);
        let off_screen = !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v);
        MappedPoint {
            u: u.clamp(MAP_MIN, MAP_MAX),
            v: v.clamp(MAP_MIN, MAP_MAX),
            off_screen,
        }
    }

    fn check(&self) -> Result<(), String> {
        let m = monomial_count(N_FEATURES, self.degree);
        if self.exponents != monomial_exponents(N_FEATURES, self.degree) {
            return Err("exponent list does not match degree".into());
        }
        if self.coefficients_u.len() != m || self.coefficients_v.len() != m {
            return Err(format!("expected {m} coefficients per axis"));
        }
        if self.coefficients_u.iter().chain(&self.coefficients_v).any(|c| !c.is_finite()) {
            return Err("non-finite coefficient".into());
        }
        Ok(())
    }
}

/// A fitted map plus whether the design was numerically rank-deficient.
#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub map: PolynomialMap,
    pub ill_conditioned: bool,
}

const CONDITION_WARN: f64 = 1e-10;

pub fn fit_polynomial(samples: &[CalibrationSample], degree: u32, ridge: f64) -> Result<FitOutcome, FitError> {
    let exponents = monomial_exponents(N_FEATURES, degree);
    let m = exponents.len();
    if samples.len() < m {
        return Err(FitError::Underdetermined {
            samples: samples.len(),
            needed: m,
            degree,
        });
    }
    let mut a = Vec::with_capacity(samples.len() * m);
    for s in samples {
        a.extend(eval_monomials(&exponents, &s.features));
    }
    let tu: Vec<f64> = samples.iter().map(|s| s.target.0).collect();
    let tv: Vec<f64> = samples.iter().map(|s| s.target.1).collect();
    let (sol, cond) = ridge_least_squares(&a, samples.len(), m, &[tu.clone(), tv.clone()], ridge);
    let (cu, cv) = (sol[0].clone(), sol[1].clone());
    if cu.iter().chain(&cv).any(|c| !c.is_finite()) {
        return Err(FitError::NonFinite);
    }
    let rmse = |c: &[f64], t: &[f64]| {
        let se: f64 = a
            .chunks(m)
            .zip(t)
            .map(|(row, &y)| {
                let p: f64 = row.iter().zip(c).map(|(x, k)| x * k).sum();
                (p - y) * (p - y)
            })
            .sum();
        (se / t.len() as f64).sqrt()
    };
    let map = PolynomialMap {
        degree,
        rmse_u: rmse(&cu, &tu),
        rmse_v: rmse(&cv, &tv),
        exponents,
        coefficients_u: cu,
        coefficients_v: cv,
        sample_count: samples.len(),
    };
    Ok(FitOutcome {
        map,
        ill_conditioned: cond < CONDITION_WARN,
    })
}

/// One person's current gaze, as offered to a calibration click.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClickCandidate {
    pub person_id: u64,
    pub start_conf: f32,
    pub vec_conf: f32,
    pub valid: bool,
    pub features: [f64; N_FEATURES],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClickRejection {
    Stale,
    NoSamples,
    OutOfRange,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClickOutcome {
    pub stored: Vec<u64>,
    pub skipped: Vec<u64>,
    pub rejected: Option<ClickRejection>,
}

/// Calibration samples and fitted maps for every tracked person.
#[derive(Clone, Debug, Default)]
pub struct CalibrationStore {
    pub validity: ValidityConfig,
    samples: BTreeMap<u64, Vec<CalibrationSample>>,
    maps: BTreeMap<u64, PolynomialMap>,
}

/// Saved calibration maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub persons: Vec<PersonCalibration>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonCalibration {
    pub person_id: u64,
    #[serde(flatten)]
    pub map: PolynomialMap,
}

impl CalibrationStore {
    pub fn new(validity: ValidityConfig) -> Self {
        Self {
            validity,
            ..Default::default()
        }
    }

    /// Stores one sample per person passing the validity filter. The gaze
    /// state must be younger than [`STALENESS_MS`] at click time.
    pub fn add_click(&mut self, u: f64, v: f64, click_ts_ms: u64, state_ts_ms: Option<u64>, candidates: &[ClickCandidate]) -> ClickOutcome {
        let mut out = ClickOutcome::default();
        if !((0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v)) {
            out.rejected = Some(ClickRejection::OutOfRange);
            return out;
        }
        let Some(state_ts) = state_ts_ms else {
            log::warn!("calibration click without current gaze samples");
            out.rejected = Some(ClickRejection::NoSamples);
            return out;
        };
        if click_ts_ms.abs_diff(state_ts) > STALENESS_MS {
            out.rejected = Some(ClickRejection::Stale);
            return out;
        }
        if candidates.is_empty() {
            log::warn!("calibration click without current gaze samples");
            out.rejected = Some(ClickRejection::NoSamples);
            return out;
        }
        for c in candidates {
            let ok = c.valid
                && c.start_conf >= self.validity.min_start_conf
                && c.vec_conf >= self.validity.min_vec_conf
                && c.features.iter().all(|f| f.is_finite());
            if ok {
                self.samples.entry(c.person_id).or_default().push(CalibrationSample {
                    features: c.features,
                    target: (u, v),
                    person_id: c.person_id,
                    timestamp_ms: click_ts_ms,
                });
                out.stored.push(c.person_id);
            } else {
                out.skipped.push(c.person_id);
            }
        }
        out
    }

    pub fn add_sample(&mut self, sample: CalibrationSample) {
        self.samples.entry(sample.person_id).or_default().push(sample);
    }

    pub fn samples(&self, person_id: u64) -> &[CalibrationSample] {
        self.samples.get(&person_id).map_or(&[], Vec::as_slice)
    }

    pub fn persons(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.samples.keys().chain(self.maps.keys()).copied().collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Fits and installs a map for one person. On failure any previous map is kept.
    pub fn fit(&mut self, person_id: u64, degree: u32, ridge: f64) -> Result<FitOutcome, FitError> {
        let outcome = fit_polynomial(self.samples(person_id), degree, ridge)?;
        if outcome.ill_conditioned {
            log::warn!("calibration design for person {person_id} is rank-deficient");
        }
        self.maps.insert(person_id, outcome.map.clone());
        Ok(outcome)
    }

    pub fn map_for(&self, person_id: u64) -> Option<&PolynomialMap> {
        self.maps.get(&person_id)
    }

    pub fn set_map(&mut self, person_id: u64, map: PolynomialMap) {
        self.maps.insert(person_id, map);
    }

    pub fn map(&self, person_id: u64, features: &[f64; N_FEATURES]) -> Option<MappedPoint> {
        self.maps.get(&person_id).map(|m| m.map(features))
    }

    /// Drops everything known about a person whose track ended.
    pub fn forget(&mut self, person_id: u64) {
        self.samples.remove(&person_id);
        self.maps.remove(&person_id);
    }

    pub fn to_file(&self) -> CalibrationFile {
        CalibrationFile {
            persons: self
                .maps
                .iter()
                .map(|(&person_id, map)| PersonCalibration {
                    person_id,
                    map: map.clone(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CalibrationIoError> {
        let json = serde_json::to_string_pretty(&self.to_file())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Installs every map from a saved file.
    pub fn load_maps(&mut self, path: impl AsRef<Path>) -> Result<usize, CalibrationIoError> {
        let file: CalibrationFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        for p in &file.persons {
            p.map.check().map_err(|e| CalibrationIoError::Invalid(p.person_id, e))?;
        }
        let n = file.persons.len();
        for p in file.persons {
            self.maps.insert(p.person_id, p.map);
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_match_binomials() {
        assert_eq!((0..4).map(|d| monomial_count(5, d)).collect::<Vec<_>>(), vec![1, 6, 21, 56]);
    }

    #[test]
    fn graded_lex_order_for_two_vars() {
        let e = monomial_exponents(2, 2);
        assert_eq!(e, vec![vec![0, 0], vec![1, 0], vec![0, 1], vec![2, 0], vec![1, 1], vec![0, 2]]);
    }

    #[test]
    fn constant_fit_is_mean_click() {
        let samples: Vec<CalibrationSample> = [(0.2, 0.4), (0.6, 0.8), (0.7, 0.3)]
            .iter()
            .enumerate()
            .map(|(i, &t)| CalibrationSample {
                features: [i as f64, 0.1, 0.0, 0.0, -1.0],
                target: t,
                person_id: 0,
                timestamp_ms: 0,
            })
            .collect();
        let fit = fit_polynomial(&samples, 0, 0.0).unwrap();
        let p = fit.map.map(&[9.0, 9.0, 9.0, 9.0, 9.0]);
        assert!((p.u - 0.5).abs() < 1e-12 && (p.v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn underdetermined_reports_needed() {
        let s = CalibrationSample {
            features: [0.0; 5],
            target: (0.5, 0.5),
            person_id: 0,
            timestamp_ms: 0,
        };
        let err = fit_polynomial(&vec![s; 10], 2, DEFAULT_RIDGE).unwrap_err();
        assert_eq!(
            err,
            FitError::Underdetermined {
                samples: 10,
                needed: 21,
                degree: 2
            }
        );
    }

    #[test]
    fn map_clamps_and_flags() {
        let map = PolynomialMap {
            degree: 0,
            exponents: monomial_exponents(5, 0),
            coefficients_u: vec![2.0],
            coefficients_v: vec![0.5],
            rmse_u: 0.0,
            rmse_v: 0.0,
            sample_count: 1,
        };
        let p = map.map(&[0.0; 5]);
        assert_eq!((p.u, p.v, p.off_screen), (MAP_MAX, 0.5, true));
    }
}
