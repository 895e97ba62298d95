//! Scripted synthetic calibration sessions with ground-truth scoring.

use serde::{Deserialize, Serialize};

use crate::calibration::ClickOutcome;
use crate::session::{GroupGazeState, PersonStatus, Session, SessionError};
use crate::synth::{random_fixations, FrameTruth, GazePath, SyntheticScene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub persons: usize,
    /// Calibration targets form a `grid × grid` raster.
    pub grid: usize,
    pub grid_margin: f64,
    pub click_dwell_s: f64,
    /// Delay after a target appears before the click.
    pub click_settle_s: f64,
    pub degree: u32,
    pub eval_frames: usize,
    pub eval_dwell_s: f64,
    pub pixel_noise: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 21,
            width: 256,
            height: 192,
            persons: 4,
            grid: 5,
            grid_margin: 0.1,
            click_dwell_s: 0.4,
            click_settle_s: 0.2,
            degree: 1,
            eval_frames: 200,
            eval_dwell_s: 1.0,
            pixel_noise: 2.0,
        }
    }
}

impl ScenarioConfig {
    pub fn clicks(&self) -> usize {
        self.grid * self.grid
    }

    /// Row-major target raster.
    pub fn targets(&self) -> Vec<(f64, f64)> {
        let n = self.grid.max(1);
        let m = self.grid_margin;
        let at = |i: usize| {
            if n == 1 {
                0.5
            } else {
                m + (1.0 - 2.0 * m) * i as f64 / (n - 1) as f64
            }
        };
        (0..n * n).map(|k| (at(k % n), at(k / n))).collect()
    }

    pub fn calibration_end_s(&self) -> f64 {
        self.clicks() as f64 * self.click_dwell_s
    }

    /// The audience follows the calibration raster, then random fixations.
    pub fn scene(&self) -> SyntheticScene {
        let mut fix: Vec<(f64, f64, f64)> = self
            .targets()
            .into_iter()
            .enumerate()
            .map(|(i, (u, v))| (i as f64 * self.click_dwell_s, u, v))
            .collect();
        let t0 = self.calibration_end_s();
        let n_eval = ((self.eval_frames as f64 / 30.0) / self.eval_dwell_s).ceil() as usize + 1;
        if let GazePath::Fixations(rest) = random_fixations(self.seed ^ 0xE7A1, n_eval, self.eval_dwell_s, 0.05) {
            fix.extend(rest.into_iter().map(|(t, u, v)| (t0 + t, u, v)));
        }
        let mut scene = SyntheticScene::audience(self.seed, self.width, self.height, self.persons, GazePath::Fixations(fix));
        scene.pixel_noise = self.pixel_noise;
        scene
    }

    pub fn click_times(&self) -> Vec<f64> {
        (0..self.clicks())
            .map(|i| i as f64 * self.click_dwell_s + self.click_settle_s)
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub clicks: Vec<ClickOutcome>,
    /// Per person: id and fit result (RMSE u, v) or the error text.
    pub fits: Vec<(u64, Result<(f64, f64), String>)>,
    /// Mean mapped error as a fraction of screen width.
    pub mean_error: f64,
    /// Fraction of person-frames with a mapped point.
    pub coverage: f64,
    pub scored: usize,
    pub frames: usize,
}

/// Truth face closest to the entry's box centre.
fn match_truth(truth: &FrameTruth, cx: f32, cy: f32) -> Option<usize> {
    truth
        .faces
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let dx = f.center.0 - cx as f64;
            let dy = f.center.1 - cy as f64;
            (i, dx * dx + dy * dy, f.radius)
        })
        .filter(|&(_, d2, r)| d2 < r * r)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _, _)| i)
}

/// Runs the calibration raster through `session`, fits every person, then
/// scores mapped gaze on the evaluation frames. `on_state` sees every state.
pub fn run_scenario(
    session: &mut Session,
    cfg: &ScenarioConfig,
    mut on_state: impl FnMut(&GroupGazeState),
) -> Result<ScenarioReport, SessionError> {
    let scene = cfg.scene();
    let mut report = ScenarioReport::default();
    let clicks = cfg.click_times();
    let targets = cfg.targets();
    let mut next_click = 0;
    let cal_frames = (cfg.calibration_end_s() * scene.fps).round() as u64;
    for i in 0..cal_frames {
        let (frame, _) = scene.render_index(i);
        let state = session.process_frame(&frame)?;
        on_state(&state);
        let t = i as f64 / scene.fps;
        if next_click < clicks.len() && t + 1e-9 >= clicks[next_click] {
            let (u, v) = targets[next_click];
            report.clicks.push(session.click(u, v, frame.timestamp_ms));
            next_click += 1;
        }
    }
    report.fits = session
        .fit_all(cfg.degree)
        .into_iter()
        .map(|(id, r)| (id, r.map(|o| (o.map.rmse_u, o.map.rmse_v)).map_err(|e| e.to_string())))
        .collect();

    let screen = scene.screen;
    let (mut sum, mut n) = (0.0, 0usize);
    let mut person_frames = 0usize;
    for k in 0..cfg.eval_frames as u64 {
        let (frame, truth) = scene.render_index(cal_frames + k);
        let state = session.process_frame(&frame)?;
        on_state(&state);
        person_frames += truth.faces.len();
        for p in state.persons.iter().filter(|p| p.status == PersonStatus::Ok) {
            let (cx, cy) = p.bbox.center();
            let Some(fi) = match_truth(&truth, cx, cy) else {
                continue;
            };
            let f = &truth.faces[fi];
            let (mu, mv) = p.mapped.expect("OK entries carry a mapped point");
            let err = |u: f64, v: f64| {
                let du = (u - f.target.0) * screen.width_m;
                let dv = (v - f.target.1) * screen.height_m;
                (du * du + dv * dv).sqrt() / screen.width_m
            };
            sum += err(mu, mv);
            n += 1;
        }
    }
    report.frames = cfg.eval_frames;
    report.scored = n;
    report.mean_error = if n > 0 { sum / n as f64 } else { f64::INFINITY };
    report.coverage = if person_frames > 0 { n as f64 / person_frames as f64 } else { 0.0 };
    Ok(report)
}
