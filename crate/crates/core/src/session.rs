//! Per-frame orchestration, group attention and the session log.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{
    CalibrationStore, ClickCandidate, ClickOutcome, FitError, FitOutcome, ValidityConfig, DEFAULT_DEGREE, DEFAULT_RIDGE, N_FEATURES,
};
use crate::detector::{DetectError, DetectorConfig, FaceDetector};
use crate::gaze::{extract_crop, make_batch, BatchConfig, GazeEstimator, GazeSample};
use crate::geometry::BBox;
use crate::image::Frame;
use crate::tracker::{Tracker, TrackerConfig};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("detection failed: {0}")]
    Detect(#[from] DetectError),
    #[error("invalid session config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub detector: DetectorConfig,
    pub batch: BatchConfig,
    pub validity: ValidityConfig,
    pub degree: u32,
    pub tracker: TrackerConfig,
    pub target_fps: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            batch: BatchConfig::default(),
            validity: ValidityConfig::default(),
            degree: DEFAULT_DEGREE,
            tracker: TrackerConfig::default(),
            target_fps: 30.0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), SessionError> {
        self.detector.validate()?;
        if self.batch.batch_size == 0 {
            return Err(SessionError::Config("batch size must be positive".into()));
        }
        if !(self.target_fps > 0.0 && self.target_fps.is_finite()) {
            return Err(SessionError::Config("target fps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PersonStatus {
    Ok,
    Invalid,
    Uncal,
}

impl PersonStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ok => "OK",
            Self::Invalid => "INVALID",
            Self::Uncal => "UNCAL",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "OK" => Some(Self::Ok),
            "INVALID" => Some(Self::Invalid),
            "UNCAL" => Some(Self::Uncal),
            _ => None,
        }
    }
}

/// One tracked person in one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonEntry {
    pub person_id: u64,
    pub bbox: BBox,
    /// Gaze start in frame pixels.
    pub start: (f64, f64),
    pub start_conf: f64,
    pub vec: [f64; 3],
    pub vec_conf: f64,
    /// Mapped projection point, rounded to the log precision.
    pub mapped: Option<(f64, f64)>,
    pub status: PersonStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupGazeState {
    pub frame_index: u64,
    pub timestamp_ms: u64,
    pub persons: Vec<PersonEntry>,
    pub group_mean: Option<(f64, f64)>,
}

impl GroupGazeState {
    pub fn empty(frame_index: u64, timestamp_ms: u64) -> Self {
        Self {
            frame_index,
            timestamp_ms,
            persons: Vec::new(),
            group_mean: None,
        }
    }
}

/// Mean of the mapped points of entries with status OK.
pub fn group_average(entries: &[PersonEntry]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = entries
        .iter()
        .filter(|e| e.status == PersonStatus::Ok)
        .filter_map(|e| e.mapped)
        .collect();
    if pts.is_empty() {
        return None;
    }
    let n = pts.len() as f64;
    let (su, sv) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    Some((su / n, sv / n))
}

/// The value the log stores for `x`: formatted to six decimals and parsed back.
pub fn round6(x: f64) -> f64 {
    f6(x).parse().expect("formatted float parses")
}

/// Calibration features: frame-normalized gaze start and the gaze vector.
pub fn calibration_features(start: (f64, f64), frame_w: usize, frame_h: usize, vec: [f64; 3]) -> [f64; N_FEATURES] {
    [start.0 / frame_w as f64, start.1 / frame_h as f64, vec[0], vec[1], vec[2]]
}

/// Detector, estimator, tracker and calibration state for one camera.
pub struct Session {
    pub config: SessionConfig,
    pub detector: FaceDetector,
    pub estimator: GazeEstimator,
    pub tracker: Tracker,
    pub calibration: CalibrationStore,
    latest: Option<(GroupGazeState, usize, usize)>,
}

impl Session {
    pub fn new(config: SessionConfig, mut detector: FaceDetector, estimator: GazeEstimator) -> Result<Self, SessionError> {
        config.validate()?;
        detector.config = config.detector;
        Ok(Self {
            tracker: Tracker::new(config.tracker),
            calibration: CalibrationStore::new(config.validity),
            config,
            detector,
            estimator,
            latest: None,
        })
    }

    /// Applies a new configuration between frames.
    pub fn reconfigure(&mut self, config: SessionConfig) -> Result<(), SessionError> {
        config.validate()?;
        self.detector.config = config.detector;
        self.tracker.config = config.tracker;
        self.calibration.validity = config.validity;
        self.config = config;
        Ok(())
    }

    pub fn latest(&self) -> Option<&GroupGazeState> {
        self.latest.as_ref().map(|(s, _, _)| s)
    }

    pub fn process_frame(&mut self, frame: &Frame) -> Result<GroupGazeState, SessionError> {
        let boxes: Vec<BBox> = self.detector.detect(frame)?.into_iter().map(|d| d.bbox).collect();
        Ok(self.process_detections(frame, &boxes))
    }

    /// Everything after detection: tracking, batched estimation, mapping.
    pub fn process_detections(&mut self, frame: &Frame, boxes: &[BBox]) -> GroupGazeState {
        let update = self.tracker.update(boxes);
        let mut order: Vec<usize> = (0..boxes.len()).collect();
        order.sort_by_key(|&d| update.detection_ids[d]);

        let mut crops = Vec::with_capacity(order.len());
        for &d in &order {
            crops.push(extract_crop(frame, &boxes[d]).ok());
        }
        let samples = self.estimate(&crops);

        let mut persons = Vec::with_capacity(order.len());
        for ((&d, crop), sample) in order.iter().zip(&crops).zip(samples) {
            let id = update.detection_ids[d];
            let source = crop.as_ref().map_or(boxes[d], |c| c.source_bbox);
            persons.push(self.entry(frame, id, boxes[d], &source, &sample));
        }
        let group_mean = group_average(&persons);
        let state = GroupGazeState {
            frame_index: frame.index,
            timestamp_ms: frame.timestamp_ms,
            persons,
            group_mean,
        };
        self.latest = Some((state.clone(), frame.width, frame.height));
        state
    }

    /// Runs the estimator in fixed-size chunks; a failing chunk marks its
    /// persons invalid.
    fn estimate(&self, crops: &[Option<crate::gaze::FaceCrop>]) -> Vec<GazeSample> {
        let b = self.config.batch.batch_size;
        let mut out = vec![GazeSample::invalid(); crops.len()];
        let present: Vec<usize> = (0..crops.len()).filter(|&i| crops[i].is_some()).collect();
        for chunk in present.chunks(b) {
            let pix: Vec<&[f32]> = chunk
                .iter()
                .map(|&i| crops[i].as_ref().expect("present crop").pixels.as_slice())
                .collect();
            match make_batch(&pix, b).and_then(|batch| self.estimator.estimate(&batch)) {
                Ok(samples) => {
                    for (&i, s) in chunk.iter().zip(samples) {
                        out[i] = s;
                    }
                }
                Err(e) => log::warn!("gaze estimation failed for {} persons: {e}", chunk.len()),
            }
        }
        out
    }

    fn entry(&self, frame: &Frame, id: u64, bbox: BBox, source: &BBox, s: &GazeSample) -> PersonEntry {
        let (sx, sy) = s.start_in_frame(source);
        let start = (sx as f64, sy as f64);
        let vec = s.vec.map(|v| v as f64);
        let v = &self.config.validity;
        let usable = s.valid && s.start_conf >= v.min_start_conf && s.vec_conf >= v.min_vec_conf;
        let (mapped, status) = if !usable {
            (None, PersonStatus::Invalid)
        } else {
            let f = calibration_features(start, frame.width, frame.height, vec);
            match self.calibration.map(id, &f) {
                Some(p) => (Some((round6(p.u), round6(p.v))), PersonStatus::Ok),
                None => (None, PersonStatus::Uncal),
            }
        };
        PersonEntry {
            person_id: id,
            bbox,
            start,
            start_conf: s.start_conf as f64,
            vec,
            vec_conf: s.vec_conf as f64,
            mapped,
            status,
        }
    }

    /// Calibration candidates from the latest state.
    pub fn click_candidates(&self) -> Vec<ClickCandidate> {
        let Some((state, w, h)) = &self.latest else {
            return Vec::new();
        };
        state
            .persons
            .iter()
            .map(|p| ClickCandidate {
                person_id: p.person_id,
                start_conf: p.start_conf as f32,
                vec_conf: p.vec_conf as f32,
                valid: p.vec != [0.0; 3],
                features: calibration_features(p.start, *w, *h, p.vec),
            })
            .collect()
    }

    /// Pairs a click with the latest state.
    pub fn click(&mut self, u: f64, v: f64, click_ts_ms: u64) -> ClickOutcome {
        let cands = self.click_candidates();
        let ts = self.latest().map(|s| s.timestamp_ms);
        self.calibration.add_click(u, v, click_ts_ms, ts, &cands)
    }

    /// Fits every person with samples at `degree`.
    pub fn fit_all(&mut self, degree: u32) -> Vec<(u64, Result<FitOutcome, FitError>)> {
        let ids: Vec<u64> = self
            .calibration
            .persons()
            .into_iter()
            .filter(|&id| !self.calibration.samples(id).is_empty())
            .collect();
        ids.into_iter()
            .map(|id| (id, self.calibration.fit(id, degree, DEFAULT_RIDGE)))
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log i/o failed: {0}")]
    Io(#[from] std::io::Error),
}

pub const LOG_HEADER: &str = "frame,ts_ms,person_id,bb_x,bb_y,bb_w,bb_h,sx,sy,start_conf,gx,gy,gz,vec_conf,map_u,map_v,status";

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

/// Log rows for one state: persons in order, then the group row.
pub fn state_rows(state: &GroupGazeState) -> Vec<String> {
    let (f, ts) = (state.frame_index, state.timestamp_ms);
    let mut rows = Vec::with_capacity(state.persons.len() + 1);
    for p in &state.persons {
        let (mu, mv) = p.mapped.map_or((String::new(), String::new()), |(u, v)| (f6(u), f6(v)));
        rows.push(format!(
            "{f},{ts},{},{},{},{},{},{},{},{},{},{},{},{},{mu},{mv},{}",
            p.person_id,
            f6(p.bbox.x as f64),
            f6(p.bbox.y as f64),
            f6(p.bbox.w as f64),
            f6(p.bbox.h as f64),
            f6(p.start.0),
            f6(p.start.1),
            f6(p.start_conf),
            f6(p.vec[0]),
            f6(p.vec[1]),
            f6(p.vec[2]),
            f6(p.vec_conf),
            p.status.as_str(),
        ));
    }
    rows.push(match state.group_mean {
        Some((u, v)) => format!("{f},{ts},GROUP,,,,,,,,,,,,{},{},OK", f6(u), f6(v)),
        None => format!("{f},{ts},GROUP,,,,,,,,,,,,,,EMPTY"),
    });
    rows
}

pub fn click_row(frame_index: u64, ts_ms: u64, u: f64, v: f64) -> String {
    format!("{frame_index},{ts_ms},CLICK,,,,,,,,,,,,{},{},EVENT", f6(u), f6(v))
}

/// Appends whole rows to a CSV log and flushes after every frame, so the
/// file never ends in a partial row between frames.
pub struct Recorder {
    file: File,
    rows: u64,
}

impl Recorder {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, LogError> {
        let mut file = File::create(path)?;
        writeln!(file, "{LOG_HEADER}")?;
        file.flush()?;
        Ok(Self { file, rows: 0 })
    }

    fn write_block(&mut self, rows: &[String]) -> Result<(), LogError> {
        let mut buf = String::new();
        for r in rows {
            buf.push_str(r);
            buf.push('\n');
        }
        self.file.write_all(buf.as_bytes())?;
        self.file.flush()?;
        self.rows += rows.len() as u64;
        Ok(())
    }

    pub fn record(&mut self, state: &GroupGazeState) -> Result<(), LogError> {
        self.write_block(&state_rows(state))
    }

    pub fn record_click(&mut self, frame_index: u64, ts_ms: u64, u: f64, v: f64) -> Result<(), LogError> {
        self.write_block(&[click_row(frame_index, ts_ms, u, v)])
    }

    pub fn rows_written(&self) -> u64 {
        self.rows
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClickEvent {
    pub frame_index: u64,
    pub timestamp_ms: u64,
    pub u: f64,
    pub v: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Replay {
    pub states: Vec<GroupGazeState>,
    pub clicks: Vec<ClickEvent>,
    /// Malformed rows that were skipped.
    pub skipped: usize,
}

pub fn replay(path: impl AsRef<Path>) -> Result<Replay, LogError> {
    replay_from(BufReader::new(File::open(path)?))
}

pub fn replay_from(reader: impl BufRead) -> Result<Replay, LogError> {
    let mut out = Replay::default();
    let mut pending: Option<GroupGazeState> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() || (i == 0 && line == LOG_HEADER) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match parse_row(&fields) {
            Some(Row::Person(f, ts, entry)) => {
                let st = pending.get_or_insert_with(|| GroupGazeState::empty(f, ts));
                if st.frame_index != f || st.timestamp_ms != ts {
                    out.skipped += 1;
                    continue;
                }
                st.persons.push(entry);
            }
            Some(Row::Group(f, ts, mean)) => {
                let mut st = pending.take().unwrap_or_else(|| GroupGazeState::empty(f, ts));
                if st.frame_index != f {
                    out.skipped += st.persons.len();
                    st = GroupGazeState::empty(f, ts);
                }
                st.group_mean = mean;
                out.states.push(st);
            }
            Some(Row::Click(c)) => out.clicks.push(c),
            None => out.skipped += 1,
        }
    }
    if let Some(st) = pending {
        out.skipped += st.persons.len();
    }
    if out.skipped > 0 {
        log::warn!("replay skipped {} malformed rows", out.skipped);
    }
    Ok(out)
}

enum Row {
    Person(u64, u64, PersonEntry),
    Group(u64, u64, Option<(f64, f64)>),
    Click(ClickEvent),
}

fn parse_row(f: &[&str]) -> Option<Row> {
    if f.len() != 17 {
        return None;
    }
    let frame: u64 = f[0].parse().ok()?;
    let ts: u64 = f[1].parse().ok()?;
    let num = |s: &str| s.parse::<f64>().ok().filter(|x| x.is_finite());
    let blank = |range: std::ops::Range<usize>| range.into_iter().all(|i| f[i].is_empty());
    match f[2] {
        "GROUP" => {
            if !blank(3..14) {
                return None;
            }
            match f[16] {
                "OK" => Some(Row::Group(frame, ts, Some((num(f[14])?, num(f[15])?)))),
                "EMPTY" if f[14].is_empty() && f[15].is_empty() => Some(Row::Group(frame, ts, None)),
                _ => None,
            }
        }
        "CLICK" => {
            if !blank(3..14) || f[16] != "EVENT" {
                return None;
            }
            Some(Row::Click(ClickEvent {
                frame_index: frame,
                timestamp_ms: ts,
                u: num(f[14])?,
                v: num(f[15])?,
            }))
        }
        id => {
            let person_id: u64 = id.parse().ok()?;
            let status = PersonStatus::parse(f[16])?;
            let mapped = match (status, f[14].is_empty(), f[15].is_empty()) {
                (PersonStatus::Ok, false, false) => Some((num(f[14])?, num(f[15])?)),
                (PersonStatus::Ok, _, _) => return None,
                (_, true, true) => None,
                _ => return None,
            };
            let v: Vec<f64> = f[3..14].iter().map(|s| num(s)).collect::<Option<_>>()?;
            Some(Row::Person(
                frame,
                ts,
                PersonEntry {
                    person_id,
                    bbox: BBox::new(v[0] as f32, v[1] as f32, v[2] as f32, v[3] as f32),
                    start: (v[4], v[5]),
                    start_conf: v[6],
                    vec: [v[7], v[8], v[9]],
                    vec_conf: v[10],
                    mapped,
                    status,
                },
            ))
        }
    }
}
