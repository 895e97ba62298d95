//! Fully convolutional face detection over a packed six-level image pyramid.

use std::path::Path;

use crowdgaze_tensor::loss::weighted_bce_with_logits;
use crowdgaze_tensor::{Adam, AdamConfig, Mode, Sequential, Tensor, TensorError, WeightFile, WeightFileError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox};
use crate::image::{Frame, Planes};
use crate::nets::DetectorArch;
use crate::synth::LabeledFrame;

pub const PYRAMID_LEVELS: usize = 6;
/// Each level is `floor(prev * 5 / 6)` of the previous one.
pub const PYRAMID_NUM: usize = 5;
pub const PYRAMID_DEN: usize = 6;
/// Levels with a side shorter than this are not emitted.
pub const MIN_LEVEL_SIZE: usize = 16;
pub const CANVAS_GAP: usize = 16;
/// Tile offsets are multiples of the score-map stride.
pub const CANVAS_ALIGN: usize = 8;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("no detector weights loaded")]
    NoWeights,
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Weights(#[from] WeightFileError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidLevel {
    /// `width / original width`.
    pub scale_x: f64,
    /// `height / original height`.
    pub scale_y: f64,
    pub width: usize,
    pub height: usize,
    /// Top-left corner of this level's tile in the canvas.
    pub offset: (usize, usize),
}

impl PyramidLevel {
    pub fn to_original(&self, x: f64, y: f64) -> (f64, f64) {
        (x / self.scale_x, y / self.scale_y)
    }

    pub fn from_original(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale_x, y * self.scale_y)
    }

    /// Whether canvas point `(x, y)` lies on this level's tile.
    pub fn tile_contains(&self, x: f64, y: f64) -> bool {
        let (ox, oy) = (self.offset.0 as f64, self.offset.1 as f64);
        x >= ox && x < ox + self.width as f64 && y >= oy && y < oy + self.height as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidPlan {
    pub source_width: usize,
    pub source_height: usize,
    pub levels: Vec<PyramidLevel>,
    pub canvas_width: usize,
    pub canvas_height: usize,
    /// Fewer levels than requested because the frame is too small.
    pub truncated: bool,
}

fn align_up(v: usize) -> usize {
    v.div_ceil(CANVAS_ALIGN) * CANVAS_ALIGN
}

/// Level sizes and canvas layout for a `width x height` frame.
///
/// Level 0 sits at the origin; the smaller levels are stacked top to bottom
/// in columns to its right, starting a new column when the next tile would
/// overflow the level-0 height.
pub fn plan_pyramid(width: usize, height: usize, max_levels: usize) -> PyramidPlan {
    let mut sizes = vec![(width, height)];
    let mut truncated = false;
    while sizes.len() < max_levels.max(1) {
        let (w, h) = *sizes.last().expect("level 0 exists");
        let next = (w * PYRAMID_NUM / PYRAMID_DEN, h * PYRAMID_NUM / PYRAMID_DEN);
        if next.0 < MIN_LEVEL_SIZE || next.1 < MIN_LEVEL_SIZE {
            truncated = true;
            break;
        }
        sizes.push(next);
    }
    let mut levels = Vec::with_capacity(sizes.len());
    let limit = height;
    let (mut col_x, mut col_w, mut y) = (align_up(width + CANVAS_GAP), 0usize, 0usize);
    let (mut canvas_w, mut canvas_h) = (width, height);
    for (i, &(w, h)) in sizes.iter().enumerate() {
        let offset = if i == 0 {
            (0, 0)
        } else {
            if y > 0 && y + h > limit {
                col_x = align_up(col_x + col_w + CANVAS_GAP);
                col_w = 0;
                y = 0;
            }
            let at = (col_x, y);
            col_w = col_w.max(w);
            y = align_up(y + h + CANVAS_GAP);
            at
        };
        canvas_w = canvas_w.max(offset.0 + w);
        canvas_h = canvas_h.max(offset.1 + h);
        levels.push(PyramidLevel {
            scale_x: w as f64 / width.max(1) as f64,
            scale_y: h as f64 / height.max(1) as f64,
            width: w,
            height: h,
            offset,
        });
    }
    PyramidPlan {
        source_width: width,
        source_height: height,
        levels,
        canvas_width: canvas_w,
        canvas_height: canvas_h,
        truncated,
    }
}

/// A pyramid plan plus its rendered canvas.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub plan: PyramidPlan,
    pub canvas: Planes,
}

/// Resamples `image` into every level and packs the levels into one canvas;
/// uncovered canvas pixels are zero.
pub fn build_pyramid(image: &Planes, max_levels: usize) -> Pyramid {
    let plan = plan_pyramid(image.width, image.height, max_levels);
    let mut canvas = Planes::zeros(image.channels, plan.canvas_width, plan.canvas_height);
    let mut prev = image.clone();
    for (i, level) in plan.levels.iter().enumerate() {
        let img = if i == 0 {
            image.clone()
        } else {
            prev.resize(level.width, level.height)
        };
        let n_canvas = canvas.width * canvas.height;
        let n_img = img.width * img.height;
        for c in 0..img.channels {
            for y in 0..img.height {
                let src = &img.data[c * n_img + y * img.width..c * n_img + (y + 1) * img.width];
                let start = c * n_canvas + (level.offset.1 + y) * canvas.width + level.offset.0;
                canvas.data[start..start + img.width].copy_from_slice(src);
            }
        }
        prev = img;
    }
    Pyramid { plan, canvas }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Box in original frame pixels.
    pub bbox: BBox,
    /// Raw network score (a logit).
    pub score: f32,
    pub level: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub score_threshold: f32,
    pub nms_iou_threshold: f32,
    pub upscale_factor: f64,
    /// Candidate box edge in level pixels.
    pub window_size: f64,
    pub pyramid_levels: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.0,
            nms_iou_threshold: 0.4,
            upscale_factor: 1.0,
            window_size: 40.0,
            pyramid_levels: PYRAMID_LEVELS,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        if !(self.upscale_factor >= 1.0 && self.upscale_factor.is_finite()) {
            return Err(DetectError::InvalidConfig(format!(
                "upscale factor must be >= 1, got {}",
                self.upscale_factor
            )));
        }
        if !(self.nms_iou_threshold > 0.0 && self.nms_iou_threshold < 1.0) {
            return Err(DetectError::InvalidConfig(format!(
                "NMS IoU threshold must lie in (0, 1), got {}",
                self.nms_iou_threshold
            )));
        }
        if !(self.window_size > 0.0) || self.pyramid_levels == 0 {
            return Err(DetectError::InvalidConfig("window size and level count must be positive".into()));
        }
        Ok(())
    }
}

/// Greedy non-maximum suppression by descending score; equal scores keep
/// input order.
pub fn nms(dets: &[Detection], iou_threshold: f32) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut keep: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if keep.iter().all(|k| iou(&k.bbox, &d.bbox) < iou_threshold) {
            keep.push(d);
        }
    }
    keep
}

/// Score-map size for a canvas: `ceil(n / 2)` per stride-2 stage.
pub fn score_map_dim(n: usize, arch: &DetectorArch) -> usize {
    arch.rows.iter().fold(n, |n, r| n.div_ceil(r.stride))
}

/// Maps every score-map cell above `threshold` to a candidate box.
pub fn decode_candidates(
    plan: &PyramidPlan,
    scores: &[f32],
    map_w: usize,
    map_h: usize,
    stride: usize,
    window: f64,
    threshold: f32,
    upscale: (f64, f64),
) -> Vec<Detection> {
    let mut out = Vec::new();
    for cy in 0..map_h {
        for cx in 0..map_w {
            let score = scores[cy * map_w + cx];
            if !(score > threshold) {
                continue;
            }
            let px = (cx as f64 + 0.5) * stride as f64;
            let py = (cy as f64 + 0.5) * stride as f64;
            let Some((li, level)) = plan.levels.iter().enumerate().find(|(_, l)| l.tile_contains(px, py)) else {
                continue;
            };
            let lx = px - level.offset.0 as f64;
            let ly = py - level.offset.1 as f64;
            let (x0, y0) = level.to_original(lx - window / 2.0, ly - window / 2.0);
            let (x1, y1) = level.to_original(lx + window / 2.0, ly + window / 2.0);
            out.push(Detection {
                bbox: BBox::new(
                    (x0 / upscale.0) as f32,
                    (y0 / upscale.1) as f32,
                    ((x1 - x0) / upscale.0) as f32,
                    ((y1 - y0) / upscale.1) as f32,
                ),
                score,
                level: li,
            });
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct FaceDetector {
    pub arch: DetectorArch,
    pub net: Sequential<f32>,
    pub config: DetectorConfig,
}

impl FaceDetector {
    pub fn random(arch: DetectorArch, seed: u64) -> Result<Self, DetectError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = arch.build(&mut rng)?;
        Ok(Self {
            arch,
            net,
            config: DetectorConfig::default(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DetectError> {
        Ok(self.net.to_weight_file().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DetectError> {
        Self::from_weight_file(&WeightFile::load(path)?)
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self, DetectError> {
        let mut det = Self::random(DetectorArch::table(), 0)?;
        det.net.load_weight_file(file)?;
        Ok(det)
    }

    /// Upscaled frame planes and the effective per-axis factor.
    fn input_planes(&self, frame: &Frame) -> (Planes, (f64, f64)) {
        let planes = frame.to_planes();
        let u = self.config.upscale_factor;
        if u == 1.0 || frame.is_empty() {
            return (planes, (1.0, 1.0));
        }
        let w = ((frame.width as f64 * u).round() as usize).max(1);
        let h = ((frame.height as f64 * u).round() as usize).max(1);
        let factor = (w as f64 / frame.width as f64, h as f64 / frame.height as f64);
        (planes.resize(w, h), factor)
    }

    /// Pyramid of the (upscaled) frame and the network score map over it.
    pub fn score_map(&self, frame: &Frame) -> Result<(Pyramid, Tensor<f32>, (f64, f64)), DetectError> {
        self.config.validate()?;
        let (planes, factor) = self.input_planes(frame);
        let pyr = build_pyramid(&planes, self.config.pyramid_levels);
        let x = Tensor::new(vec![1, 3, pyr.canvas.height, pyr.canvas.width], pyr.canvas.data.clone())?;
        let scores = self.net.infer(&x)?;
        Ok((pyr, scores, factor))
    }

    /// All candidates above `threshold`, before suppression.
    pub fn candidates(&self, frame: &Frame, threshold: f32) -> Result<Vec<Detection>, DetectError> {
        if frame.is_empty() {
            return Ok(Vec::new());
        }
        let (pyr, scores, factor) = self.score_map(frame)?;
        let (_, _, mh, mw) = scores.dims4("score map")?;
        Ok(decode_candidates(
            &pyr.plan,
            scores.data(),
            mw,
            mh,
            self.arch.stride(),
            self.config.window_size,
            threshold,
            factor,
        ))
    }

    pub fn detect(&self, frame: &Frame) -> Result<Vec<Detection>, DetectError> {
        let cands = self.candidates(frame, self.config.score_threshold)?;
        Ok(nms(&cands, self.config.nms_iou_threshold))
    }
}

/// Per-cell training targets: label, and weight (0 marks ignored cells).
#[derive(Clone, Debug, PartialEq)]
pub struct CellTargets {
    pub labels: Vec<f32>,
    pub weights: Vec<f32>,
    pub positives: usize,
}

/// Face size matched against the square window.
fn face_size(b: &BBox) -> f64 {
    ((b.w * b.h) as f64).sqrt()
}

/// Assigns each face to the cell containing its centre at the level whose
/// scale best fits the window; neighbouring cells and adjacent levels are
/// ignored. `positive_weight` is the weight of one positive cell relative to
/// a negative one.
pub fn cell_targets(
    plan: &PyramidPlan,
    faces: &[BBox],
    map_w: usize,
    map_h: usize,
    stride: usize,
    window: f64,
    positive_weight: f32,
) -> CellTargets {
    let n = map_w * map_h;
    let mut labels = vec![0.0f32; n];
    let mut weights = vec![1.0f32; n];
    let mut positive = vec![false; n];
    let tol = 1.2f64.sqrt().ln();
    let mut mark = |lvl: &PyramidLevel, cx: f64, cy: f64, radius: i64, pos: bool| {
        let (lx, ly) = lvl.from_original(cx, cy);
        let gx = ((lx + lvl.offset.0 as f64) / stride as f64).floor() as i64;
        let gy = ((ly + lvl.offset.1 as f64) / stride as f64).floor() as i64;
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (x, y) = (gx + dx, gy + dy);
                if x < 0 || y < 0 || x >= map_w as i64 || y >= map_h as i64 {
                    continue;
                }
                let i = y as usize * map_w + x as usize;
                if pos && dx == 0 && dy == 0 {
                    positive[i] = true;
                } else if !positive[i] {
                    weights[i] = 0.0;
                }
            }
        }
    };
    for b in faces {
        let (cx, cy) = b.center();
        let size = face_size(b);
        let fit: Vec<f64> = plan
            .levels
            .iter()
            .map(|l| (size * (l.scale_x * l.scale_y).sqrt() / window).ln().abs())
            .collect();
        let best = fit.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i);
        for (li, lvl) in plan.levels.iter().enumerate() {
            let pos = Some(li) == best && fit[li] <= tol + 1e-9;
            let near = best.is_some_and(|b| b.abs_diff(li) <= 1) || fit[li] <= 2.0 * tol;
            if pos {
                mark(lvl, cx as f64, cy as f64, 1, true);
            } else if near {
                mark(lvl, cx as f64, cy as f64, 1, false);
            }
        }
    }
    let mut positives = 0;
    for i in 0..n {
        if positive[i] {
            labels[i] = 1.0;
            weights[i] = positive_weight;
            positives += 1;
        }
    }
    CellTargets {
        labels,
        weights,
        positives,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    /// Canvases per optimisation step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub positive_weight: f32,
    pub gradient_centralization: bool,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 4,
            learning_rate: 2e-3,
            positive_weight: 20.0,
            gradient_centralization: true,
            seed: 5,
        }
    }
}

/// Pyramid canvas tensor and cell targets for one labeled frame.
fn training_example(
    arch: &DetectorArch,
    cfg: &DetectorConfig,
    frame: &LabeledFrame,
    positive_weight: f32,
) -> (Pyramid, CellTargets, usize, usize) {
    let pyr = build_pyramid(&frame.frame.to_planes(), cfg.pyramid_levels);
    let mw = score_map_dim(pyr.canvas.width, arch);
    let mh = score_map_dim(pyr.canvas.height, arch);
    let t = cell_targets(&pyr.plan, &frame.boxes(), mw, mh, arch.stride(), cfg.window_size, positive_weight);
    (pyr, t, mw, mh)
}

/// Trains a detector on labeled frames of a single common size.
pub fn train_detector(
    arch: DetectorArch,
    frames: &[LabeledFrame],
    cfg: &DetectorTrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<FaceDetector, DetectError> {
    let mut det = FaceDetector::random(arch, cfg.seed)?;
    let examples: Vec<_> = frames
        .iter()
        .map(|f| training_example(&det.arch, &det.config, f, cfg.positive_weight))
        .collect();
    let mut opt = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        gradient_centralization: cfg.gradient_centralization,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xDE7);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let bs = cfg.batch_size.max(1);
    let steps_per_epoch = examples.len().div_ceil(bs);
    let total = (steps_per_epoch * cfg.epochs).max(1);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(bs) {
            let first = &examples[chunk[0]];
            let (ch, h, w) = (first.0.canvas.channels, first.0.canvas.height, first.0.canvas.width);
            let mut data = Vec::with_capacity(chunk.len() * ch * h * w);
            let mut labels = Vec::new();
            let mut weights = Vec::new();
            for &i in chunk {
                let (pyr, t, _, _) = &examples[i];
                assert_eq!((pyr.canvas.width, pyr.canvas.height), (w, h), "training frames share one size");
                data.extend_from_slice(&pyr.canvas.data);
                labels.extend_from_slice(&t.labels);
                weights.extend_from_slice(&t.weights);
            }
            let x = Tensor::new(vec![chunk.len(), ch, h, w], data)?;
            let out = det.net.forward(&x, Mode::Train)?;
            let norm: f32 = weights.iter().sum::<f32>().max(1.0);
            let weights: Vec<f32> = weights.iter().map(|w| w / norm).collect();
            let (loss, grad) = weighted_bce_with_logits(&out, &labels, &weights)?;
            det.net.zero_grad();
            det.net.backward_params(&grad)?;
            opt.config.learning_rate = crate::gaze::cosine_lr(cfg.learning_rate, step, total);
            opt.step(&mut det.net)?;
            epoch_loss += loss as f64;
            step += 1;
        }
        det.net.clear_cache();
        progress(epoch, epoch_loss / steps_per_epoch.max(1) as f64);
    }
    Ok(det)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionEval {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Greedy matching of detections (by score) to truth boxes at IoU >= `min_iou`.
pub fn match_detections(dets: &[Detection], truth: &[BBox], min_iou: f32) -> (usize, usize, usize) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut used = vec![false; truth.len()];
    let mut tp = 0;
    for i in order {
        let best = truth
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, t)| (j, iou(&dets[i].bbox, t)))
            .filter(|&(_, v)| v >= min_iou)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((j, _)) = best {
            used[j] = true;
            tp += 1;
        }
    }
    (tp, dets.len() - tp, truth.len() - tp)
}

pub fn evaluate_detector(det: &FaceDetector, frames: &[LabeledFrame]) -> Result<DetectionEval, DetectError> {
    let mut e = DetectionEval::default();
    for f in frames {
        let dets = det.detect(&f.frame)?;
        let (tp, fp, fn_) = match_detections(&dets, &f.boxes(), 0.5);
        e.true_positives += tp;
        e.false_positives += fp;
        e.false_negatives += fn_;
    }
    let found = e.true_positives + e.false_positives;
    let real = e.true_positives + e.false_negatives;
    e.precision = if found == 0 { 1.0 } else { e.true_positives as f64 / found as f64 };
    e.recall = if real == 0 { 1.0 } else { e.true_positives as f64 / real as f64 };
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_widths_follow_recursive_floor() {
        let plan = plan_pyramid(600, 450, 6);
        let widths: Vec<usize> = plan.levels.iter().map(|l| l.width).collect();
        assert_eq!(widths, vec![600, 500, 416, 346, 288, 240]);
        assert!(!plan.truncated);
    }

    #[test]
    fn one_pixel_frame_gives_single_truncated_level() {
        let plan = plan_pyramid(1, 1, 6);
        assert_eq!(plan.levels.len(), 1);
        assert!(plan.truncated);
    }

    #[test]
    fn level_point_maps_back_by_exact_ratio() {
        let plan = plan_pyramid(600, 600, 6);
        assert_eq!(plan.levels[1].width, 500);
        assert_eq!(plan.levels[1].to_original(100.0, 100.0), (120.0, 120.0));
    }

    #[test]
    fn tiles_are_disjoint_and_aligned() {
        let plan = plan_pyramid(192, 144, 6);
        for (i, a) in plan.levels.iter().enumerate() {
            assert_eq!(a.offset.0 % CANVAS_ALIGN, 0);
            assert_eq!(a.offset.1 % CANVAS_ALIGN, 0);
            assert!(a.offset.0 + a.width <= plan.canvas_width);
            assert!(a.offset.1 + a.height <= plan.canvas_height);
            for b in &plan.levels[i + 1..] {
                let ra = BBox::new(a.offset.0 as f32, a.offset.1 as f32, a.width as f32, a.height as f32);
                let rb = BBox::new(b.offset.0 as f32, b.offset.1 as f32, b.width as f32, b.height as f32);
                assert!(ra.intersection(&rb).is_none());
            }
        }
    }

    #[test]
    fn upscaled_candidate_maps_back_by_division() {
        let plan = plan_pyramid(200, 200, 1);
        // Cell (4, 4) has centre (36, 36): box (16, 16, 40, 40) upscaled.
        let mut scores = vec![-1.0; 25 * 25];
        scores[4 * 25 + 4] = 1.0;
        let d = decode_candidates(&plan, &scores, 25, 25, 8, 40.0, 0.0, (2.0, 2.0));
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].bbox, BBox::new(8.0, 8.0, 20.0, 20.0));
    }

    #[test]
    fn nms_keeps_best_of_duplicates() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let dets = [
            Detection {
                bbox: b,
                score: 0.8,
                level: 0,
            },
            Detection {
                bbox: b,
                score: 0.9,
                level: 0,
            },
        ];
        let kept = nms(&dets, 0.4);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }
}
