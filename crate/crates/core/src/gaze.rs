//! Face crops, fixed-size padded batches and the seven-output gaze network.

use std::path::Path;

use crowdgaze_tensor::loss::{sigmoid, weighted_bce_with_logits, weighted_mse};
use crowdgaze_tensor::{Adam, AdamConfig, Layer, Mode, Sequential, Tensor, TensorError, WeightFile, WeightFileError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::image::{luma, resample_region, Frame};
use crate::nets::{GazeArch, GAZE_OUTPUTS};
use crate::synth::GazeExample;

pub const CROP_SIZE: usize = 100;
const CROP_PIXELS: usize = CROP_SIZE * CROP_SIZE;

#[derive(Debug, Error)]
pub enum GazeError {
    #[error("crop box {0:?} does not overlap the frame")]
    EmptyCrop(BBox),
    #[error("{count} crops do not fit a batch of {capacity}")]
    BatchOverflow { count: usize, capacity: usize },
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
    #[error("no gaze weights loaded")]
    NoWeights,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Weights(#[from] WeightFileError),
}

/// A face resampled to the network input.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceCrop {
    /// `100 x 100` luma in `[0, 1]`, row-major.
    pub pixels: Vec<f32>,
    /// The frame region the crop was taken from, after clamping.
    pub source_bbox: BBox,
    pub person_slot: usize,
}

/// Clamps `bbox` to the frame and resamples it bilinearly to a
/// `100 x 100` luma crop.
pub fn extract_crop(frame: &Frame, bbox: &BBox) -> Result<FaceCrop, GazeError> {
    let region = bbox.clamp_to(frame.width, frame.height).ok_or(GazeError::EmptyCrop(*bbox))?;
    let gray: Vec<f32> = frame.rgb.chunks_exact(3).map(|p| luma(p[0], p[1], p[2]) / 255.0).collect();
    let pixels = resample_region(&gray, frame.width, frame.height, &region, CROP_SIZE, CROP_SIZE);
    Ok(FaceCrop {
        pixels,
        source_bbox: region,
        person_slot: 0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub batch_size: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self { batch_size: 40 }
    }
}

/// A `(B, 1, 100, 100)` input tensor plus which slots hold real faces.
#[derive(Clone, Debug)]
pub struct Batch {
    pub tensor: Tensor<f32>,
    pub mask: Vec<bool>,
}

/// Packs crops into slots `0..N` and fills the rest with black images.
pub fn make_batch(crops: &[&[f32]], batch_size: usize) -> Result<Batch, GazeError> {
    if batch_size == 0 {
        return Err(GazeError::InvalidBatchSize);
    }
    if crops.len() > batch_size {
        return Err(GazeError::BatchOverflow {
            count: crops.len(),
            capacity: batch_size,
        });
    }
    let mut tensor = Tensor::zeros(&[batch_size, 1, CROP_SIZE, CROP_SIZE]);
    for (i, c) in crops.iter().enumerate() {
        assert_eq!(c.len(), CROP_PIXELS, "crop must be 100x100");
        tensor.sample_mut(i).copy_from_slice(c);
    }
    let mask = (0..batch_size).map(|i| i < crops.len()).collect();
    Ok(Batch { tensor, mask })
}

/// Parsed network output for one face.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    /// Gaze start in crop-normalized coordinates.
    pub start: (f32, f32),
    pub start_conf: f32,
    /// Unit gaze vector; all zeros when `valid` is false.
    pub vec: [f32; 3],
    pub vec_conf: f32,
    pub valid: bool,
    pub person_id: Option<u64>,
    pub frame_index: u64,
}

impl GazeSample {
    pub fn invalid() -> Self {
        Self {
            start: (0.0, 0.0),
            start_conf: 0.0,
            vec: [0.0; 3],
            vec_conf: 0.0,
            valid: false,
            person_id: None,
            frame_index: 0,
        }
    }

    /// Gaze start converted from crop-normalized to frame pixels.
    pub fn start_in_frame(&self, source: &BBox) -> (f32, f32) {
        (source.x + self.start.0 * source.w, source.y + self.start.1 * source.h)
    }
}

/// Interprets `(sx, sy, start_conf, gx, gy, gz, vec_conf)`.
pub fn parse_output(raw: &[f32]) -> GazeSample {
    assert_eq!(raw.len(), GAZE_OUTPUTS, "gaze output width");
    if raw.iter().any(|v| !v.is_finite()) {
        return GazeSample::invalid();
    }
    let v = [raw[3] as f64, raw[4] as f64, raw[5] as f64];
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let valid = n > 0.0 && n.is_finite();
    let vec = if valid {
        [(v[0] / n) as f32, (v[1] / n) as f32, (v[2] / n) as f32]
    } else {
        [0.0; 3]
    };
    GazeSample {
        start: (raw[0], raw[1]),
        start_conf: sigmoid(raw[2]),
        vec,
        vec_conf: sigmoid(raw[6]),
        valid,
        person_id: None,
        frame_index: 0,
    }
}

/// The gaze network with its architecture description.
#[derive(Clone, Debug)]
pub struct GazeEstimator {
    pub arch: GazeArch,
    pub net: Sequential<f32>,
}

impl GazeEstimator {
    pub fn random(arch: GazeArch, seed: u64) -> Result<Self, GazeError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = arch.build(&mut rng)?;
        Ok(Self { arch, net })
    }

    /// Runs the network once on the whole batch and parses occupied slots.
    pub fn estimate(&self, batch: &Batch) -> Result<Vec<GazeSample>, GazeError> {
        let out = self.net.infer(&batch.tensor)?;
        Ok(batch
            .mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| parse_output(out.sample(i)))
            .collect())
    }

    /// Estimates any number of crops in `ceil(N / B)` fixed-size batches.
    pub fn estimate_crops(&self, crops: &[&[f32]], batch_size: usize) -> Result<Vec<GazeSample>, GazeError> {
        if batch_size == 0 {
            return Err(GazeError::InvalidBatchSize);
        }
        let mut out = Vec::with_capacity(crops.len());
        for chunk in crops.chunks(batch_size) {
            out.extend(self.estimate(&make_batch(chunk, batch_size)?)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GazeError> {
        Ok(self.net.to_weight_file().save(path)?)
    }

    /// Loads weights, picking whichever known layout matches the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GazeError> {
        let file = WeightFile::load(path)?;
        Self::from_weight_file(&file)
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self, GazeError> {
        let mut last = None;
        for arch in [GazeArch::desk(), GazeArch::table()] {
            let mut est = Self::random(arch, 0)?;
            match est.net.load_weight_file(file) {
                Ok(()) => return Ok(est),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one layout tried").into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gradient_centralization: bool,
    pub weight_centralization: bool,
    pub seed: u64,
    /// Loss weights for the start and vector regressions.
    pub start_weight: f64,
    pub vec_weight: f64,
    pub conf_weight: f64,
    /// Error at which the confidence target drops to `1/e`: crop-normalized
    /// distance for the start and radians for the vector.
    pub start_conf_scale: f64,
    pub vec_conf_scale: f64,
}

impl Default for GazeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            learning_rate: 2e-3,
            gradient_centralization: true,
            weight_centralization: false,
            seed: 11,
            start_weight: 1.0,
            vec_weight: 10.0,
            conf_weight: 0.1,
            start_conf_scale: 0.1,
            vec_conf_scale: 0.1,
        }
    }
}

/// Mean errors over a labeled set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GazeEval {
    pub mean_angle_deg: f64,
    pub mean_start_err: f64,
    pub mean_start_conf: f64,
    pub mean_vec_conf: f64,
    pub blank_vec_conf: f64,
    pub count: usize,
}

pub fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

pub fn evaluate_gaze(est: &GazeEstimator, examples: &[GazeExample], batch_size: usize) -> Result<GazeEval, GazeError> {
    let crops: Vec<&[f32]> = examples.iter().map(|e| e.pixels.as_slice()).collect();
    let samples = est.estimate_crops(&crops, batch_size)?;
    let mut eval = GazeEval::default();
    let mut blanks = 0usize;
    for (s, e) in samples.iter().zip(examples) {
        if !e.has_face {
            eval.blank_vec_conf += s.vec_conf as f64;
            blanks += 1;
            continue;
        }
        let v = s.vec.map(f64::from);
        eval.mean_angle_deg += if s.valid { angle_deg(v, e.gaze) } else { 180.0 };
        eval.mean_start_err += ((s.start.0 as f64 - e.start.0).powi(2) + (s.start.1 as f64 - e.start.1).powi(2)).sqrt();
        eval.mean_start_conf += s.start_conf as f64;
        eval.mean_vec_conf += s.vec_conf as f64;
        eval.count += 1;
    }
    let n = eval.count.max(1) as f64;
    eval.mean_angle_deg /= n;
    eval.mean_start_err /= n;
    eval.mean_start_conf /= n;
    eval.mean_vec_conf /= n;
    eval.blank_vec_conf /= blanks.max(1) as f64;
    Ok(eval)
}

/// Loss and output gradient for one training batch.
fn gaze_loss(out: &Tensor<f32>, batch: &[&GazeExample], cfg: &GazeTrainConfig) -> Result<(f64, Tensor<f32>), GazeError> {
    let n = batch.len();
    let mut target = vec![0.0f32; n * GAZE_OUTPUTS];
    let mut weight = vec![0.0f32; n * GAZE_OUTPUTS];
    let mut conf_logits = Tensor::zeros(&[n, 2]);
    let mut conf_target = vec![0.0f32; n * 2];
    let conf_w = vec![1.0f32; n * 2];
    for (i, e) in batch.iter().enumerate() {
        let o = out.sample(i);
        conf_logits.sample_mut(i).copy_from_slice(&[o[2], o[6]]);
        if !e.has_face {
            continue;
        }
        let t = &mut target[i * GAZE_OUTPUTS..(i + 1) * GAZE_OUTPUTS];
        let w = &mut weight[i * GAZE_OUTPUTS..(i + 1) * GAZE_OUTPUTS];
        t[0] = e.start.0 as f32;
        t[1] = e.start.1 as f32;
        t[3] = e.gaze[0] as f32;
        t[4] = e.gaze[1] as f32;
        t[5] = e.gaze[2] as f32;
        w[0] = cfg.start_weight as f32;
        w[1] = cfg.start_weight as f32;
        w[3] = cfg.vec_weight as f32;
        w[4] = cfg.vec_weight as f32;
        w[5] = cfg.vec_weight as f32;
        // Confidence targets follow the detached current errors.
        let ds = ((o[0] as f64 - e.start.0).powi(2) + (o[1] as f64 - e.start.1).powi(2)).sqrt();
        let dv = angle_deg([o[3] as f64, o[4] as f64, o[5] as f64], e.gaze).to_radians();
        conf_target[2 * i] = (-ds / cfg.start_conf_scale).exp() as f32;
        conf_target[2 * i + 1] = (-dv / cfg.vec_conf_scale).exp() as f32;
    }
    let norm = n as f32;
    let (reg_loss, mut grad) = weighted_mse(out, &target, &weight, norm)?;
    let (conf_loss, conf_grad) = weighted_bce_with_logits(&conf_logits, &conf_target, &conf_w)?;
    let cw = cfg.conf_weight as f32 / norm;
    for i in 0..n {
        let g = grad.sample_mut(i);
        g[2] += cw * conf_grad.sample(i)[0];
        g[6] += cw * conf_grad.sample(i)[1];
    }
    Ok(((reg_loss + cw * conf_loss) as f64, grad))
}

/// Starts the regression outputs at the label means with a small output
/// layer, so early steps do not saturate the hidden units.
fn init_output_bias(net: &mut Sequential<f32>, train: &[GazeExample]) {
    let faces: Vec<&GazeExample> = train.iter().filter(|e| e.has_face).collect();
    if faces.is_empty() {
        return;
    }
    let n = faces.len() as f64;
    let mut mean = [0.0f64; GAZE_OUTPUTS];
    for e in &faces {
        mean[0] += e.start.0 / n;
        mean[1] += e.start.1 / n;
        for k in 0..3 {
            mean[3 + k] += e.gaze[k] / n;
        }
    }
    if let Some(Layer::FullyConnected(fc)) = net.layers.last_mut() {
        fc.weight.value.data_mut().iter_mut().for_each(|w| *w *= 0.05);
        for (b, m) in fc.bias.value.data_mut().iter_mut().zip(mean) {
            *b = m as f32;
        }
    }
}

/// Trains a fresh network of layout `arch` on `train`.
pub fn train_gaze(
    arch: GazeArch,
    train: &[GazeExample],
    cfg: &GazeTrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<GazeEstimator, GazeError> {
    let mut est = GazeEstimator::random(arch, cfg.seed)?;
    init_output_bias(&mut est.net, train);
    let mut opt = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        gradient_centralization: cfg.gradient_centralization,
        weight_centralization: cfg.weight_centralization,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size.max(1));
    let total = (steps_per_epoch * cfg.epochs).max(1);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let examples: Vec<&GazeExample> = idx.iter().map(|&i| &train[i]).collect();
            let crops: Vec<&[f32]> = examples.iter().map(|e| e.pixels.as_slice()).collect();
            let batch = make_batch(&crops, crops.len())?;
            let out = est.net.forward(&batch.tensor, Mode::Train)?;
            let (loss, grad) = gaze_loss(&out, &examples, cfg)?;
            est.net.zero_grad();
            est.net.backward_params(&grad)?;
            opt.config.learning_rate = cosine_lr(cfg.learning_rate, step, total);
            opt.step(&mut est.net)?;
            epoch_loss += loss;
            step += 1;
        }
        est.net.clear_cache();
        progress(epoch, epoch_loss / steps_per_epoch as f64);
    }
    Ok(est)
}

/// Cosine decay from `base` towards zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let p = step as f64 / total.max(1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}
