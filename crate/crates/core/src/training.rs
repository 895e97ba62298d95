//! Fixed-seed training of both networks on synthetic corpora.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{evaluate_detector, train_detector, DetectError, DetectionEval, DetectorTrainConfig, FaceDetector};
use crate::gaze::{evaluate_gaze, train_gaze, GazeError, GazeEstimator, GazeEval, GazeTrainConfig};
use crate::nets::{DetectorArch, GazeArch};
use crate::synth::{gen_detection_corpus, gen_gaze_corpus};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecipe {
    pub detector_frames: usize,
    pub faces_per_frame: (usize, usize),
    pub detector_seed: u64,
    pub detector: DetectorTrainConfig,
    pub gaze_crops: usize,
    pub gaze_eval_crops: usize,
    pub gaze_seed: u64,
    pub gaze_eval_seed: u64,
    pub gaze_arch: GazeArch,
    pub gaze: GazeTrainConfig,
}

impl Default for TrainingRecipe {
    fn default() -> Self {
        Self {
            detector_frames: 500,
            faces_per_frame: (1, 3),
            detector_seed: 1,
            detector: DetectorTrainConfig {
                epochs: 10,
                ..Default::default()
            },
            gaze_crops: 12000,
            gaze_eval_crops: 500,
            gaze_seed: 1,
            gaze_eval_seed: 2,
            gaze_arch: GazeArch::desk(),
            gaze: GazeTrainConfig {
                epochs: 14,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error(transparent)]
    Detector(#[from] DetectError),
    #[error(transparent)]
    Gaze(#[from] GazeError),
}

#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub detector: FaceDetector,
    pub estimator: GazeEstimator,
    /// Held-out detection quality at the default threshold.
    pub detector_eval: DetectionEval,
    /// Held-out gaze quality on a separately seeded corpus.
    pub gaze_eval: GazeEval,
    pub detector_time: Duration,
    pub gaze_time: Duration,
}

/// Progress callback arguments: network name, epoch, mean loss.
pub fn train_models(recipe: &TrainingRecipe, mut progress: impl FnMut(&str, usize, f64)) -> Result<TrainedModels, TrainingError> {
    let t = Instant::now();
    let corpus = gen_detection_corpus(
        recipe.detector_frames,
        recipe.faces_per_frame.0..=recipe.faces_per_frame.1,
        recipe.detector_seed,
    );
    let detector = train_detector(DetectorArch::table(), &corpus.train, &recipe.detector, |e, l| {
        progress("detector", e, l)
    })?;
    let detector_eval = evaluate_detector(&detector, &corpus.test)?;
    let detector_time = t.elapsed();

    let t = Instant::now();
    let train = gen_gaze_corpus(recipe.gaze_crops, recipe.gaze_seed);
    let estimator = train_gaze(recipe.gaze_arch.clone(), &train, &recipe.gaze, |e, l| progress("gaze", e, l))?;
    drop(train);
    let held_out = gen_gaze_corpus(recipe.gaze_eval_crops, recipe.gaze_eval_seed);
    let gaze_eval = evaluate_gaze(&estimator, &held_out, 40)?;
    let gaze_time = t.elapsed();
    Ok(TrainedModels {
        detector,
        estimator,
        detector_eval,
        gaze_eval,
        detector_time,
        gaze_time,
    })
}
