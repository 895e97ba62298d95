//! Network architectures for the face detector and the gaze estimator.

use crowdgaze_tensor::{BatchNorm, Conv2d, Layer, LeakyMaxBlock, Linear, MaxPool2, Relu, ReluTn, Result, Sequential};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One convolution row of the detector: kernel, depth and stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvRow {
    pub kernel: usize,
    pub depth: usize,
    pub stride: usize,
}

/// Detector layout: conv rows each followed by BN and ReLU-TN, then a
/// single-depth score convolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorArch {
    pub rows: Vec<ConvRow>,
    pub score_kernel: usize,
    pub tn_enabled: bool,
}

impl DetectorArch {
    pub fn table() -> Self {
        let row = |kernel, depth, stride| ConvRow { kernel, depth, stride };
        Self {
            rows: vec![
                row(5, 8, 2),
                row(3, 8, 2),
                row(3, 8, 2),
                row(5, 16, 1),
                row(3, 16, 1),
                row(3, 16, 1),
            ],
            score_kernel: 7,
            tn_enabled: true,
        }
    }

    /// Total downsampling of the score map.
    pub fn stride(&self) -> usize {
        self.rows.iter().map(|r| r.stride).product()
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Sequential<f32>> {
        let mut layers = Vec::new();
        let mut depth = 3;
        for r in &self.rows {
            layers.push(Layer::Conv(Conv2d::new(depth, r.depth, r.kernel, r.stride, rng)?));
            layers.push(Layer::BatchNorm(BatchNorm::new(r.depth)));
            layers.push(Layer::ReluTn(ReluTn::new(self.tn_enabled)));
            depth = r.depth;
        }
        layers.push(Layer::Conv(Conv2d::new(depth, 1, self.score_kernel, 1, rng)?));
        Ok(Sequential::new(layers))
    }
}

impl Default for DetectorArch {
    fn default() -> Self {
        Self::table()
    }
}

/// Gaze network layout: stem conv, ReLU-TN, 2x2 pooling, three stages of
/// leaky-max blocks (each stage downscales once and ends in ReLU-TN), then
/// two fully connected layers ending in the seven outputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GazeArch {
    pub input_size: usize,
    pub stem_depth: usize,
    pub stage_depths: [usize; 3],
    pub blocks_per_stage: usize,
    pub fc_hidden: usize,
    pub tn_enabled: bool,
}

pub const GAZE_INPUT: usize = 100;
pub const GAZE_OUTPUTS: usize = 7;

impl GazeArch {
    pub fn table() -> Self {
        Self {
            input_size: GAZE_INPUT,
            stem_depth: 32,
            stage_depths: [64, 128, 256],
            blocks_per_stage: 3,
            fc_hidden: 512,
            tn_enabled: true,
        }
    }

    /// Reduced depths for CPU training on synthetic data.
    pub fn desk() -> Self {
        Self {
            input_size: GAZE_INPUT,
            stem_depth: 8,
            stage_depths: [16, 16, 32],
            blocks_per_stage: 1,
            fc_hidden: 64,
            tn_enabled: true,
        }
    }

    /// Spatial size entering the fully connected head.
    pub fn final_spatial(&self) -> usize {
        let mut n = self.input_size.div_ceil(2);
        for _ in 0..3 {
            n = n.div_ceil(2);
        }
        n
    }

    pub fn flat_features(&self) -> usize {
        let s = self.final_spatial();
        s * s * self.stage_depths[2]
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Sequential<f32>> {
        let mut layers = vec![
            Layer::Conv(Conv2d::new(1, self.stem_depth, 5, 1, rng)?),
            Layer::ReluTn(ReluTn::new(self.tn_enabled)),
            Layer::MaxPool(MaxPool2::new()),
        ];
        let mut depth = self.stem_depth;
        for &d in &self.stage_depths {
            for b in 0..self.blocks_per_stage {
                let stride = if b == 0 { 2 } else { 1 };
                layers.push(Layer::LeakyMaxBlock(LeakyMaxBlock::new(depth, d, stride, rng)?));
                depth = d;
            }
            layers.push(Layer::ReluTn(ReluTn::new(self.tn_enabled)));
        }
        layers.push(Layer::FullyConnected(Linear::new(self.flat_features(), self.fc_hidden, rng)));
        layers.push(Layer::Relu(Relu::new()));
        layers.push(Layer::FullyConnected(Linear::new(self.fc_hidden, GAZE_OUTPUTS, rng)));
        Ok(Sequential::new(layers))
    }
}

impl Default for GazeArch {
    fn default() -> Self {
        Self::table()
    }
}
