//! Corpus files: one PNG per frame or crop plus a `labels.csv` sidecar.
//!
//! Detection frames are 8-bit RGB; gaze crops are 16-bit grayscale.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaze::CROP_SIZE;
use crate::geometry::BBox;
use crate::image::Frame;
use crate::synth::{GazeExample, LabeledFrame};

pub const LABELS_FILE: &str = "labels.csv";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec failed: {0}")]
    Image(#[from] image::ImageError),
    #[error("label file is malformed: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Format(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct BoxRow {
    file: String,
    x: Option<f32>,
    y: Option<f32>,
    w: Option<f32>,
    h: Option<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GazeRow {
    file: String,
    has_face: u8,
    sx: f64,
    sy: f64,
    gx: f64,
    gy: f64,
    gz: f64,
}

/// A detection frame read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredFrame {
    pub frame: Frame,
    pub boxes: Vec<BBox>,
}

/// Writes frames as `frame_NNNNN.png`; frames without faces get one row
/// with empty box fields.
pub fn write_detection_frames(dir: &Path, frames: &[LabeledFrame]) -> Result<(), CorpusError> {
    std::fs::create_dir_all(dir)?;
    let mut labels = csv::Writer::from_path(dir.join(LABELS_FILE))?;
    for (i, lf) in frames.iter().enumerate() {
        let file = format!("frame_{i:05}.png");
        let f = &lf.frame;
        let img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(f.width as u32, f.height as u32, f.rgb.clone())
            .ok_or_else(|| CorpusError::Format(format!("frame {i} has inconsistent size")))?;
        img.save(dir.join(&file))?;
        let boxes = lf.boxes();
        if boxes.is_empty() {
            labels.serialize(BoxRow {
                file: file.clone(),
                x: None,
                y: None,
                w: None,
                h: None,
            })?;
        }
        for b in boxes {
            labels.serialize(BoxRow {
                file: file.clone(),
                x: Some(b.x),
                y: Some(b.y),
                w: Some(b.w),
                h: Some(b.h),
            })?;
        }
    }
    labels.flush()?;
    Ok(())
}

pub fn read_detection_frames(dir: &Path) -> Result<Vec<StoredFrame>, CorpusError> {
    let mut out: Vec<(String, StoredFrame)> = Vec::new();
    for row in csv::Reader::from_path(dir.join(LABELS_FILE))?.deserialize() {
        let row: BoxRow = row?;
        if out.last().map(|(f, _)| f != &row.file).unwrap_or(true) {
            let img = image::open(dir.join(&row.file))?.to_rgb8();
            let (w, h) = img.dimensions();
            let mut frame = Frame::new(w as usize, h as usize, img.into_raw());
            frame.index = out.len() as u64;
            out.push((row.file.clone(), StoredFrame { frame, boxes: Vec::new() }));
        }
        match (row.x, row.y, row.w, row.h) {
            (Some(x), Some(y), Some(w), Some(h)) => out.last_mut().expect("pushed above").1.boxes.push(BBox::new(x, y, w, h)),
            (None, None, None, None) => {}
            _ => return Err(CorpusError::Format(format!("partial box for {}", row.file))),
        }
    }
    Ok(out.into_iter().map(|(_, f)| f).collect())
}

/// Writes crops as `crop_NNNNN.png` with 16-bit luma.
pub fn write_gaze_crops(dir: &Path, examples: &[GazeExample]) -> Result<(), CorpusError> {
    std::fs::create_dir_all(dir)?;
    let mut labels = csv::Writer::from_path(dir.join(LABELS_FILE))?;
    for (i, ex) in examples.iter().enumerate() {
        let file = format!("crop_{i:05}.png");
        let data: Vec<u16> = ex.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(CROP_SIZE as u32, CROP_SIZE as u32, data)
            .ok_or_else(|| CorpusError::Format(format!("crop {i} is not {CROP_SIZE}x{CROP_SIZE}")))?;
        img.save(dir.join(&file))?;
        labels.serialize(GazeRow {
            file,
            has_face: ex.has_face as u8,
            sx: ex.start.0,
            sy: ex.start.1,
            gx: ex.gaze[0],
            gy: ex.gaze[1],
            gz: ex.gaze[2],
        })?;
    }
    labels.flush()?;
    Ok(())
}

pub fn read_gaze_crops(dir: &Path) -> Result<Vec<GazeExample>, CorpusError> {
    let mut out = Vec::new();
    for row in csv::Reader::from_path(dir.join(LABELS_FILE))?.deserialize() {
        let row: GazeRow = row?;
        let img = image::open(dir.join(&row.file))?.to_luma16();
        if img.dimensions() != (CROP_SIZE as u32, CROP_SIZE as u32) {
            return Err(CorpusError::Format(format!("{} is not {CROP_SIZE}x{CROP_SIZE}", row.file)));
        }
        out.push(GazeExample {
            pixels: img.into_raw().into_iter().map(|p| p as f32 / 65535.0).collect(),
            start: (row.sx, row.sy),
            gaze: [row.gx, row.gy, row.gz],
            has_face: row.has_face != 0,
        });
    }
    Ok(out)
}
