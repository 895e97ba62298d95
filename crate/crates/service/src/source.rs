//! Frame sources: synthetic audience, directory of image files, camera.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crowdgaze_core::image::Frame;
use crowdgaze_core::synth::{random_fixations, GazePath, SyntheticScene};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{0} has no .png frames")]
    Empty(PathBuf),
    #[error("frame {path} is {got:?}, expected {expected:?} like the first frame")]
    SizeChange {
        path: PathBuf,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("camera capture is not supported in this build (camera index {0})")]
    CameraUnsupported(u32),
}

/// Shared operator cursor in normalized projection coordinates.
#[derive(Clone, Debug, Default)]
pub struct Cursor(Arc<Mutex<Option<(f64, f64)>>>);

impl Cursor {
    pub fn set(&self, u: f64, v: f64) {
        *self.0.lock().unwrap() = Some((u, v));
    }

    pub fn get(&self) -> Option<(f64, f64)> {
        *self.0.lock().unwrap()
    }
}

pub trait VideoSource: Send {
    /// Next frame with monotonically increasing index and timestamp, or
    /// `None` at the end of the stream.
    fn next_frame(&mut self) -> Result<Option<Frame>, SourceError>;
    /// Live sources drop stale frames under back-pressure; others block.
    fn is_live(&self) -> bool;
    fn resolution(&self) -> (usize, usize);
}

/// Sleeps until frame `index` is due at `fps`, counted from the first call.
#[derive(Debug)]
struct Pacer {
    fps: f64,
    start: Option<Instant>,
}

impl Pacer {
    fn wait(&mut self, index: u64) {
        let start = *self.start.get_or_insert_with(Instant::now);
        let due = start + Duration::from_secs_f64(index as f64 / self.fps);
        if let Some(d) = due.checked_duration_since(Instant::now()) {
            std::thread::sleep(d);
        }
    }
}

pub const SYNTH_WIDTH: usize = 256;
pub const SYNTH_HEIGHT: usize = 192;

/// Renders a seated synthetic audience. Until the first cursor update the
/// audience looks at random fixations; afterwards everyone looks at the cursor.
pub struct SyntheticSource {
    scene: SyntheticScene,
    next: u64,
    cursor: Cursor,
    pacer: Option<Pacer>,
}

impl SyntheticSource {
    pub fn new(seed: u64, persons: usize, cursor: Cursor, paced: bool) -> Self {
        let scene = SyntheticScene::audience(seed, SYNTH_WIDTH, SYNTH_HEIGHT, persons, random_fixations(seed, 3600, 1.0, 0.1));
        let pacer = paced.then_some(Pacer {
            fps: scene.fps,
            start: None,
        });
        Self {
            scene,
            next: 0,
            cursor,
            pacer,
        }
    }
}

impl VideoSource for SyntheticSource {
    fn next_frame(&mut self) -> Result<Option<Frame>, SourceError> {
        if let Some(p) = &mut self.pacer {
            p.wait(self.next);
        }
        if let Some((u, v)) = self.cursor.get() {
            for p in &mut self.scene.persons {
                p.gaze = GazePath::Fixed { u, v };
            }
        }
        let (frame, _) = self.scene.render_index(self.next);
        self.next += 1;
        Ok(Some(frame))
    }

    fn is_live(&self) -> bool {
        false
    }

    fn resolution(&self) -> (usize, usize) {
        (self.scene.width, self.scene.height)
    }
}

/// Frames read in file-name order from a directory of PNG images.
pub struct FileSource {
    files: Vec<PathBuf>,
    next: usize,
    fps: f64,
    size: (usize, usize),
    pacer: Option<Pacer>,
}

impl FileSource {
    pub fn open(dir: &Path, fps: f64, paced: bool) -> Result<Self, SourceError> {
        let io = |source| SourceError::Io {
            path: dir.to_path_buf(),
            source,
        };
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(io)?;
        files.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
        files.sort();
        let first = files.first().ok_or_else(|| SourceError::Empty(dir.to_path_buf()))?;
        let size = image::image_dimensions(first).map_err(|source| SourceError::Decode {
            path: first.clone(),
            source,
        })?;
        Ok(Self {
            files,
            next: 0,
            fps,
            size: (size.0 as usize, size.1 as usize),
            pacer: paced.then_some(Pacer { fps, start: None }),
        })
    }
}

impl VideoSource for FileSource {
    fn next_frame(&mut self) -> Result<Option<Frame>, SourceError> {
        let Some(path) = self.files.get(self.next) else {
            return Ok(None);
        };
        if let Some(p) = &mut self.pacer {
            p.wait(self.next as u64);
        }
        let img = image::open(path)
            .map_err(|source| SourceError::Decode {
                path: path.clone(),
                source,
            })?
            .into_rgb8();
        let got = (img.width() as usize, img.height() as usize);
        if got != self.size {
            return Err(SourceError::SizeChange {
                path: path.clone(),
                got,
                expected: self.size,
            });
        }
        let mut frame = Frame::new(got.0, got.1, img.into_raw());
        frame.index = self.next as u64;
        frame.timestamp_ms = (self.next as f64 * 1000.0 / self.fps).round() as u64;
        self.next += 1;
        Ok(Some(frame))
    }

    fn is_live(&self) -> bool {
        false
    }

    fn resolution(&self) -> (usize, usize) {
        self.size
    }
}

/// Always fails: no capture backend is compiled in.
pub fn open_camera(index: u32) -> Result<Box<dyn VideoSource>, SourceError> {
    Err(SourceError::CameraUnsupported(index))
}
