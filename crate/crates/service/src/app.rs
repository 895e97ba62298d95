//! The running pipeline: capture, inference and output on separate threads.

use std::path::PathBuf;
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::Arc;
use std::time::Instant;

use crowdgaze_core::session::{GroupGazeState, LogError, Recorder, Session, SessionError};
use thiserror::Error;

use crate::protocol::{ClickAck, ClientMessage, ConfigUpdate, FitReport, ServerMessage};
use crate::queue::{BoundedQueue, FullPolicy};
use crate::server::{Command, Hub};
use crate::source::{Cursor, SourceError, VideoSource};

/// Capacity of the queues between pipeline stages.
pub const STAGE_QUEUE: usize = 2;
pub const DEFAULT_RECORD_PATH: &str = "crowdgaze-session.csv";
pub const DEFAULT_CALIBRATION_PATH: &str = "crowdgaze-calibration.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("video source failed: {0}")]
    Source(#[from] SourceError),
    #[error("frame processing failed: {0}")]
    Session(#[from] SessionError),
    #[error("session log failed, stopping: {0}")]
    Record(#[from] LogError),
}

#[derive(Clone, Debug)]
pub struct PipelineOptions {
    /// Log path used from the start and by `start_recording`.
    pub record: Option<PathBuf>,
    /// Start recording immediately.
    pub record_on_start: bool,
    pub calibration_path: PathBuf,
    /// Stop after this many frames.
    pub frames: Option<u64>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            record: None,
            record_on_start: false,
            calibration_path: DEFAULT_CALIBRATION_PATH.into(),
            frames: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub frames: u64,
    /// Frames discarded by a live source under back-pressure.
    pub dropped: u64,
    pub rows: u64,
}

enum Output {
    State(GroupGazeState),
    Click { frame: u64, ts_ms: u64, u: f64, v: f64 },
    Reply(Option<u64>, ServerMessage),
    StartRecording(Option<u64>),
    StopRecording(Option<u64>),
}

/// Runs until the source ends, the frame cap is reached, or a stage fails.
/// The session is returned so callers can inspect calibration afterwards.
pub fn run_pipeline(
    mut source: Box<dyn VideoSource>,
    mut session: Session,
    opts: &PipelineOptions,
    commands: Receiver<Command>,
    hub: Option<Arc<Hub>>,
    cursor: Cursor,
) -> Result<(Session, RunSummary), PipelineError> {
    let policy = if source.is_live() {
        FullPolicy::DropOldest
    } else {
        FullPolicy::Block
    };
    let frames = Arc::new(BoundedQueue::new(STAGE_QUEUE, policy));
    let capture = {
        let frames = Arc::clone(&frames);
        let cap = opts.frames;
        std::thread::Builder::new()
            .name("capture".into())
            .spawn(move || -> Result<(), SourceError> {
                let mut n = 0u64;
                let result = loop {
                    if cap.is_some_and(|c| n >= c) {
                        break Ok(());
                    }
                    match source.next_frame() {
                        Ok(Some(f)) => {
                            if frames.push(f).is_err() {
                                break Ok(());
                            }
                            n += 1;
                        }
                        Ok(None) => break Ok(()),
                        Err(e) => break Err(e),
                    }
                };
                frames.close();
                result
            })
            .expect("spawn capture thread")
    };

    let (out_tx, out_rx) = sync_channel::<Output>(STAGE_QUEUE);
    let output = {
        let record = opts.record.clone();
        let record_on_start = opts.record_on_start;
        std::thread::Builder::new()
            .name("output".into())
            .spawn(move || output_stage(out_rx, hub, record, record_on_start))
            .expect("spawn output thread")
    };

    let mut stage = Inference {
        session: &mut session,
        out: &out_tx,
        cursor: &cursor,
        calibration_path: &opts.calibration_path,
        last_state_at: None,
    };
    let mut processed = 0u64;
    let inference_result = loop {
        if !stage.drain(&commands) {
            break Ok(());
        }
        let Some(frame) = frames.pop() else {
            break Ok(());
        };
        let state = match stage.session.process_frame(&frame) {
            Ok(s) => s,
            Err(e) => break Err(PipelineError::from(e)),
        };
        stage.last_state_at = Some(Instant::now());
        processed += 1;
        if out_tx.send(Output::State(state)).is_err() {
            break Ok(());
        }
    };
    // Commands that arrived during the last frame still get their replies.
    stage.drain(&commands);
    frames.close();
    drop(out_tx);
    let output_result = output.join().expect("output thread panicked");
    let capture_result = capture.join().expect("capture thread panicked");
    inference_result?;
    let rows = output_result?;
    capture_result?;
    Ok((
        session,
        RunSummary {
            frames: processed,
            dropped: frames.dropped(),
            rows,
        },
    ))
}

struct Inference<'a> {
    session: &'a mut Session,
    out: &'a SyncSender<Output>,
    cursor: &'a Cursor,
    calibration_path: &'a PathBuf,
    last_state_at: Option<Instant>,
}

impl Inference<'_> {
    /// Applies queued commands. Returns false once the output stage is gone.
    fn drain(&mut self, commands: &Receiver<Command>) -> bool {
        while let Ok(cmd) = commands.try_recv() {
            for out in self.handle(cmd) {
                if self.out.send(out).is_err() {
                    return false;
                }
            }
        }
        true
    }

    /// Session clock now: the latest frame time plus wall time since it was processed.
    fn now_ms(&self) -> u64 {
        let base = self.session.latest().map_or(0, |s| s.timestamp_ms);
        base + self.last_state_at.map_or(0, |t| t.elapsed().as_millis() as u64)
    }

    fn handle(&mut self, cmd: Command) -> Vec<Output> {
        let to = cmd.client;
        let reply = |m: ServerMessage| Output::Reply(to, m);
        match cmd.message {
            ClientMessage::Click { u, v, .. } => {
                let ts = self.now_ms();
                let outcome = self.session.click(u, v, ts);
                let frame = self.session.latest().map_or(0, |s| s.frame_index);
                vec![
                    Output::Click { frame, ts_ms: ts, u, v },
                    reply(ServerMessage::ClickAck(ClickAck::new(u, v, outcome))),
                ]
            }
            ClientMessage::Cursor { u, v } => {
                self.cursor.set(u, v);
                Vec::new()
            }
            ClientMessage::Fit { degree } => {
                let degree = degree.unwrap_or(self.session.config.degree);
                let fits = self.session.fit_all(degree);
                if fits.is_empty() {
                    return vec![reply(ServerMessage::Error {
                        message: "no calibration samples stored yet".into(),
                    })];
                }
                fits.iter()
                    .map(|(id, r)| {
                        let n = self.session.calibration.samples(*id).len();
                        reply(ServerMessage::FitReport(FitReport::new(*id, degree, n, r)))
                    })
                    .collect()
            }
            ClientMessage::Config(update) => vec![reply(self.reconfigure(&update))],
            ClientMessage::SaveCalibration => {
                let msg = match self.session.calibration.save(self.calibration_path) {
                    Ok(()) => ServerMessage::Info {
                        message: format!("calibration saved to {}", self.calibration_path.display()),
                    },
                    Err(e) => ServerMessage::Error {
                        message: format!("cannot save calibration: {e}"),
                    },
                };
                vec![reply(msg)]
            }
            ClientMessage::StartRecording => vec![Output::StartRecording(to)],
            ClientMessage::StopRecording => vec![Output::StopRecording(to)],
        }
    }

    fn reconfigure(&mut self, update: &ConfigUpdate) -> ServerMessage {
        let mut cfg = self.session.config.clone();
        if let Some(u) = update.upscale {
            cfg.detector.upscale_factor = u;
        }
        if let Some(b) = update.batch_size {
            cfg.batch.batch_size = b;
        }
        if let Some(t) = update.thresholds {
            cfg.validity.min_start_conf = t.min_start_conf;
            cfg.validity.min_vec_conf = t.min_vec_conf;
        }
        match self.session.reconfigure(cfg) {
            Ok(()) => ServerMessage::Info {
                message: "configuration updated".into(),
            },
            Err(e) => ServerMessage::Error { message: e.to_string() },
        }
    }
}

fn output_stage(rx: Receiver<Output>, hub: Option<Arc<Hub>>, record: Option<PathBuf>, record_on_start: bool) -> Result<u64, PipelineError> {
    let record_path = record.unwrap_or_else(|| DEFAULT_RECORD_PATH.into());
    let mut recorder = if record_on_start {
        Some(Recorder::create(&record_path)?)
    } else {
        None
    };
    let mut rows = 0u64;
    let send = |to: Option<u64>, m: &ServerMessage| {
        if let (Some(hub), Some(id)) = (&hub, to) {
            hub.send_to(id, m);
        }
    };
    for out in rx {
        match out {
            Output::State(state) => {
                if let Some(r) = &mut recorder {
                    r.record(&state)?;
                }
                if let Some(hub) = &hub {
                    hub.broadcast(&ServerMessage::State(state));
                }
            }
            Output::Click { frame, ts_ms, u, v } => {
                if let Some(r) = &mut recorder {
                    r.record_click(frame, ts_ms, u, v)?;
                }
            }
            Output::Reply(to, m) => send(to, &m),
            Output::StartRecording(to) => {
                let msg = if recorder.is_some() {
                    ServerMessage::Error {
                        message: "already recording".into(),
                    }
                } else {
                    match Recorder::create(&record_path) {
                        Ok(r) => {
                            recorder = Some(r);
                            ServerMessage::Info {
                                message: format!("recording to {}", record_path.display()),
                            }
                        }
                        Err(e) => ServerMessage::Error {
                            message: format!("cannot start recording: {e}"),
                        },
                    }
                };
                send(to, &msg);
            }
            Output::StopRecording(to) => {
                let msg = match recorder.take() {
                    Some(r) => {
                        rows += r.rows_written();
                        ServerMessage::Info {
                            message: format!("recording stopped after {} rows", r.rows_written()),
                        }
                    }
                    None => ServerMessage::Error {
                        message: "not recording".into(),
                    },
                };
                send(to, &msg);
            }
        }
    }
    Ok(rows + recorder.map_or(0, |r| r.rows_written()))
}
