//! Service layer: CLI, video sources, pipeline threads and the WebSocket protocol.

pub mod app;
pub mod cli;
pub mod protocol;
pub mod queue;
pub mod server;
pub mod source;
