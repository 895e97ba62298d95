pub mod calibration;
pub mod corpus;
pub mod detector;
pub mod gaze;
pub mod geometry;
pub mod image;
pub mod nets;
pub mod scenario;
pub mod session;
pub mod synth;
pub mod tracker;
pub mod training;
