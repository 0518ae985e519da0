pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod inpaint;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod rng;
pub mod schedule;

pub use error::{Error, Result};
pub use grid::{BoxF, ImageGrid, Mask, Rect};
