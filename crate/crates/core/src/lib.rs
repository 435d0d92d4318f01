//! Box-supervised instance segmentation guided by pseudo depth, on synthetic scenes.

pub mod cli;
pub mod config;
pub mod distill;
pub mod error;
pub mod evalmetrics;
pub mod features;
pub mod gradcheck;
pub mod imagegrid;
pub mod losses;
pub mod maskhead;
pub mod matching;
pub mod objective;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
