//! Novel view synthesis by aggregating features from nearby posed images.

pub mod checkpoint;
pub mod cli;
pub mod geometry;
pub mod image;
pub mod scene_io;
pub mod synth;
pub mod feature_net;
pub mod model;
pub mod network;
pub mod render;
pub mod metrics;
pub mod trainer;
