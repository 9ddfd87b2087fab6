//! The hourglass transformer: byte encoder and boundary predictor, segment
//! pooling, a middle block over segments, shift-by-one upsampling with a
//! byte-level skip path, a byte decoder and the unembedding.

pub mod hourglass;
pub mod layers;
pub mod params;
pub mod pooling;

pub use hourglass::{
    BackwardSeeds, BoundaryPath, ForwardOptions, ForwardOutput, HeadConfig, HeadPooling, Hourglass,
    HourglassConfig,
};
