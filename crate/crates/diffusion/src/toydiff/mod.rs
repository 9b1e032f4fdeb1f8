//! Toy conditional video denoiser with control branches, condition-group
//! encoders and a temporal consistency adapter, trained with rectified flow.

pub mod feat;
pub mod layers;
pub mod params;
pub mod adapter;
pub mod groups;
pub mod model;
pub mod data;
pub mod train;
pub mod sample;
pub mod ablate;
pub mod checkpoint;
