//! Diffusion numerics and a toy conditional video denoiser.

pub mod gradcheck;
pub mod numerics;
pub mod toydiff;
