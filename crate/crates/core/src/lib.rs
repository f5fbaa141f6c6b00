//! Semantic 3D Gaussians lifted from panoramic depth, refined with sparse
//! convolutions, rendered to cube maps and decoded into 3D boxes.

pub mod detect;
pub mod eval;
pub mod gaussian;
pub mod geometry;
pub mod nn;
pub mod refine;
pub mod render;
pub mod scenes;
pub mod sampling;
pub mod tensorio;
