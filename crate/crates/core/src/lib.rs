//! Simulation, rendering, model, training and evaluation for latent-dynamics
//! experiments on synthetic video.

pub mod dynamics;
pub mod render;
pub mod model;
pub mod trainer;
pub mod probe;
