//! Physics-guided diffusion for synthesising AC power-flow samples.

pub mod acpf;
pub mod datagen;
pub mod diffusion;
pub mod evaluate;
pub mod grid;
pub mod neural;
