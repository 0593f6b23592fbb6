//! Triplane latent generative modelling of textured meshes.
//!
//! A triplane variational autoencoder maps colored point clouds to Gaussian triplane latents
//! and decodes them to meshes through differentiable marching tetrahedra, trained with
//! silhouette and depth rendering losses. A v-prediction diffusion model over rolled-out
//! triplanes then generates latents conditionally or unconditionally.

pub mod cli;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod tetmesh;
pub mod nets;
pub mod render;
pub mod triplane;
pub mod vae;

pub use error::{Error, Result};
