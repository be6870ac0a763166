//! Low-light image enhancement built on Retinex decomposition.
//!
//! The pipeline splits a dark image into an illumination map and a reflectance map
//! ([`decomposition`]), denoises the reflectance ([`restoration`]), fuses reflectance-derived
//! illumination coefficients with the illumination map ([`fusion`]), brightens the
//! illumination with eight learned quadratic light curves ([`curve`]) and recombines the
//! two maps ([`pipeline`]). Every network runs on the small reverse-mode engine in
//! [`autodiff`] and is trained stage by stage with [`train`].

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod curve;
pub mod decomposition;
pub mod error;
pub mod fusion;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod restoration;
pub mod train;

pub use error::{Error, Result};
pub use image::Image;
