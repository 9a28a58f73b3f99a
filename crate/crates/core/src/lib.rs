//! Numerical toolkit for 3D Compton scattering imaging.
//!
//! A fixed monochromatic source illuminates an electron-density volume and a
//! set of energy-resolving point detectors records the scattered spectrum.
//! Photons scattered once at `x` and detected at `d` with a given energy lie
//! on a spindle torus through `s` and `d`; photons scattered twice lie on the
//! intersection of a cone (first deflection) and a torus (second deflection).
//!
//! The crate is organised as:
//!
//! * [`geometry`]: rotations, torus/cone level-set functions, the cone–torus
//!   intersection and the immersion Jacobian of the scanner.
//! * [`physics`]: Compton kinematics, Klein–Nishina, the Stonestrom attenuation
//!   model and ray-marched attenuation factors.
//! * [`volume`] and [`phantom`]: voxel grids, sphere phantoms, mollification.
//! * [`forward`]: analytic first- and second-order spectra.
//! * [`montecarlo`]: photon transport with next-event estimation.
//! * [`recon`]: filtered-backprojection-type reconstruction and contours.
//! * [`pipeline`]: run configuration and the batch commands behind the CLI.

pub mod analysis;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod io;
pub mod montecarlo;
mod par;
pub mod phantom;
pub mod physics;
pub mod pipeline;
pub mod recon;
pub mod spectrum;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{RotationMatrix, ScanGeometry, Vec3};
pub use spectrum::{Channel, EnergyGrid, Spectrum};
pub use volume::VoxelGrid;
