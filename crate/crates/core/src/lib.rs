//! Neural harmonic textures for image fitting.
//!
//! Latent feature vectors live on the vertices of an adaptive Delaunay mesh
//! (or on the bounding triangles of 2D Gaussian splats). Features are
//! interpolated per pixel, passed through a periodic `[sin; cos]` activation
//! and decoded once per pixel by a shallow MLP. Trained models serialize into
//! a quantized, entropy-coded `.nht` container.
//!
//! Module map:
//!
//! * [`imageio`]: PFM/PNG loading, μ-law companding, display tonemap.
//! * [`mesh`]: Delaunay mesh over the image plane, point location, repair.
//! * [`interp`]: barycentric and Clough–Tocher interpolation, vertex gradients.
//! * [`nn`]: MLP decoder with hand-written backprop, Adam, schedules, EMA.
//! * [`harmonic`]: feature encodings and real spherical harmonics.
//! * [`splat2d`]: 2D Gaussian compositor with deferred decoding.
//! * [`trainer`]: sampling, losses, densification and the fitting loops.
//! * [`codec`]: quantization and the `.nht` container.
//! * [`metrics`]: PSNR and SSIM.

pub mod codec;
pub mod error;
pub mod harmonic;
pub mod imageio;
pub mod interp;
pub mod mesh;
pub mod metrics;
pub mod nn;
pub mod real;
pub mod splat2d;
pub mod trainer;

pub use codec::{Model, QuantFlags};
pub use error::{Error, Result};
pub use harmonic::Encoding;
pub use imageio::{HdrImage, MuLawParams};
pub use interp::{FeatureField, Interpolation};
pub use mesh::Mesh;
pub use nn::Mlp;
pub use real::Real;
pub use splat2d::{Splat, SplatSet};
pub use trainer::{MeshModel, TrainConfig};
