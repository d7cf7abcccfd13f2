//! Physics-informed deformable Gaussian splatting at desk scale.
//!
//! Everything numeric is generic over [`scalar::Real`] (`f32` or `f64`);
//! the aliases below fix the scalar to `f64`, which the training loop and
//! the gradient checks are tuned for.

// Index loops mirror the math in the numeric kernels; negated comparisons
// deliberately treat NaN as failing the check.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod ad;
pub mod assets;
pub mod deform;
pub mod flow;
pub mod geom;
pub mod hashgrid;
pub mod image;
pub mod io;
pub mod losses;
pub mod material;
pub mod nn;
pub mod ops3d;
pub mod optim;
pub mod physics;
pub mod render;
pub mod scalar;
pub mod scene;
pub mod scenegen;
pub mod train;

pub type Tensor = ad::Tensor<f64>;
pub type Tape = ad::Tape<f64>;
pub type Camera = render::Camera<f64>;
pub type GaussianCloud = scene::GaussianCloud<f64>;
pub type GaussianParticle = scene::GaussianParticle<f64>;
pub type DeformationField = deform::DeformationField<f64>;
pub type MaterialField = material::MaterialField<f64>;
pub type FlowField = flow::FlowField<f64>;
pub type Image = image::Image<f64>;
pub type TrainData = train::TrainData<f64>;
pub type Trainer = train::Trainer<f64>;
