//! One-shot grasp detection with a cascade of constrained spatial
//! transformers, supervised first geometrically and then through a frozen
//! grasp-robustness classifier.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: dense tensors and a reverse-mode tape.
//! * [`stn`]: constrained affine parameterisations, grids, bilinear sampling
//!   and the head mappings.
//! * [`locnet`]: small convolutional backbones.
//! * [`graspgeom`]: grasp representations and the rectangle metric.
//! * [`scenegen`]: synthetic depth scenes, an analytic antipodal oracle and
//!   the GQSD shard format.
//! * [`quality`]: the robustness classifier.
//! * [`training`]: the two-phase detector regimen and the direct-regression
//!   baseline.
//! * [`evalbench`]: metrics, the proposal+classification baseline and timing.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evalbench;
pub mod gradsuite;
pub mod graspgeom;
pub mod image;
pub mod locnet;
pub mod quality;
pub mod rng;
pub mod scenegen;
pub mod stn;
pub mod training;

pub use autodiff::{Graph, Tensor, Var};
pub use error::{Error, Result};
pub use graspgeom::{GraspConfig, RectGrasp};
pub use image::{DepthImage, ImageMeta};
pub use scenegen::SceneRecord;
pub use stn::{AffineParams, DatasetStats, HeadOutputs};
