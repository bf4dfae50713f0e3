//! Dense two-view geometry without an operating system.
//!
//! Everything in this crate is pure computation over in-memory buffers:
//! pinhole geometry on pointmaps, a procedural raycaster that produces exact
//! ground truth, axial rotary position encoding with position interpolation,
//! a shared-weight encoder-decoder transformer with hand-written backward
//! passes, the training objectives, descriptor matching, multi-view sim(3)
//! alignment and evaluation metrics.
//!
//! File formats, the command line and training orchestration live in the
//! `pairgeo` companion crate. Build with `--no-default-features` for a
//! `no_std + alloc` target.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod align;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pad;
pub mod rope;
pub mod sim3;
pub mod synth;
pub mod train;

mod linalg;

pub(crate) mod prelude {
    pub use alloc::format;
    pub use alloc::string::{String, ToString};
    pub use alloc::vec;
    pub use alloc::vec::Vec;
    #[allow(unused_imports)]
    pub use num_traits::Float;
}

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, DepthMap, Frame, Mask, NormalMap, Pointmap, PosedFrame, RigidPose, Vec3};
pub use sim3::SimilarityTransform;
