//! Octree-sparsified attention over sparse 3D voxel grids.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`gradcheck`]: dense `f64` tensors, a
//!   reverse-mode tape and a finite-difference checker.
//! - [`voxel`]: point ingestion, voxelization, sparse grids and the padded
//!   dense-token view.
//! - [`sparse_conv`]: submanifold 3×3×3 convolution.
//! - [`pyramid`]: the max-scatter feature pyramid and parent/child index banks.
//! - [`attention`], [`select`], [`otb`]: multi-head attention, top-k
//!   selection and octant sampling, and the Octree Transformer Block.
//! - [`semantic`]: segmentation branch, focal loss, semantic positional
//!   embedding and the semantic attention mask.
//! - [`oracle`], [`complexity`]: dense reference implementations and MAC
//!   accounting used by the verification harness.

pub mod attention;
pub mod autodiff;
pub mod complexity;
pub mod error;
pub mod gradcheck;
pub mod oracle;
pub mod otb;
pub mod params;
pub mod pyramid;
pub mod select;
pub mod semantic;
pub mod sparse_conv;
pub mod tensor;
pub mod voxel;

pub use autodiff::{Grads, MacCounts, MacKind, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
