//! Multipath temporal excitation for segment-based video networks.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`conv`], [`autodiff`], [`optim`], [`gradcheck`]: dense
//!   tensors, direct convolution, a reverse-mode tape, SGD and a
//!   finite-difference checker.
//! * [`excitation`]: the spatio-temporal, channel and motion excitation
//!   paths, their sum, temporal shift and segment consensus.
//! * [`cost`]: analytic parameter / multiply-accumulate counts for ResNet-50
//!   and MobileNet V2 with configurable module insertion.
//! * [`data`], [`toynet`], [`train`], [`cam`]: a synthetic temporal-order
//!   benchmark, a small trainable network and class activation maps.

pub mod atnz;
pub mod autodiff;
pub mod cam;
pub mod cli;
pub mod conv;
pub mod cost;
pub mod data;
pub mod error;
pub mod excitation;
pub mod gradcheck;
pub mod optim;
pub mod snapshot;
pub mod tensor;
pub mod toynet;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor};
