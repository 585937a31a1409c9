//! Self-supervised dense correspondence from video through one shared
//! inter-frame affinity.
//!
//! The same column-stochastic affinity moves colors, masks and keypoint maps
//! between frames, traces where pixels went, and localizes a reference patch
//! in a target frame. Training combines color-feature reconstruction with
//! concentration and cycle (orthogonality) regularizers; inference propagates
//! first-frame labels recurrently, optionally inside tracked boxes.

pub mod affinity;
pub mod checkpoint;
pub mod cli;
pub mod color;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod localization;
pub mod objectives;
pub mod optim;
pub mod propagation;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod video;

pub use error::{Error, Result};
