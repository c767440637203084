#![no_std]
extern crate alloc;

pub mod conjugation;
pub mod contrastive;
pub mod error;
pub mod evalkit;
pub mod graph;
pub mod hierarchy;
pub mod kernels;
pub mod optim;
pub mod stream;
pub mod tensor;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
