pub mod config;
pub mod controller;
pub mod dynamics;
pub mod error;
pub mod gains;
pub mod gradcheck;
pub mod gradients;
pub mod loss;
pub mod observer;
pub mod oracle;
pub mod policy;
pub mod reference;
pub mod rollout;
pub mod so3;
pub mod trainer;

pub use error::{Error, Result};
