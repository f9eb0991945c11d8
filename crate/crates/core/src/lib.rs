pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod fuser;
pub mod jsc;
pub mod model;
pub mod nn;
pub mod params;
pub mod rate;
pub mod seed;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
