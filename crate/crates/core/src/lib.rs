pub mod blueprint;
pub mod clock;
pub mod error;
pub mod experiments;
pub mod features;
pub mod hashing;
pub mod http;
pub mod joiner;
pub mod optimizer;
pub mod policy;
pub mod reaper;
pub mod registry;
pub mod service;
pub mod sim;
pub mod space;
pub mod trainer;

pub use error::{Error, Result};
