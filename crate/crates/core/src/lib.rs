pub mod backbone;
pub mod cli;
pub mod config;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod lqformer;
pub mod model;
pub mod numkernel;
pub mod objectives;
pub mod params;
pub mod probe;
pub mod reconstructor;
pub mod rng;
pub mod tokensel;

pub use error::{Error, Result};
