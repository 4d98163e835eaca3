pub mod augment;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod objectives;
pub mod pq;
pub mod retrieval;
pub mod tensor;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
