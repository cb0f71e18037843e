pub mod backbone;
mod binio;
pub mod data;
pub mod error;
pub mod harness;
pub mod head;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod peft;
pub mod seed;

pub use error::{Error, Result};
pub use model::Model;
