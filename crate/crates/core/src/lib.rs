pub mod error;
pub mod numkit;

pub use error::{Error, Result};
pub mod exprdsl;
pub mod model;
pub mod matequ;
pub mod localqp;
pub mod exit;
pub mod charflow;
pub mod mcoracle;
