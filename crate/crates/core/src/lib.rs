//! Virtual fundamental classes on finite chart presentations.

pub mod branched;
pub mod charts;
pub mod error;
pub mod expr;
pub mod ext;
pub mod kcat;
pub mod quad;
pub mod scenario;
pub mod sheaves;
pub mod suites;
pub mod tropical;
pub mod vclass;
pub mod vint;

pub use error::{Error, ErrorClass, Result};
