pub mod error;
pub mod gauss;
pub mod quad;
pub mod copulas;
pub mod optim;
pub mod data;
pub mod ident;
pub mod dgp;
pub mod dr;
pub mod estimate;
pub mod functionals;
pub mod infer;

pub use error::{Error, Result};
