pub mod attention;
pub mod cvae;
pub mod data;
pub mod deq;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod hand;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod train;

pub use error::{HoiError, Result};
