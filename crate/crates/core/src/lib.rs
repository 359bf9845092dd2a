pub mod autodiff;
pub mod bsseval;
pub mod dsp;
pub mod error;
pub mod pipeline;
pub mod runlog;
pub mod sed;
pub mod separator;
pub mod synthdata;
pub mod util;

pub use error::{Error, Result};
