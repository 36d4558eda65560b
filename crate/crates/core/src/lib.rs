//! Conditional state estimation for a levitated mechanical oscillator read
//! out through a detuned optical cavity.

pub mod dsp;
pub mod error;
pub mod estimate;
pub mod ident;
pub mod linalg;
pub mod model;
pub mod params;
pub mod wiener;

pub use error::{Error, Result};
pub use model::{build_model, simulate, StateSpaceModel, Trajectory};
pub use params::{ParamsFile, SystemParams};
