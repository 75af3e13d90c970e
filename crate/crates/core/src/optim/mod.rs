//! Update engines: MMA for continuous variables, BESO for the binary macro
//! layout, and the radial filter shared by all global fields.

pub mod beso;
pub mod filter;
pub mod mma;

pub use beso::BesoState;
pub use filter::RadialFilter;
pub use mma::{MmaParams, MmaState};
