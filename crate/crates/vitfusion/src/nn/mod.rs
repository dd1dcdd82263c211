//! Minimal dense-network substrate: parameters, layers with explicit forward
//! caches and hand-written backward passes, and an Adam optimizer.
//!
//! Everything is `f64` and single-threaded; repeated runs with the same seed
//! produce bit-identical results.

mod adam;
mod conv;
mod init;
mod linear;
mod norm;
mod param;

pub mod act;

pub use adam::{Adam, AdamConfig};
pub use conv::{Conv2d, Conv2dCache};
pub use init::WeightInit;
pub use linear::Linear;
pub use norm::{LayerNorm, LayerNormCache};
pub use param::{Net, Param, ParamMut};

/// Joins a parameter path segment onto a prefix.
pub fn path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
