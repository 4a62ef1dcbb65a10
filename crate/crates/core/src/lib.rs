//! Frequency-agnostic prediction of metasurface transmittance, reflectance
//! and absorbance.
//!
//! The crate has three layers:
//!
//! - [`oracle`] and [`data`]: an equivalent-circuit ground truth and the
//!   dataset, scaling and episodic task machinery built on it.
//! - [`net`] and [`objective`]: a small branched network with hand-written
//!   reverse-mode gradients and the Huber + correlation training loss.
//! - [`metatrain`] and [`baselines`]: first-order MAML with AdaBelief outer
//!   updates, plus a plain supervised network and a k-NN regressor to compare
//!   against.
//!
//! [`cli`] wires these into the `metafap` binary.

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod metatrain;
pub mod net;
pub mod objective;
pub mod oracle;

pub use error::{Error, Result};
pub use oracle::{DesignVector, OracleConfig, Polarization, ResponseTriple};
