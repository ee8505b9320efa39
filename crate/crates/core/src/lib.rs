//! Probabilities for sequences of quantum measurements, computed by summing
//! amplitudes over virtual paths, with a density-matrix collapse engine as an
//! independent check and ready-made Wigner-Friend protocols.
//!
//! ```
//! use pathwig::scenarios::{build_case_c, WignerFriendConfig};
//! use pathwig::path_engine::distribution;
//!
//! let setup = build_case_c(&WignerFriendConfig::canonical_c()).unwrap();
//! let dist = distribution(&setup.protocol).unwrap();
//! assert!((dist.total() - 1.0).abs() < 1e-12);
//! ```

pub mod collapse_oracle;
pub mod error;
pub mod exec;
pub mod hilbert;
pub mod path_engine;
pub mod protocol;
pub mod random;
pub mod scenarios;

pub use error::{Error, Result};
pub use exec::Execution;
pub use hilbert::{OperatorMatrix, SpaceLayout, StateVector, Unitary, C64};
pub use protocol::{Distribution, Event, ObservableDecomposition, Outcome, OutcomeSequence, Protocol, Tolerances};
