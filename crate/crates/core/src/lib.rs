//! Discrete-event simulation and theory toolkit for federated optimization
//! with heterogeneous, possibly stale, client updates.

// Negated float comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod engine;
pub mod error;
pub mod export;
pub mod model;
pub mod objectives;
pub mod oracle;
pub mod shards;
pub mod stats;
pub mod timing;
pub mod weights;

pub use error::{FedError, Result};
