//! Token-level flow progress over small, exactly enumerable conditional
//! sequence models: exact oracles, flow-guided decoding, dense-reward policy
//! gradients and evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod decode;
pub mod error;
pub mod eval;
pub mod flow;
pub mod io;
pub mod lm;
pub mod numeric;
pub mod oracle;
pub mod reference;
pub mod rl;
pub mod rng;
pub mod tasks;
pub mod verify;

pub use error::{FlowError, Result};
