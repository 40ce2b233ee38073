//! HINT: hypernetworks that read a task instruction once and emit adapters,
//! prefixes and a fused instruction encoding for a small encoder-decoder.

pub mod corpus;
pub mod costmodel;
pub mod error;
pub mod gradcheck;
pub mod hypernet;
pub mod io;
pub mod latency;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod peft;
pub mod training;
pub mod transformer;

pub use error::{HintError, Result};
pub use model::HintModel;
