//! Learned feedback channel codes over AWGN forward and feedback links.
//!
//! A transmitter encodes a message block-by-block over several rounds; after
//! each round the receiver sends back a learned function of what it has seen.
//! Three transformer networks (parity, feedback, decoder) implement the
//! encoding, feedback and decoding maps and are trained end-to-end.

pub mod archive;
pub mod autodiff;
pub mod channel;
pub mod codec;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod networks;
pub mod plot;
pub mod protocol;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
