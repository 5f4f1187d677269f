//! Conversational dense retrieval with embedding inversion.
//!
//! A session encoder maps a conversation turn plus its history to a dense
//! vector. The inversion engine recovers an explicit text whose embedding
//! under an ad-hoc query encoder matches that vector, and the harness
//! compares retrieval with the recovered text against the session vector.

pub mod corpus;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod invert;
pub mod retrieval;
pub mod rewrite;
pub mod text;

pub use error::{Error, Result};
