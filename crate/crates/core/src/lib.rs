//! Exocentric-to-egocentric knowledge transfer at desk scale.
//!
//! The crate covers the whole pipeline: clip corpora built from timestamped
//! narrations ([`corpus`]), a synthetic paired-view world ([`synthworld`]),
//! encoders, mapping networks and a tiny language model ([`models`]), the
//! training objectives ([`losses`]), the staged freeze/unfreeze schedule
//! ([`trainer`]) and the multiple-choice evaluation harness
//! ([`evalharness`]).

pub mod arrayfile;
pub mod autograd;
pub mod corpus;
pub mod error;
pub mod evalharness;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};
