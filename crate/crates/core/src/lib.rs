//! Core library for building and evaluating a video corpus moment retrieval
//! model from pseudo-supervised training data.
//!
//! The pipeline turns subtitled videos into training signal without human
//! annotation: sample temporal moments from subtitle runs ([`sampling`]),
//! generate modal-specific pseudo queries for each moment ([`querygen`] with
//! caption/summary [`providers`]), train a dual-stream video-language model
//! ([`model`], [`training`]) and score retrieval quality against held-out
//! annotated queries ([`eval`]).
//!
//! Annotated queries are quarantined behind [`firewall::EvalScope`] so that
//! no training-path code can observe ground-truth query text or intervals.

pub mod corpus;
pub mod eval;
pub mod firewall;
pub mod model;
pub mod providers;
pub mod querygen;
pub mod sampling;
pub mod training;
pub mod util;
