//! Template-ranking classification for aspect categories and their
//! sentiment.
//!
//! A candidate sentence such as "the sentiment polarity of price is
//! negative" is filled for every label, each candidate is scored by a small
//! encoder-decoder as the summed log-probability of its tokens given the
//! input sentence, and the best-scoring candidate decides the label.
//!
//! The crate is organized bottom-up:
//!
//! * [`text`] and [`corpus`]: tokenization, vocabularies, JSONL datasets and a
//!   synthetic corpus generator.
//! * [`templates`]: template registry and candidate enumeration.
//! * [`model`]: the encoder-decoder with analytic gradients and checkpoints.
//! * [`scoring`], [`training`], [`inference`]: score candidates, fit the model
//!   on (sentence, template) pairs and turn scores into predictions.
//! * [`baselines`]: classification-head and masked-label methods on the same
//!   backbone.
//! * [`eval`]: metrics and experiment protocols.
//! * [`cli`]: the `temprank` command-line tool.

pub mod baselines;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod inference;
pub mod io;
pub mod model;
pub mod scoring;
pub mod templates;
pub mod text;
pub mod training;

pub use error::{Error, Result};
