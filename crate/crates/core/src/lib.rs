//! Fine-tuning a small decoder-only transformer to predict the natural-language
//! feedback an annotator would give its answers.
//!
//! The crate covers the whole loop at desk scale: a tensor engine with
//! reverse-mode differentiation ([`tensor`]), a byte-level causal language
//! model ([`model`]), low-rank adapters on the attention projections
//! ([`lora`]), dataset handling ([`corpus`]), the training/annotation stages
//! ([`pipeline`]), QA scoring ([`eval`]) and attention-map export
//! ([`attention`]).

pub mod attention;
pub mod corpus;
pub mod eval;
pub mod lora;
pub mod model;
pub mod pipeline;
pub mod tensor;

pub mod io;
