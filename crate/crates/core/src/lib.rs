//! Exact structural knowledge distillation for linear-chain CRFs, token
//! MaxEnt classifiers, head-selection dependency parsers and span-factored
//! NER, with a brute-force enumeration oracle for small instances.

pub mod chain_crf;
pub mod cli;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod head_parser;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod scorer;
pub mod span_ner;
pub mod token_maxent;
pub mod train_eval;
pub mod verify;

pub use error::{Error, Result};
