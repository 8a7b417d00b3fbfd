//! Gender-bias auditing for masked language models.
//!
//! The crate is organised along the pipeline:
//!
//! - [`templates`]: probe sentences, occupations and name pairs
//! - [`scorer`]: pluggable masked-LM probability sources
//! - [`metrics`]: log-ratios, MALoR, name-set averaging, occupation profiles
//! - [`cda`]: counterfactual corpus construction
//! - [`pretrain`]: padding, MLM masking and the learning-rate schedule
//! - [`analysis`]: seed aggregation, convergence, paired t-test, reports
//! - [`audit`]: end-to-end scoring of one model

pub mod analysis;
pub mod audit;
pub mod cda;
pub mod error;
pub mod metrics;
pub mod pretrain;
pub mod scorer;
pub mod templates;
pub mod text;

pub use error::{Error, ErrorKind};
