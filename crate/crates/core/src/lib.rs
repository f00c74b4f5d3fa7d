//! Persona-conditioned opinion prediction.
//!
//! Given a user's demographics and ideology (the explicit persona) and their
//! answers to earlier survey questions (the implicit persona), the pipeline
//! filters the explicit attributes, ranks the past opinions by usefulness,
//! reasons through values, beliefs and norms, and votes across several
//! history sizes.

pub mod consistency;
pub mod dataset;
pub mod eval;
pub mod experiments;
pub mod fea;
pub mod listparse;
pub mod model;
pub mod pipeline;
pub mod provider;
pub mod ranking;
pub mod reasoning;
pub mod templates;
