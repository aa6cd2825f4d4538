//! relmix compiles a relational database schema into a fully Bayesian
//! generative model — one gated mixture model per table, linked along
//! foreign keys — and fits it with variational message passing.
//!
//! The pipeline: parse DDL ([`schema`]), ingest CSVs ([`data`]), compile
//! the factor-graph structure ([`compiler`]), train ([`engine`]), then
//! predict missing cells, answer probabilistic queries, and export
//! cluster assignments ([`query`]). [`synth`] holds the synthetic data
//! generator, the join-table baseline, and the benchmark harnesses.

pub mod compiler;
pub mod data;
pub mod engine;
pub mod error;
pub mod expfam;
pub mod posterior;
pub mod query;
pub mod schema;
pub mod special;
pub mod synth;

pub use error::{Error, Result};
