//! Desk-scale laboratory for search-augmented reasoning.
//!
//! The crate wires together five things: a generator for synthetic multi-hop
//! question corpora with golden evidence documents, a BM25 retrieval index, a
//! discretized search-then-answer environment, a foraging-style reward
//! (outcome + information gain, discounted by an efficiency penalty), and a
//! PPO trainer for a compact log-linear policy. Everything is deterministic
//! under a fixed seed so experiments are byte-reproducible.

pub mod corpus;
pub mod datagen;
pub mod env;
pub mod eval;
pub mod policy;
pub mod reward;
pub mod train;
pub mod trajectory;

pub mod cli;
