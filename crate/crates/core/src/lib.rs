//! Counterfactual replay and hybrid Wizard-of-Oz tooling for multimodal
//! real-time support agents.

pub mod hash;
pub mod media;
pub mod session;
pub mod transcript;
pub mod context;
pub mod gateway;
pub mod prompt;
pub mod chain;
pub mod store;
pub mod batch;
pub mod engine;
pub mod library;
pub mod api;
pub mod relay;
pub mod cli;
pub mod config;
pub mod import;
pub mod simulate;
