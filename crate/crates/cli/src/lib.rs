//! Command-line entry points and the HTTP inference service.

pub mod commands;
pub mod engine;
pub mod service;
