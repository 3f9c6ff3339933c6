pub mod config;
pub mod expr;
pub mod pipeline;
