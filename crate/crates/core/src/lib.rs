//! Knowledge-grounded dialogue: prompt construction, a three-stage turn
//! pipeline over pluggable backends, automatic metrics, the multi-bot
//! racetrack state machine, evaluation drivers and training-data builders.

pub mod arena;
pub mod backends;
pub mod databuilder;
pub mod evalkit;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod tokenize;
pub mod types;
