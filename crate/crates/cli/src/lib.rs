//! Scripted multi-agent scenarios and report rendering for the `agentcache` binary.

pub mod plot;
pub mod scenario;
