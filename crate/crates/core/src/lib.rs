pub mod data;
pub mod heuristics;
pub mod nn;
pub mod par;
pub mod partition;
pub mod presets;
pub mod schedule;
pub mod transport;
