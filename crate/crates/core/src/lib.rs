pub mod classifier;
pub mod config;
pub mod geo;
pub mod home;
pub mod ingest;
pub mod metrics;
pub mod scenario;
pub mod synth;
pub mod time;
