pub mod ablation;
pub mod config;
pub mod metrics;
pub mod protocols;
pub mod reconstruct;
pub mod stages;
pub mod toydata;
