pub mod cli;
pub mod config;
pub mod ddim;
pub mod error;
pub mod experiment;
pub mod latent_edit;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod schedule;
pub mod synthdata;
pub mod training;
