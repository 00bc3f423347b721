//! Command line and HTTP front ends for the crystalbox workbench.

pub mod app;
pub mod envs;
pub mod service;
pub mod store;
