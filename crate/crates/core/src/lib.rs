#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod datamgr;
pub mod dispatch;
pub mod engine;
pub mod experiment;
pub mod graph;
pub mod ids;
pub mod kernel;
pub mod metrics;
pub mod platform;
pub mod provision;
pub mod resilience;
pub mod runner;
pub mod workloads;
