pub mod config;
pub mod dataset;
pub mod offline;
pub mod online;
pub mod report;
