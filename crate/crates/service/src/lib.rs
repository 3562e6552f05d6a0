pub mod api;
pub mod config;
pub mod pipeline;
pub mod report;
pub mod state;
pub mod store;
