//! Websocket server, configuration and the bundled agent process.

pub mod agent_runner;
pub mod config;
pub mod gateway;
