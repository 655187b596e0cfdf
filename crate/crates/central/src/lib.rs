//! Central service: authoritative roster, RBAC-guarded API, attendance
//! queries, live feed and reports.

pub mod api;
pub mod auth;
pub mod client;
pub mod config;
pub mod http;
pub mod runtime;
pub mod service;
pub mod state;

pub use runtime::CentralRuntime;
pub use service::{CentralService, ServiceError, ServiceOptions};
