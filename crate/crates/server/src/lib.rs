//! HTTP/JSON service around the assessment engine.

pub mod providers;
pub mod service;
pub mod store;

pub use service::{router, serve, ApiError, AppState, ServeError, ServiceConfig};
pub use store::{Store, StoreError};
