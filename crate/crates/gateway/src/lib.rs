//! Batch CLI support and the live control/telemetry service.

pub mod hub;
pub mod plot;
pub mod protocol;
pub mod service;

pub use hub::Hub;
pub use protocol::{ClientMessage, ServerMessage, PROTOCOL_VERSION};
pub use service::{GatewayError, Service, ServiceConfig};
