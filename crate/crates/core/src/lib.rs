pub mod apps;
pub mod controller;
pub mod engine;
pub mod node;
pub mod radio;
pub mod scenario;
pub mod switch;
pub mod telemetry;
