//! WebSocket gateway that lets a person play the human agent of a live
//! interactive session.

pub mod server;
pub mod wire;

pub use server::{Gateway, GatewayConfig, GatewayError, DEFAULT_PORT};
pub use wire::{Body, FrameError, WireMessage, PROTOCOL_VERSION};
