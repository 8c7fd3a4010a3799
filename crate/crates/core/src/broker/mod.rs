//! In-memory key to tensor datastore served over TCP, plus its client.
//!
//! The server never blocks on a missing key: a GET miss answers `NOT_FOUND`
//! and waiting is done client-side with [`Client::poll`].

mod client;
mod server;
mod store;

pub use client::{Client, ClientError, DEFAULT_POLL_INTERVAL};
pub use server::{serve, BrokerError, BrokerHandle};
pub use store::{Store, StoreStats};
