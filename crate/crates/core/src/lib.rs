//! Federated service registries over a content-based publish/subscribe
//! substrate, with a deterministic discrete-event simulator.
//!
//! - [`dispatcher`]: broker overlay, subscription forwarding and replies.
//! - [`manager`]: the per-organization delivery manager and marketplace.
//! - [`directory`]: the lease-based federation directory.
//! - [`styles`]: the three federation cooperation styles.
//! - [`world`] and [`sim`]: the simulator, scenarios and reports.

pub mod directory;
pub mod dispatcher;
pub mod manager;
pub mod registry;
pub mod sim;
pub mod styles;
pub mod time;
pub mod topology;
pub mod world;
