//! Secure shared-memory channels between services on one host.

pub mod api;
pub mod bench;
pub mod broker;
pub mod gate;
pub mod handshake;
pub mod identity;
pub mod pki;
pub mod region;
pub mod shm;
pub mod transport;

pub use gate::{AccessKind, AccessRequest, Denied, Gate, MappedBuffer, Verdict};
pub use identity::{Identity, ServiceKey};
pub use region::{ChannelMeta, ChannelState, Region, RegionConfig, RegionError};
