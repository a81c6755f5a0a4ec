//! Fixtures shared by the criterion benches.

use shmguard_core::region::{ChannelRequest, RequestedState};
use shmguard_core::{Gate, Identity, Region, RegionConfig};
use tempfile::TempDir;

pub const CLIENT: Identity = Identity { service_id: 7, vm_id: 1, pid: 4242 };

/// A region with one TEMP channel held by [`CLIENT`], and a gate over it.
pub struct GateFixture {
    _dir: TempDir,
    pub gate: Gate,
    pub channel_id: u32,
    pub channel_len: u64,
}

impl GateFixture {
    pub fn new() -> GateFixture {
        let dir = tempfile::tempdir().expect("tempdir");
        let cfg = RegionConfig {
            total_size: 1 << 20,
            control_size: 4096,
            max_channels: 8,
            host_channel_size: 64 << 10,
            default_channel_size: 64 << 10,
        };
        let region = Region::create(&cfg, dir.path().join("region")).expect("region");
        let request = ChannelRequest {
            state: RequestedState::Temp,
            server: Identity::default(),
            client: CLIENT,
            session_id: 1,
        };
        let channel_len = 64 << 10;
        let channel_id = region.allocate_channel(request, channel_len).expect("channel");
        let gate = Gate::new(region, [CLIENT.service_id]);
        GateFixture { _dir: dir, gate, channel_id, channel_len: channel_len as u64 }
    }
}

impl Default for GateFixture {
    fn default() -> Self {
        Self::new()
    }
}
