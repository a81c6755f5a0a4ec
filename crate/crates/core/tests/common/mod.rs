#![allow(dead_code)]

use std::path::PathBuf;

use shmguard_core::api::EndpointConfig;
use shmguard_core::broker::{Broker, BrokerConfig, RegistryEntry, RunningBroker};
use shmguard_core::pki::KeySizes;
use shmguard_core::RegionConfig;
use tempfile::TempDir;

pub const VM: u32 = 1;

pub struct Harness {
    pub dir: TempDir,
    pub broker: RunningBroker,
}

impl Harness {
    pub fn region_path(&self) -> PathBuf {
        self.dir.path().join("region")
    }

    pub fn creds(&self) -> PathBuf {
        self.dir.path().join("creds")
    }

    pub fn endpoint(&self, service_id: u32) -> EndpointConfig {
        EndpointConfig::new(self.region_path(), self.creds(), VM, service_id)
    }
}

pub fn config(dir: &TempDir, services: u32, sessions: u32) -> BrokerConfig {
    let registry = (1..=services).map(|s| RegistryEntry::new(s, VM, format!("svc{s}"))).collect();
    let mut cfg = BrokerConfig::new(dir.path().join("region"), dir.path().join("creds"), registry)
        .with_max_sessions(sessions);
    cfg.region = RegionConfig { total_size: 32 << 20, ..cfg.region };
    cfg.key_sizes = KeySizes::FAST;
    cfg
}

pub fn boot(services: u32, sessions: u32) -> Harness {
    boot_with(services, sessions, |_| {})
}

pub fn boot_with(services: u32, sessions: u32, tweak: impl FnOnce(&mut BrokerConfig)) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(&dir, services, sessions);
    tweak(&mut cfg);
    let broker = Broker::boot(cfg).unwrap().spawn();
    Harness { dir, broker }
}
