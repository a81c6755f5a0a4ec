use std::fmt;

/// Service id reserved for the trusted host itself.
pub const HOST_SERVICE_ID: u32 = 0;
/// Subject ids carried by the self-signed CA certificate.
pub const CA_SERVICE_ID: u32 = u32::MAX;

/// A registered service as named in the allowed-service list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ServiceKey {
    pub service_id: u32,
    pub vm_id: u32,
}

impl ServiceKey {
    pub const HOST: ServiceKey = ServiceKey { service_id: HOST_SERVICE_ID, vm_id: 0 };

    pub const fn new(service_id: u32, vm_id: u32) -> Self {
        Self { service_id, vm_id }
    }
}

impl fmt::Display for ServiceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "svc{}@vm{}", self.service_id, self.vm_id)
    }
}

/// A running endpoint: a service instance inside a particular process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Identity {
    pub service_id: u32,
    pub vm_id: u32,
    pub pid: u64,
}

impl Identity {
    pub const fn new(service_id: u32, vm_id: u32, pid: u64) -> Self {
        Self { service_id, vm_id, pid }
    }

    /// Identity of `service` running in the calling process.
    pub fn current(service_id: u32, vm_id: u32) -> Self {
        Self::new(service_id, vm_id, u64::from(std::process::id()))
    }

    pub const fn key(&self) -> ServiceKey {
        ServiceKey { service_id: self.service_id, vm_id: self.vm_id }
    }

    pub const fn is_empty(&self) -> bool {
        self.service_id == 0 && self.vm_id == 0 && self.pid == 0
    }
}

impl fmt::Display for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "svc{}@vm{}/pid{}", self.service_id, self.vm_id, self.pid)
    }
}
