//! Command implementations behind the `shmguard`, `echo-server` and
//! `echo-client` binaries.

pub mod bench;
pub mod broker;
pub mod echo;
pub mod process;

use std::path::{Path, PathBuf};

use clap::Args;
use shmguard_core::api::EndpointConfig;
use shmguard_core::region::REGION_ENV;

/// Where the broker writes credentials unless told otherwise: next to the
/// region file, as `<region>.creds`.
pub fn default_credentials(region: &Path) -> PathBuf {
    let mut s = region.as_os_str().to_owned();
    s.push(".creds");
    PathBuf::from(s)
}

#[derive(Args, Debug, Clone)]
pub struct EndpointArgs {
    /// Region file shared with the broker.
    #[arg(long, env = REGION_ENV)]
    pub region: PathBuf,
    /// Credentials directory published by the broker [default: <region>.creds]
    #[arg(long)]
    pub credentials: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub vm: u32,
    /// This endpoint's registered service id.
    #[arg(long)]
    pub service: u32,
}

impl EndpointArgs {
    pub fn config(&self) -> EndpointConfig {
        let creds = self.credentials.clone().unwrap_or_else(|| default_credentials(&self.region));
        EndpointConfig::new(&self.region, creds, self.vm, self.service)
    }
}

pub fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
}
