//! A private broker process for benchmark runs.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use tempfile::TempDir;

use crate::broker::READY;

/// A broker child process over a throwaway region. Sent SIGTERM on drop.
pub struct BrokerProcess {
    child: Child,
    dir: TempDir,
}

impl BrokerProcess {
    /// Starts `exe broker` with `services` registered on VM `vm` (ids
    /// 1..=services) and waits until it reports ready.
    pub fn spawn(exe: &Path, vm: u32, services: u32, max_channels: u32, fast_keys: bool) -> anyhow::Result<Self> {
        let dir = tempfile::tempdir()?;
        let registry = dir.path().join("registry");
        let lines: String = (1..=services).map(|s| format!("{s},{vm},svc{s}\n")).collect();
        std::fs::write(&registry, lines)?;
        let mut cmd = Command::new(exe);
        cmd.arg("broker")
            .arg("--region")
            .arg(dir.path().join("region"))
            .arg("--registry")
            .arg(&registry)
            .arg("--credentials")
            .arg(dir.path().join("creds"))
            .arg("--max-channels")
            .arg(max_channels.to_string())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        if fast_keys {
            cmd.arg("--fast-keys");
        }
        let mut child = cmd.spawn().with_context(|| format!("spawning {}", exe.display()))?;
        let stdout = child.stdout.take().expect("piped");
        let mut line = String::new();
        BufReader::new(stdout).read_line(&mut line)?;
        let mut process = BrokerProcess { child, dir };
        if !line.starts_with(READY) {
            let status = process.child.wait()?;
            bail!("broker exited before becoming ready ({status})");
        }
        Ok(process)
    }

    pub fn region(&self) -> PathBuf {
        self.dir.path().join("region")
    }

    pub fn credentials(&self) -> PathBuf {
        self.dir.path().join("creds")
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }
}

impl Drop for BrokerProcess {
    fn drop(&mut self) {
        terminate(&mut self.child, Duration::from_secs(10));
    }
}

/// SIGTERM, then SIGKILL if the child is still around after `grace`.
pub fn terminate(child: &mut Child, grace: Duration) {
    if matches!(child.try_wait(), Ok(Some(_))) {
        return;
    }
    // SAFETY: plain kill(2) on our own child's pid.
    unsafe {
        libc::kill(child.id() as libc::pid_t, libc::SIGTERM);
    }
    let until = Instant::now() + grace;
    while Instant::now() < until {
        if matches!(child.try_wait(), Ok(Some(_))) {
            return;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    let _ = child.kill();
    let _ = child.wait();
}
