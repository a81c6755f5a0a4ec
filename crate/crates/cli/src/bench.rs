//! `shmguard bench`: measurement sweeps and the attack suite. Results go to
//! `--csv` (stdout by default); summaries go to stderr.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use shmguard_core::bench::{
    ablation, attack_suite, bench_handshake, multichannel, rtt, throughput, write_csv, AttackReport, Design, Mode,
    SecureTarget, Stats, DEFAULT_SEED, DEFAULT_SIZES, DEFAULT_TOTAL,
};
use shmguard_core::pki::load_trust;
use shmguard_core::region::REGION_ENV;

use crate::default_credentials;
use crate::process::BrokerProcess;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Handshake,
    Rtt,
    Throughput,
    Ablation,
    Multichannel,
    Attacks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Vanilla,
    Secure,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<Mode> {
        match self {
            ModeArg::Vanilla => vec![Mode::Vanilla],
            ModeArg::Secure => vec![Mode::Secure],
            ModeArg::Both => vec![Mode::Vanilla, Mode::Secure],
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    pub kind: Kind,
    /// Region of a running broker. Without it a private broker process is
    /// started for the run.
    #[arg(long, env = REGION_ENV)]
    pub region: Option<PathBuf>,
    /// Credentials of that broker [default: <region>.creds]
    #[arg(long)]
    pub credentials: Option<PathBuf>,
    /// VM whose registered services the run uses, in ascending id order.
    #[arg(long, default_value_t = 1)]
    pub vm: u32,
    /// Message sizes in bytes [default: 64..32768 in powers of two; 16384
    /// for multichannel]
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<usize>,
    /// Bytes streamed per size point (per pair for multichannel).
    #[arg(long, default_value_t = DEFAULT_TOTAL)]
    pub total_bytes: u64,
    /// Largest number of concurrent pairs for multichannel.
    #[arg(long, default_value_t = 8)]
    pub pairs: usize,
    /// Handshakes, round trips per size, or attack runs per scenario
    /// [default: 100, 10000, 30]
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Enforcement mode for rtt, throughput and multichannel.
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    pub mode: ModeArg,
    /// Designs for the ablation: naive, ring, ring+window [default: all]
    #[arg(long, value_delimiter = ',')]
    pub designs: Vec<String>,
    /// Use 1024-bit keys in the private broker. For tests only.
    #[arg(long)]
    pub fast_keys: bool,
}

/// What the run found. Only the attack suite can come back unclean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Clean,
    AttackNotBlocked,
}

impl BenchArgs {
    fn sizes(&self) -> Vec<usize> {
        match (self.sizes.is_empty(), self.kind) {
            (false, _) => self.sizes.clone(),
            (true, Kind::Multichannel) => vec![16 << 10],
            (true, _) => DEFAULT_SIZES.to_vec(),
        }
    }

    fn iterations(&self) -> usize {
        self.iterations.unwrap_or(match self.kind {
            Kind::Handshake => 100,
            Kind::Attacks => 30,
            _ => 10_000,
        })
    }

    fn needs_broker(&self) -> bool {
        match self.kind {
            Kind::Handshake | Kind::Attacks => true,
            Kind::Ablation => false,
            Kind::Rtt | Kind::Throughput | Kind::Multichannel => self.mode != ModeArg::Vanilla,
        }
    }

    fn services_needed(&self) -> usize {
        if self.kind == Kind::Multichannel {
            2 * self.pairs.max(1)
        } else {
            2
        }
    }
}

/// Connects to the broker named by `--region`, or starts a private one.
struct Broker {
    target: SecureTarget,
    _process: Option<BrokerProcess>,
}

fn broker(args: &BenchArgs, exe: &Path) -> anyhow::Result<Broker> {
    let need = args.services_needed();
    if let Some(region) = &args.region {
        let credentials = args.credentials.clone().unwrap_or_else(|| default_credentials(region));
        let trust = load_trust(&credentials).with_context(|| format!("loading trust from {}", credentials.display()))?;
        let mut services: Vec<u32> = trust.allowed.keys().filter(|k| k.vm_id == args.vm).map(|k| k.service_id).collect();
        services.sort_unstable();
        if services.len() < need {
            bail!("this run needs {need} services on VM {}, the broker has {}", args.vm, services.len());
        }
        let target = SecureTarget { region_path: region.clone(), credentials_dir: credentials, vm_id: args.vm, services };
        return Ok(Broker { target, _process: None });
    }
    let channels = (2 * need as u32).max(8);
    let process = BrokerProcess::spawn(exe, args.vm, need as u32, channels, args.fast_keys)?;
    let target = SecureTarget {
        region_path: process.region(),
        credentials_dir: process.credentials(),
        vm_id: args.vm,
        services: (1..=need as u32).collect(),
    };
    Ok(Broker { target, _process: Some(process) })
}

fn stats_row(label: &[String], s: &Stats) -> Vec<String> {
    let mut row = label.to_vec();
    row.push(s.n.to_string());
    row.extend([s.p50, s.p95, s.mean, s.min, s.max].map(|v| format!("{v:.3}")));
    row
}

const STATS: [&str; 6] = ["n", "p50_us", "p95_us", "mean_us", "min_us", "max_us"];

fn header(prefix: &[&'static str], tail: &[&'static str]) -> Vec<&'static str> {
    prefix.iter().chain(tail).copied().collect()
}

/// Runs one benchmark. `exe` is the `shmguard` binary, used to start a
/// private broker when no region is given.
pub fn run(args: &BenchArgs, exe: &Path) -> anyhow::Result<Outcome> {
    let broker = if args.needs_broker() { Some(broker(args, exe)?) } else { None };
    let target = broker.as_ref().map(|b| &b.target);
    let csv = args.csv.as_deref();
    let sizes = args.sizes();
    let iterations = args.iterations();
    match args.kind {
        Kind::Handshake => {
            let hs = bench_handshake(target.expect("broker"), iterations)?;
            eprintln!("handshake to grant:       {}", hs.granted);
            eprintln!("handshake to established: {}", hs.established);
            let rows = vec![stats_row(&["granted".into()], &hs.granted), stats_row(&["established".into()], &hs.established)];
            write_csv(csv, &header(&["phase"], &STATS), &rows)?;
        }
        Kind::Rtt => {
            let mut rows = Vec::new();
            for &size in &sizes {
                for mode in args.mode.modes() {
                    let samples = rtt(mode, target, size, iterations, args.seed)?;
                    let s = Stats::after_warmup(&samples);
                    eprintln!("rtt {mode:>7} {size:>6} B: {s}");
                    rows.push(stats_row(&[mode.to_string(), size.to_string()], &s));
                }
            }
            write_csv(csv, &header(&["mode", "size"], &STATS), &rows)?;
        }
        Kind::Throughput => {
            let mut rows = Vec::new();
            for mode in args.mode.modes() {
                for (size, gib) in throughput(mode, target, &sizes, args.total_bytes, args.seed)? {
                    eprintln!("throughput {mode:>7} {size:>6} B: {gib:.3} GiB/s");
                    rows.push(vec![mode.to_string(), size.to_string(), format!("{gib:.4}")]);
                }
            }
            write_csv(csv, &["mode", "size", "gib_per_s"], &rows)?;
        }
        Kind::Ablation => {
            let designs = if args.designs.is_empty() {
                Design::ALL.to_vec()
            } else {
                args.designs.iter().map(|d| d.parse()).collect::<Result<_, _>>()?
            };
            let mut rows = Vec::new();
            for (design, size, gib) in ablation(&designs, &sizes, args.total_bytes, args.seed)? {
                eprintln!("ablation {design:>11} {size:>6} B: {gib:.3} GiB/s");
                rows.push(vec![design.to_string(), size.to_string(), format!("{gib:.4}")]);
            }
            write_csv(csv, &["design", "size", "gib_per_s"], &rows)?;
        }
        Kind::Multichannel => {
            let mut rows = Vec::new();
            for mode in args.mode.modes() {
                for &size in &sizes {
                    for r in multichannel(mode, target, args.pairs, size, args.total_bytes, args.seed)? {
                        eprintln!(
                            "multichannel {mode:>7} {size:>6} B x{}: {:.3} GiB/s per channel, {:.3} aggregate",
                            r.pairs, r.per_channel, r.aggregate
                        );
                        rows.push(vec![
                            mode.to_string(),
                            size.to_string(),
                            r.pairs.to_string(),
                            format!("{:.4}", r.per_channel),
                            format!("{:.4}", r.aggregate),
                        ]);
                    }
                }
            }
            write_csv(csv, &["mode", "size", "pairs", "per_channel_gib_per_s", "aggregate_gib_per_s"], &rows)?;
        }
        Kind::Attacks => {
            let report = attack_suite(target.expect("broker"), iterations, args.seed)?;
            eprint!("{report}");
            write_csv(csv, &AttackReport::CSV_HEADER, &report.csv_rows())?;
            let (runs, permitted) = report.legitimate;
            if permitted != runs {
                log::warn!("only {permitted} of {runs} legitimate accesses were permitted");
            }
            return Ok(outcome(&report));
        }
    }
    Ok(Outcome::Clean)
}

pub fn outcome(report: &AttackReport) -> Outcome {
    if report.all_blocked() {
        Outcome::Clean
    } else {
        Outcome::AttackNotBlocked
    }
}
