use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use capio::harness::{map_slices, run_isolation_suite, run_sweep, SweepConfig, DUMP_BASE};
use capio::manifest::{Manifest, E1000E_MANIFEST};

const EXIT_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "capio", version, about = "Capability-sliced MMIO, simulated")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the isolation scenarios and the reachability audit.
    Audit {
        /// Manifest to audit instead of the shipped one.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory for audit.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the echo latency sweep.
    Sweep(SweepArgs),
    /// Print the slices a manifest produces.
    SliceDump { manifest: PathBuf },
    /// Check a manifest and list every violation.
    Validate { manifest: PathBuf },
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Payload sizes in bytes, comma separated.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Inter-packet delays in microseconds, comma separated.
    #[arg(long, value_delimiter = ',')]
    delays: Option<Vec<u64>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    syscall_ns: Option<f64>,
    #[arg(long)]
    mmio_ns: Option<f64>,
    #[arg(long)]
    copy_ns_per_byte: Option<f64>,
    /// One-way link propagation delay.
    #[arg(long)]
    link_ns: Option<f64>,
    /// Wire serialisation time per byte (8 is 1 Gb/s, 0 disables).
    #[arg(long)]
    wire_ns_per_byte: Option<f64>,
    /// Packets the peer keeps outstanding.
    #[arg(long)]
    window: Option<usize>,
    /// Directory for results.csv and improvement.csv; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Check(String),
}

fn load_manifest(path: Option<&Path>) -> Result<Manifest, Failure> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        None => E1000E_MANIFEST.to_string(),
    };
    Manifest::parse(&text).map_err(|e| Failure::Check(format!("parse error: {e}")))
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .and_then(|_| std::fs::write(dir.join(name), body))
        .map_err(|e| Failure::Usage(format!("{}: {e}", dir.display())))
}

fn audit(manifest: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), Failure> {
    let m = load_manifest(manifest.as_deref())?;
    let report = run_isolation_suite(&m);
    let text = report.render();
    print!("{text}");
    if let Some(dir) = out {
        write_file(&dir, "audit.txt", &text)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check("isolation suite failed".into()))
    }
}

fn sweep(a: SweepArgs) -> Result<(), Failure> {
    let mut cfg = SweepConfig::default();
    if a.manifest.is_some() {
        cfg.manifest = load_manifest(a.manifest.as_deref())?;
    }
    if let Some(v) = a.sizes {
        cfg.packet_sizes = v;
    }
    if let Some(v) = a.delays {
        cfg.delays_us = v;
    }
    if let Some(v) = a.trials {
        cfg.trials = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.syscall_ns {
        cfg.costs.syscall_ns = v;
    }
    if let Some(v) = a.mmio_ns {
        cfg.costs.mmio_access_ns = v;
    }
    if let Some(v) = a.copy_ns_per_byte {
        cfg.costs.copy_per_byte_ns = v;
    }
    if let Some(v) = a.link_ns {
        cfg.link_ns = v;
    }
    if let Some(v) = a.wire_ns_per_byte {
        cfg.wire_ns_per_byte = v;
    }
    if let Some(v) = a.window {
        cfg.window = v;
    }
    cfg.costs = cfg.costs.sanitized();
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let report = run_sweep(&cfg).map_err(|e| Failure::Check(e.to_string()))?;
    match a.out {
        Some(dir) => {
            write_file(&dir, "results.csv", &report.results_csv())?;
            write_file(&dir, "improvement.csv", &report.improvement_csv())?;
        }
        None => print!("{}", report.results_csv()),
    }
    let flagged: Vec<_> = report.rows.iter().filter(|r| r.flagged()).collect();
    for r in &flagged {
        eprintln!(
            "flagged: {} {} B / {} us dropped {} of {}",
            r.mode.name(),
            r.packet_size,
            r.delay_us,
            r.drops,
            r.trials
        );
    }
    if flagged.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "{} cell(s) over 1% drops",
            flagged.len()
        )))
    }
}

fn slice_dump(path: &Path) -> Result<(), Failure> {
    let m = load_manifest(Some(path))?;
    let m = m
        .into_validated()
        .map_err(|v| Failure::Check(format!("manifest has {} violation(s)", v.len())))?;
    let (_, table) = map_slices(&m).map_err(Failure::Check)?;
    print!("{}", table.dump(Some(DUMP_BASE)));
    Ok(())
}

fn validate(path: &Path) -> Result<(), Failure> {
    let m = load_manifest(Some(path))?;
    match m.validate() {
        Ok(()) => {
            println!(
                "{}: {} entries, {} ranges, ok",
                m.device_name,
                m.entries.len(),
                m.expand_all().len()
            );
            Ok(())
        }
        Err(violations) => {
            for v in &violations {
                println!("{v}");
            }
            Err(Failure::Check(format!("{} violation(s)", violations.len())))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Audit { manifest, out } => audit(manifest, out),
        Cmd::Sweep(a) => sweep(a),
        Cmd::SliceDump { manifest } => slice_dump(&manifest),
        Cmd::Validate { manifest } => validate(&manifest),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("capio: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("capio: {msg}");
            ExitCode::from(EXIT_FAIL)
        }
    }
}
