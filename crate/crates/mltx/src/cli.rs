//! The `mltx` command line: simulate workloads, check traces, and fuzz.
//!
//! Exit codes: 0 success (and, for `check`, serializable), 1 parse/config
//! errors, 2 a simulation that hit the round limit, 3 a serializability
//! violation. Verdicts and summaries are JSON on stdout; diagnostics go to
//! stderr. `MLTX_SEED` supplies the default seed when `--seed` is omitted.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checker::{audit_locks, check_serializable, CheckError};
use crate::executor::{run, SchedulerKind, SimConfig};
use crate::locks::SubsumptionMode;
use crate::ops::{splitmix64, OperatorRegistry};
use crate::synth::{generate_workload, FuzzConfig};
use crate::trace::{workload_digest, Outcome, Trace};
use crate::workload::Workload;

fn default_seed() -> u64 {
    std::env::var("MLTX_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0)
}

fn subsumption(strict: bool) -> SubsumptionMode {
    if strict {
        SubsumptionMode::Strict
    } else {
        SubsumptionMode::Safe
    }
}

fn read_file(path: &Path, what: &str) -> Result<String, String> {
    std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {what} {}: {e}", path.display()))
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Workload file.
    #[arg(long)]
    pub workload: PathBuf,
    /// Choice and scheduler seed (default: $MLTX_SEED or 0).
    #[arg(long, default_value_t = default_seed())]
    pub seed: u64,
    /// Agent scheduler: rr | random.
    #[arg(long, default_value = "rr")]
    pub scheduler: SchedulerKind,
    /// Reproduce the one-directional subsumption check verbatim.
    #[arg(long)]
    pub strict_subsumption: bool,
    /// Stagger machine registration over early rounds.
    #[arg(long)]
    pub stagger: bool,
    /// Round bound (default: 100 x total steps).
    #[arg(long)]
    pub max_rounds: Option<u64>,
    /// Trace output file (JSON Lines).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_simulate(args: &SimulateArgs) -> i32 {
    let text = match read_file(&args.workload, "workload") {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let registry = OperatorRegistry::builtin();
    let workload = match Workload::parse(&text, &registry) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("error: {}: {e}", args.workload.display());
            return 1;
        }
    };
    let cfg = SimConfig {
        seed: args.seed,
        scheduler: args.scheduler,
        subsumption: subsumption(args.strict_subsumption),
        max_rounds: args.max_rounds,
        stagger: args.stagger,
    };
    let result = run(&workload, &workload_digest(&text), &cfg);
    if let Err(e) = std::fs::write(&args.out, result.trace.to_jsonl()) {
        eprintln!("error: cannot write trace {}: {e}", args.out.display());
        return 1;
    }
    match result.trace.footer.outcome {
        Outcome::Complete => 0,
        Outcome::RoundLimitExceeded | Outcome::Stuck => {
            eprintln!(
                "warning: run did not complete ({:?}) after {} rounds",
                result.trace.footer.outcome, result.trace.footer.rounds
            );
            2
        }
    }
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Workload file the trace was produced from.
    #[arg(long)]
    pub workload: PathBuf,
    /// Trace file to check.
    #[arg(long)]
    pub trace: PathBuf,
}

pub fn cmd_check(args: &CheckArgs) -> i32 {
    let text = match read_file(&args.workload, "workload") {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let trace_text = match read_file(&args.trace, "trace") {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let registry = OperatorRegistry::builtin();
    let workload = match Workload::parse(&text, &registry) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("error: {}: {e}", args.workload.display());
            return 1;
        }
    };
    let trace = match Trace::parse(&trace_text) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", args.trace.display());
            return 1;
        }
    };
    match check_serializable(&trace, &workload, &text) {
        Ok(verdict) => {
            println!("{}", serde_json::to_string_pretty(&verdict).expect("verdict serializes"));
            if verdict.serializable {
                0
            } else {
                3
            }
        }
        Err(e @ (CheckError::DigestMismatch { .. } | CheckError::MalformedTrace(_))) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[derive(Debug, Args, Clone)]
pub struct FuzzArgs {
    /// Number of generate-simulate-check runs.
    #[arg(long, default_value_t = 500)]
    pub runs: u64,
    /// Base seed; run i uses a seed derived from it (default: $MLTX_SEED or 0).
    #[arg(long, default_value_t = default_seed())]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub min_machines: usize,
    #[arg(long, default_value_t = 5)]
    pub max_machines: usize,
    #[arg(long, default_value_t = 4)]
    pub min_locations: usize,
    #[arg(long, default_value_t = 10)]
    pub max_locations: usize,
    #[arg(long, default_value_t = 4)]
    pub min_steps: usize,
    #[arg(long, default_value_t = 12)]
    pub max_steps: usize,
    /// Maximum location tree depth.
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[arg(long, default_value_t = 0.5)]
    pub partial_ratio: f64,
    /// Generate operator mixes and invalid arguments that force aborts.
    #[arg(long)]
    pub adversarial: bool,
    /// Check runs under the paper-verbatim subsumption rule.
    #[arg(long)]
    pub strict_subsumption: bool,
    /// Keep fuzzing after a violation instead of stopping.
    #[arg(long)]
    pub keep_going: bool,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Directory for failing-run artifacts.
    #[arg(long, default_value = "fuzz-artifacts")]
    pub artifacts: PathBuf,
}

#[derive(Debug, Default, Serialize)]
pub struct FuzzSummary {
    pub runs: u64,
    pub completed: u64,
    pub round_limited: u64,
    pub commits: u64,
    pub aborts: u64,
    /// Runs in which at least one deadlock was detected.
    pub deadlocks_detected: u64,
    pub violations: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub violation_seeds: Vec<u64>,
}

/// One generate-simulate-check run. Returns (summary delta, violation).
fn fuzz_one(args: &FuzzArgs, run_seed: u64, scheduler: SchedulerKind) -> (FuzzSummary, Option<String>) {
    let mut s = FuzzSummary { runs: 1, ..FuzzSummary::default() };
    let cfg = FuzzConfig {
        machines: args.min_machines..=args.max_machines,
        depth: args.depth,
        locations: args.min_locations..=args.max_locations,
        steps: args.min_steps..=args.max_steps,
        partial_ratio: args.partial_ratio,
        adversarial: args.adversarial,
    };
    let text = generate_workload(&cfg, run_seed);
    let registry = OperatorRegistry::builtin();
    let workload = match Workload::parse(&text, &registry) {
        Ok(w) => w,
        Err(e) => return (s, Some(format!("generated workload does not parse: {e}"))),
    };
    let sim_cfg = SimConfig {
        seed: run_seed,
        scheduler,
        subsumption: subsumption(args.strict_subsumption),
        max_rounds: None,
        stagger: false,
    };
    let result = run(&workload, &workload_digest(&text), &sim_cfg);
    s.commits += result.trace.footer.committed.len() as u64;
    s.aborts += result.trace.footer.aborted.len() as u64;
    let deadlocked = result
        .trace
        .events()
        .any(|(_, e)| matches!(e, crate::trace::Event::Victimized { .. }));
    if deadlocked {
        s.deadlocks_detected += 1;
    }
    match result.trace.footer.outcome {
        Outcome::Complete => s.completed += 1,
        Outcome::RoundLimitExceeded => {
            s.round_limited += 1;
            return (s, None); // committed prefix still checked below if desired
        }
        Outcome::Stuck => {
            return (s, Some("run stuck: no agent enabled".to_string()));
        }
    }
    if let Err(e) = audit_locks(&result.trace) {
        return (s, Some(format!("lock audit failed: {e}")));
    }
    match check_serializable(&result.trace, &workload, &text) {
        Ok(v) if v.serializable => (s, None),
        Ok(v) => (s, Some(format!("not serializable: {:?}", v.divergence))),
        Err(e) => (s, Some(format!("check failed: {e}"))),
    }
}

fn write_artifacts(dir: &Path, run_seed: u64, args: &FuzzArgs, scheduler: SchedulerKind, reason: &str) {
    let cfg = FuzzConfig {
        machines: args.min_machines..=args.max_machines,
        depth: args.depth,
        locations: args.min_locations..=args.max_locations,
        steps: args.min_steps..=args.max_steps,
        partial_ratio: args.partial_ratio,
        adversarial: args.adversarial,
    };
    let text = generate_workload(&cfg, run_seed);
    let run_dir = dir.join(format!("run-{run_seed}"));
    if std::fs::create_dir_all(&run_dir).is_err() {
        return;
    }
    let _ = std::fs::write(run_dir.join("workload.mltx"), &text);
    let _ = std::fs::write(
        run_dir.join("repro.txt"),
        format!("seed: {run_seed}\nscheduler: {scheduler}\nreason: {reason}\n"),
    );
    if let Ok(workload) = Workload::parse(&text, &OperatorRegistry::builtin()) {
        let sim_cfg = SimConfig {
            seed: run_seed,
            scheduler,
            subsumption: subsumption(args.strict_subsumption),
            max_rounds: None,
            stagger: false,
        };
        let result = run(&workload, &workload_digest(&text), &sim_cfg);
        let _ = std::fs::write(run_dir.join("trace.jsonl"), result.trace.to_jsonl());
    }
}

pub fn cmd_fuzz(args: &FuzzArgs) -> i32 {
    if args.min_machines > args.max_machines
        || args.min_locations > args.max_locations
        || args.min_steps > args.max_steps
        || args.depth == 0
        || !(0.0..=1.0).contains(&args.partial_ratio)
    {
        eprintln!("error: empty range or invalid ratio in fuzz configuration");
        return 1;
    }
    let summary = Mutex::new(FuzzSummary::default());
    let stop = AtomicBool::new(false);
    let jobs = args
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        .max(1);

    std::thread::scope(|scope| {
        for worker in 0..jobs {
            let summary = &summary;
            let stop = &stop;
            let args = args.clone();
            scope.spawn(move || {
                let mut i = worker as u64;
                while i < args.runs && !stop.load(Ordering::Relaxed) {
                    let run_seed = splitmix64(args.seed ^ splitmix64(i));
                    let scheduler = if i % 2 == 0 {
                        SchedulerKind::RoundRobin
                    } else {
                        SchedulerKind::Random
                    };
                    let (delta, violation) = fuzz_one(&args, run_seed, scheduler);
                    let mut s = summary.lock().expect("summary lock");
                    s.runs += delta.runs;
                    s.completed += delta.completed;
                    s.round_limited += delta.round_limited;
                    s.commits += delta.commits;
                    s.aborts += delta.aborts;
                    s.deadlocks_detected += delta.deadlocks_detected;
                    if let Some(reason) = violation {
                        s.violations += 1;
                        s.violation_seeds.push(run_seed);
                        eprintln!("violation (seed {run_seed}, {scheduler}): {reason}");
                        drop(s);
                        write_artifacts(&args.artifacts, run_seed, &args, scheduler, &reason);
                        if !args.keep_going {
                            stop.store(true, Ordering::Relaxed);
                        }
                    }
                    i += jobs as u64;
                }
            });
        }
    });

    let mut summary = summary.into_inner().expect("summary lock");
    summary.violation_seeds.sort_unstable();
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    if summary.violations > 0 {
        3
    } else {
        0
    }
}

#[derive(Debug, Parser)]
#[command(name = "mltx", version, about = "Multi-level transaction simulator and serializability checker")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a workload under the transaction controller and write a trace.
    Simulate(SimulateArgs),
    /// Check a trace against the serial-replay oracle.
    Check(CheckArgs),
    /// Generate-simulate-check loops with random workloads.
    Fuzz(FuzzArgs),
}

pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Check(args) => cmd_check(args),
        Command::Fuzz(args) => cmd_fuzz(args),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    const WORKLOAD: &str = "\
init /x = 0
machine m1
shared /x
step:
  partial /x add 1
";

    #[test]
    fn simulate_then_check_round_trip() {
        let w = tmp(WORKLOAD);
        let out = tempfile::NamedTempFile::new().unwrap();
        let code = cmd_simulate(&SimulateArgs {
            workload: w.path().to_path_buf(),
            seed: 1,
            scheduler: SchedulerKind::RoundRobin,
            strict_subsumption: false,
            stagger: false,
            max_rounds: None,
            out: out.path().to_path_buf(),
        });
        assert_eq!(code, 0);
        let code = cmd_check(&CheckArgs {
            workload: w.path().to_path_buf(),
            trace: out.path().to_path_buf(),
        });
        assert_eq!(code, 0);
    }

    #[test]
    fn simulate_missing_file_is_config_error() {
        let out = tempfile::NamedTempFile::new().unwrap();
        let code = cmd_simulate(&SimulateArgs {
            workload: PathBuf::from("/nonexistent/workload.mltx"),
            seed: 1,
            scheduler: SchedulerKind::RoundRobin,
            strict_subsumption: false,
            stagger: false,
            max_rounds: None,
            out: out.path().to_path_buf(),
        });
        assert_eq!(code, 1);
    }

    #[test]
    fn simulate_deterministic_bytes() {
        let w = tmp(WORKLOAD);
        let mut bytes = Vec::new();
        for _ in 0..2 {
            let out = tempfile::NamedTempFile::new().unwrap();
            let code = cmd_simulate(&SimulateArgs {
                workload: w.path().to_path_buf(),
                seed: 42,
                scheduler: SchedulerKind::Random,
                strict_subsumption: false,
                stagger: false,
                max_rounds: None,
                out: out.path().to_path_buf(),
            });
            assert_eq!(code, 0);
            bytes.push(std::fs::read(out.path()).unwrap());
        }
        assert_eq!(bytes[0], bytes[1]);
    }

    #[test]
    fn check_mismatched_workload_is_error() {
        let w = tmp(WORKLOAD);
        let out = tempfile::NamedTempFile::new().unwrap();
        cmd_simulate(&SimulateArgs {
            workload: w.path().to_path_buf(),
            seed: 1,
            scheduler: SchedulerKind::RoundRobin,
            strict_subsumption: false,
            stagger: false,
            max_rounds: None,
            out: out.path().to_path_buf(),
        });
        let other = tmp("init /y = 1\nmachine m9\nstep:\n  read /y\n");
        let code = cmd_check(&CheckArgs {
            workload: other.path().to_path_buf(),
            trace: out.path().to_path_buf(),
        });
        assert_eq!(code, 1);
    }

    #[test]
    fn fuzz_zero_runs_is_empty_success() {
        let dir = tempfile::tempdir().unwrap();
        let code = cmd_fuzz(&FuzzArgs {
            runs: 0,
            seed: 0,
            min_machines: 2,
            max_machines: 3,
            min_locations: 4,
            max_locations: 6,
            min_steps: 2,
            max_steps: 4,
            depth: 2,
            partial_ratio: 0.5,
            adversarial: false,
            strict_subsumption: false,
            keep_going: false,
            jobs: Some(2),
            artifacts: dir.path().to_path_buf(),
        });
        assert_eq!(code, 0);
    }

    #[test]
    fn fuzz_small_batch_passes() {
        let dir = tempfile::tempdir().unwrap();
        let code = cmd_fuzz(&FuzzArgs {
            runs: 10,
            seed: 123,
            min_machines: 2,
            max_machines: 3,
            min_locations: 4,
            max_locations: 6,
            min_steps: 2,
            max_steps: 5,
            depth: 3,
            partial_ratio: 0.5,
            adversarial: false,
            strict_subsumption: false,
            keep_going: false,
            jobs: Some(2),
            artifacts: dir.path().to_path_buf(),
        });
        assert_eq!(code, 0);
    }
}
