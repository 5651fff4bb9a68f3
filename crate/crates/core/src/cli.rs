//! `zonoverify` command line: `verify` and `bounds`.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::engine::{verify, EngineConfig, Heuristic, Outcome};
use crate::network::{load_network, Network};
use crate::oracle::{exhaustive_reach_tiny, grid_falsify, Reachability};
use crate::refine::{refine_box_traced, RefineConfig};
use crate::setlib::{FactorBox, Zonotope};
use crate::specparse::{parse_vnnlib, write_witness, VerificationTask};

#[derive(Debug, Parser)]
#[command(name = "zonoverify", version, about = "Zonotope-based neural network verifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum HeuristicArg {
    Enclosure,
    Radius,
}

#[derive(Debug, clap::Args)]
struct Inputs {
    /// Network file (.nnet or .json)
    #[arg(long)]
    network: PathBuf,
    /// Property file (.vnnlib)
    #[arg(long)]
    spec: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Verify a property; prints sat, unsat, or unknown.
    Verify {
        #[command(flatten)]
        inputs: Inputs,
        /// Write the counterexample here when the result is sat
        #[arg(long)]
        witness: Option<PathBuf>,
        /// Write run statistics as JSON
        #[arg(long)]
        stats_json: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "on")]
        refine: Switch,
        #[arg(long, default_value_t = 8)]
        refine_iters: usize,
        #[arg(long, default_value_t = 4)]
        bound_iters: usize,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, value_enum, default_value = "enclosure")]
        heuristic: HeuristicArg,
        /// Wall-clock limit in seconds
        #[arg(long, default_value_t = 116.0)]
        timeout: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stop with unknown after this many subproblems
        #[arg(long)]
        max_subproblems: Option<usize>,
        /// Cross-check the verdict against brute-force oracles (small ReLU networks only)
        #[arg(long)]
        check_oracle: bool,
    },
    /// Dump per-iteration refinement bounds as CSV.
    Bounds {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value_t = 8)]
        refine_iters: usize,
        #[arg(long, default_value_t = 4)]
        bound_iters: usize,
        /// Which unsafe polytope of a disjunctive property to refine against
        #[arg(long, default_value_t = 0)]
        polytope: usize,
    },
}

fn load(inputs: &Inputs) -> Result<(Network, VerificationTask), String> {
    let net = load_network(&inputs.network).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(&inputs.spec)
        .map_err(|e| format!("cannot read {}: {e}", inputs.spec.display()))?;
    let task = parse_vnnlib(&text, net.input_dim(), net.output_dim()).map_err(|e| e.to_string())?;
    Ok((net, task))
}

/// Run the CLI and return the process exit code: 0 for a completed run, 2 for usage, input,
/// or runtime errors.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let _ = write!(err, "{e}");
            return 2;
        }
    };
    let result = match cli.command {
        Command::Verify {
            inputs,
            witness,
            stats_json,
            refine,
            refine_iters,
            bound_iters,
            batch,
            heuristic,
            timeout,
            seed,
            max_subproblems,
            check_oracle,
        } => {
            let cfg = EngineConfig {
                refine_on: matches!(refine, Switch::On),
                refine_iters,
                bound_iters,
                batch_size: batch,
                heuristic: match heuristic {
                    HeuristicArg::Enclosure => Heuristic::EnclosureGradient,
                    HeuristicArg::Radius => Heuristic::LocalRadius,
                },
                timeout_seconds: timeout,
                seed,
                max_subproblems: max_subproblems.unwrap_or(usize::MAX),
                ..EngineConfig::default()
            };
            cmd_verify(&inputs, &cfg, witness, stats_json, check_oracle, out, err)
        }
        Command::Bounds { inputs, refine_iters, bound_iters, polytope } => {
            let cfg = RefineConfig { refine_iters, bound_iters, ..RefineConfig::default() };
            cmd_bounds(&inputs, &cfg, polytope, out)
        }
    };
    match result {
        Ok(()) => 0,
        Err(msg) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
    }
}

fn cmd_verify(
    inputs: &Inputs,
    cfg: &EngineConfig,
    witness: Option<PathBuf>,
    stats_json: Option<PathBuf>,
    check_oracle: bool,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<(), String> {
    let (net, task) = load(inputs)?;
    let verdict = verify(&net, &task, cfg).map_err(|e| e.to_string())?;
    writeln!(out, "{}", verdict.result_word()).map_err(|e| e.to_string())?;

    if let (Some(path), Outcome::Falsified { input, output, .. }) = (&witness, &verdict.outcome) {
        std::fs::write(path, write_witness(input, output))
            .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    }
    if let Some(path) = &stats_json {
        let (reason, unsafe_index) = match &verdict.outcome {
            Outcome::Unknown(r) => (Some(*r), None),
            Outcome::Falsified { unsafe_index, .. } => (None, Some(*unsafe_index)),
            Outcome::Verified => (None, None),
        };
        let doc = json!({
            "result": verdict.result_word(),
            "reason": reason,
            "unsafe_index": unsafe_index,
            "iterations": verdict.stats.iterations,
            "subproblems": verdict.stats.subproblems,
            "peak_queue": verdict.stats.peak_queue,
            "wall_time_s": verdict.stats.wall_time_s,
        });
        let text = serde_json::to_string_pretty(&doc).map_err(|e| e.to_string())?;
        std::fs::write(path, text + "\n").map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    }
    if check_oracle {
        oracle_report(&net, &task, &verdict.outcome, cfg.seed, err);
    }
    Ok(())
}

fn oracle_report(net: &Network, task: &VerificationTask, outcome: &Outcome, seed: u64, err: &mut dyn Write) {
    let mut reachable = None;
    for (p, polytope) in task.unsafe_sets.iter().enumerate() {
        match exhaustive_reach_tiny(net, &task.input_box, polytope) {
            Ok(Reachability::UnsafeWitness(x)) => {
                reachable = Some((p, x));
                break;
            }
            Ok(Reachability::Safe) => {}
            Err(e) => {
                let _ = writeln!(err, "oracle: exhaustive check skipped ({e})");
                let sampled = task
                    .unsafe_sets
                    .iter()
                    .find_map(|u| grid_falsify(net, &task.input_box, u, 10_000, seed).ok().flatten());
                let _ = writeln!(
                    err,
                    "oracle: sampling {}",
                    if sampled.is_some() { "found a violation" } else { "found no violation" }
                );
                return;
            }
        }
    }
    let agrees = !matches!((outcome, &reachable), (Outcome::Verified, Some(_)) | (Outcome::Falsified { .. }, None));
    let summary = match &reachable {
        Some((p, _)) => format!("unsafe polytope {p} reachable"),
        None => "safe".to_string(),
    };
    let _ = writeln!(err, "oracle: {summary}; {}", if agrees { "consistent" } else { "DISAGREES with engine" });
}

fn cmd_bounds(inputs: &Inputs, cfg: &RefineConfig, polytope: usize, out: &mut dyn Write) -> Result<(), String> {
    let (net, task) = load(inputs)?;
    let unsafe_set = task
        .unsafe_sets
        .get(polytope)
        .ok_or_else(|| format!("property has {} unsafe polytopes, index {polytope} requested", task.unsafe_sets.len()))?;
    let root = Zonotope::from_interval(&task.input_box);
    let steps = refine_box_traced(&net, &root, unsafe_set, &FactorBox::unit(root.num_generators()), cfg)
        .map_err(|e| e.to_string())?;
    let mut text = String::from("iter,dim,lower,upper,space\n");
    for (k, step) in steps.iter().enumerate() {
        match (&step.factor_box, &step.output_hull) {
            (Some(bx), Some(hull)) => {
                for d in 0..bx.dim() {
                    text += &format!("{k},{d},{},{},factor\n", bx.lower()[d], bx.upper()[d]);
                }
                for d in 0..hull.dim() {
                    text += &format!("{k},{d},{},{},output\n", hull.lower[d], hull.upper[d]);
                }
            }
            _ => text += &format!("{k},,,,empty=1\n"),
        }
    }
    out.write_all(text.as_bytes()).map_err(|e| e.to_string())
}
