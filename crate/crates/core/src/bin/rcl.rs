use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use rcl::evalsuite::{
    export_features, landscape_slice, mean_fgsm_accuracy, random_projection, sample_rows, worst_case_flatness,
    write_adv_eval, write_features, write_landscape, AdvRow, FlatnessProbe, ProbeMode,
};
use rcl::gpm::ProjectionMemory;
use rcl::harness::{generate, load_run_artifacts, persist_run, run_experiment, ExperimentConfig, TaskStream};
use rcl::model::Network;
use rcl::trainer::Method;
use rcl::RclError;

#[derive(Parser)]
#[command(name = "rcl", version, about = "Robust continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablate {
    Ua,
    Phi,
    UaGradOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Worst,
    Slice,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    DeskRings,
}

#[derive(Subcommand)]
enum Command {
    /// Train a task sequence and write metrics, the accuracy matrix, a checkpoint and the memory.
    Run {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        seed: Option<u64>,
        /// Half-open range such as `0..5`; one run directory per seed.
        #[arg(long, conflicts_with = "seed")]
        seeds: Option<String>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, value_enum)]
        ablate: Vec<Ablate>,
    },
    /// Accuracy under FGSM for each budget, averaged over tasks.
    EvalFgsm {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.15")]
        mu_list: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Worst-case flatness and a random-direction loss landscape.
    Flatness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        xi: f64,
        #[arg(long, value_enum, default_value = "slice")]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        task: usize,
        #[arg(long, default_value_t = 10)]
        directions: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Projects hidden features onto the unit circle.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 200)]
        per_task: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prints basis widths and per-task additions of a saved memory.
    GpmInspect {
        #[arg(long)]
        memory: PathBuf,
    },
}

/// Failures before any work starts; these exit with status 1.
struct Setup(RclError);

enum Failure {
    Setup(RclError),
    Runtime(RclError),
}

impl From<RclError> for Failure {
    fn from(e: RclError) -> Self {
        Failure::Runtime(e)
    }
}

impl From<Setup> for Failure {
    fn from(e: Setup) -> Self {
        Failure::Setup(e.0)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Setup(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { config, preset, seed, seeds, method, out_dir, ablate } => {
            let mut exp = match (config, preset) {
                (Some(path), _) => ExperimentConfig::load(&path).map_err(Setup)?,
                (None, Some(Preset::DeskRings)) => ExperimentConfig::desk_rings(Method::Rcl, 0),
                (None, None) => return Err(Setup(RclError::config("config", "pass --config or --preset")).into()),
            };
            if let Some(m) = method {
                exp.train.method = m;
            }
            if let Some(dir) = out_dir {
                exp.out_dir = dir;
            }
            for a in ablate {
                match a {
                    Ablate::Ua => exp.train.ablations.disable_ua = true,
                    Ablate::Phi => exp.train.ablations.disable_phi = true,
                    Ablate::UaGradOnly => exp.train.ablations.ua_in_gradient_only = true,
                }
            }
            let seed_list = match (seeds, seed) {
                (Some(range), _) => parse_range(&range).map_err(Setup)?,
                (None, Some(s)) => vec![s],
                (None, None) => vec![exp.seed],
            };
            exp.validate().map_err(Setup)?;
            let multi = seed_list.len() > 1;
            let runs: Vec<(u64, PathBuf, ExperimentConfig)> = seed_list
                .into_iter()
                .map(|s| {
                    let run = ExperimentConfig { seed: s, ..exp.clone() };
                    let dir = if multi { run.out_dir.join(format!("seed_{s}")) } else { run.out_dir.clone() };
                    (s, dir, run)
                })
                .collect();
            // Seeds are independent, so each gets its own thread.
            let results: Vec<Result<Option<String>, RclError>> = std::thread::scope(|scope| {
                let handles: Vec<_> = runs
                    .iter()
                    .map(|(s, dir, run)| {
                        scope.spawn(move || {
                            let (_, outcome) = run_experiment(run)?;
                            persist_run(&outcome, serde_json::json!({ "experiment": run }), dir)?;
                            let r = &outcome.record;
                            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
                            eprintln!("seed {s} method {} acc {} bwt {} -> {}", r.method, fmt(r.acc), fmt(r.bwt), dir.display());
                            Ok(r.error.clone())
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
            });
            for res in results {
                if let Some(err) = res? {
                    return Err(RclError::contract("run", err).into());
                }
            }
            Ok(())
        }
        Command::EvalFgsm { checkpoint, mu_list, out } => {
            let (net, exp, stream) = open_checkpoint(&checkpoint)?;
            let method = exp.train.method.to_string();
            let clean = mean_fgsm_accuracy(&net, &stream.tasks, 0.0)?;
            let mut rows = Vec::with_capacity(mu_list.len());
            for mu in mu_list {
                let accuracy = mean_fgsm_accuracy(&net, &stream.tasks, mu)?;
                eprintln!("mu {mu} accuracy {accuracy:.2} drop {:.2}", clean - accuracy);
                rows.push(AdvRow { mu, method: method.clone(), accuracy, delta: clean - accuracy });
            }
            let path = out.unwrap_or_else(|| sibling(&checkpoint, "adv_eval.csv"));
            write_adv_eval(&path, &rows)?;
            Ok(())
        }
        Command::Flatness { checkpoint, xi, mode, task, directions, out } => {
            let (net, _, stream) = open_checkpoint(&checkpoint)?;
            let data = stream
                .tasks
                .get(task)
                .ok_or_else(|| Setup(RclError::config("task", format!("{task} out of range"))))?;
            let f = worst_case_flatness(&net, task, &data.train, xi)?;
            eprintln!("worst-case flatness {} (xi {xi}, task {task}{})", f.value, if f.degenerate { ", degenerate" } else { "" });
            if matches!(mode, Mode::Slice) {
                let probe = FlatnessProbe { xi, mode: ProbeMode::RandomSlice, directions, ..FlatnessProbe::default() };
                let table = landscape_slice(&net, task, &data.train, &probe, net.seed())?;
                let path = out.unwrap_or_else(|| sibling(&checkpoint, "landscape.csv"));
                write_landscape(&path, &probe.spans, &table)?;
            }
            Ok(())
        }
        Command::ExportFeatures { checkpoint, per_task, out } => {
            let (net, _, stream) = open_checkpoint(&checkpoint)?;
            let projection = random_projection(net.feature_dim(), net.seed());
            let mut rows = Vec::new();
            for data in &stream.tasks {
                let picked = sample_rows(&data.test, per_task, net.seed().wrapping_add(data.task as u64))?;
                let labels = data.global_labels(&picked);
                rows.extend(export_features(&net, &picked.x, &labels, data.task, &projection)?);
            }
            let path = out.unwrap_or_else(|| sibling(&checkpoint, "features.csv"));
            write_features(&path, &rows)?;
            eprintln!("{} rows -> {}", rows.iter().filter(|r| !r.degenerate).count(), path.display());
            Ok(())
        }
        Command::GpmInspect { memory } => {
            let mem = ProjectionMemory::load(&memory).map_err(Setup)?;
            eprintln!("eps_th {}", mem.eps_th());
            for (layer, basis) in mem.bases() {
                eprintln!("layer {layer}: {} of {} directions", basis.cols(), basis.rows());
            }
            for (t, added) in mem.history().iter().enumerate() {
                let parts: Vec<String> = added.iter().map(|(l, k)| format!("{l}:+{k}")).collect();
                eprintln!("after task {t}: {}", parts.join(" "));
            }
            Ok(())
        }
    }
}

fn sibling(checkpoint: &Path, name: &str) -> PathBuf {
    checkpoint.with_file_name(name)
}

fn open_checkpoint(path: &Path) -> Result<(Network, ExperimentConfig, TaskStream), Failure> {
    let (net, meta, _) = load_run_artifacts(path).map_err(Setup)?;
    let exp: ExperimentConfig = serde_json::from_value(meta["experiment"].clone())
        .map_err(|e| Setup(RclError::config("checkpoint.experiment", e.to_string())))?;
    let stream = generate(&exp.dataset, exp.seed)?;
    Ok((net, exp, stream))
}

fn parse_range(s: &str) -> Result<Vec<u64>, RclError> {
    let bad = || RclError::config("seeds", format!("expected a range like 0..5, got {s:?}"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a >= b {
        return Err(bad());
    }
    Ok((a..b).collect())
}
