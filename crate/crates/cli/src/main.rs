//! `opa`: data generation, pretraining, rollouts, one-shot adaptation,
//! benchmarking, plotting and the interactive service.
//!
//! Logs go to stderr; data goes to files or stdout. Failures print a
//! `CODE=...` line on stderr and exit 2 (usage), 3 (data) or 4 (internal).

mod config;
mod error;
mod plot;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use config::RunConfig;
use error::CliError;
use opa_core::adapter::{adapt, instance_table, PerturbationRecord};
use opa_core::checkpoint::Checkpoint;
use opa_core::datagen::{build_dataset, DatagenConfig, DatasetFile};
use opa_core::eval::{default_horizon, default_suite, interpolation_sweep, run_benchmark, spearman, time_sweep, TIME_SWEEP_CSV_HEADER};
use opa_core::par::Exec;
use opa_core::policy::{rollout_open_loop, PreferenceTable};
use opa_core::rotmath::Dim;
use opa_core::scene::Scene;
use opa_core::trainer::{pretrain, LogRow, Split, LOG_HEADER};
use plot::Series;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const POSITION_FILE: &str = "position.opad";
const ORIENTATION_FILE: &str = "orientation.opad";

#[derive(Debug, Parser)]
#[command(name = "opa", version, about = "Object-centric preference adaptation pipeline")]
struct Cli {
    /// TOML run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stage [default: 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Spatial dimension, 2 or 3 [default: 2, or the checkpoint's].
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(2..=3))]
    dim: Option<u8>,
    /// Output file or directory (per subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint file [default: checkpoint.opac].
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Scene document (JSON).
    #[arg(long, global = true)]
    scene: Option<PathBuf>,
    /// Perturbation record document (JSON).
    #[arg(long, global = true)]
    perturbation: Option<PathBuf>,
    /// Adaptation wall-clock budget in seconds [default: 1.0].
    #[arg(long, global = true)]
    budget_seconds: Option<f64>,
    /// Adaptation restarts [default: 8].
    #[arg(long, global = true)]
    restarts: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build position and orientation datasets into the --out directory [default: data].
    GenData {
        /// Samples per dataset [default: 2000].
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train both relation networks; writes the checkpoint to --out [default: checkpoint.opac] and a training log next to it.
    Pretrain {
        /// Directory holding the generated datasets.
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Training epochs [default: 50].
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Open-loop rollout of --scene; writes the trajectory to --out or stdout.
    Rollout {
        /// Adapted preference table (JSON) instead of the checkpoint's anchors.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Steps to roll out [default: straight-line distance / alpha + 10].
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Adapt preferences to --perturbation; writes the table to --out [default: table.json] and a summary to stdout.
    Adapt,
    /// Adapt once on the scripted suite and evaluate on held-out scenes; writes into --out [default: report].
    Eval {
        /// Held-out scenes [default: 5].
        #[arg(long)]
        held_out: Option<usize>,
        /// Skip the adaptation-time and repel-attract sweeps.
        #[arg(long)]
        no_sweeps: bool,
    },
    /// Render SVG charts from an eval directory and an optional training log.
    Plot {
        /// Directory written by `eval`.
        #[arg(long, default_value = "report")]
        input: PathBuf,
        /// Training log written by `pretrain`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Serve interactive 2D sessions over HTTP.
    Serve {
        /// Listen address [default: 127.0.0.1:8080].
        #[arg(long)]
        addr: Option<String>,
    },
    /// Print the effective configuration as TOML.
    Config,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cmd = Cli::command().after_long_help(format!("Configuration defaults (TOML):\n\n{}", RunConfig::default_toml()));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            if usage {
                eprintln!("CODE=USAGE");
            }
            return ExitCode::from(if usage { error::EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            eprintln!("CODE={}", e.code);
            ExitCode::from(e.exit)
        }
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.dim {
        cfg.dim = d;
    }
    if let Some(b) = cli.budget_seconds {
        cfg.adapt.time_budget = b;
    }
    if let Some(r) = cli.restarts {
        cfg.adapt.restarts = r;
    }
    cfg.train.seed = cfg.seed;
    cfg.adapt.seed = cfg.seed;
    match &cli.command {
        Command::GenData { samples: Some(n) } => cfg.datagen.samples = *n,
        Command::Pretrain { epochs: Some(e), .. } => cfg.train.epochs = *e,
        Command::Eval { held_out, no_sweeps } => {
            if let Some(h) = held_out {
                cfg.eval.held_out = *h;
            }
            if *no_sweeps {
                cfg.eval.sweeps = false;
            }
        }
        Command::Serve { addr: Some(a) } => cfg.serve.addr = a.clone(),
        _ => {}
    }
    cfg.dim()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = effective_config(&cli)?;
    let exec = Exec::default();
    match &cli.command {
        Command::GenData { .. } => gen_data(&cfg, &out_or(&cli, "data"), exec),
        Command::Pretrain { data, .. } => run_pretrain(&cfg, data, &out_or(&cli, "checkpoint.opac"), exec),
        Command::Rollout { table, steps } => {
            let scene = load_scene(required(&cli.scene, "--scene")?)?;
            let ck = load_checkpoint(&cli, scene.dim())?;
            let base = match table {
                Some(p) => load_table(p)?,
                None => ck.table.clone(),
            };
            let t = instance_table(&base, &scene)?;
            let traj = rollout_open_loop(&scene, &t, &ck.params, steps.unwrap_or_else(|| default_horizon(&scene)))?;
            emit(cli.out.as_deref(), traj.to_json().as_bytes())
        }
        Command::Adapt => run_adapt(&cli, &cfg, exec),
        Command::Eval { .. } => run_eval(&cli, &cfg, exec),
        Command::Plot { input, log } => run_plot(input, log.as_deref(), cli.out.as_deref().unwrap_or(input)),
        Command::Serve { .. } => run_serve(&cli, &cfg),
        Command::Config => emit(None, toml::to_string(&cfg).expect("config serializes").as_bytes()),
    }
}

fn out_or(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    p.as_deref().ok_or_else(|| CliError::usage("MISSING_ARGUMENT", format!("{flag} is required")))
}

/// Writes through a sibling temp file and a rename so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::internal("IO_ERROR", format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let name = path.file_name().ok_or_else(|| CliError::usage("BAD_PATH", format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let res = std::fs::write(&tmp, bytes).and_then(|_| std::fs::rename(&tmp, path));
    if res.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    res.map_err(io)
}

/// To `out` when given, otherwise stdout.
fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(p) => {
            write_atomic(p, bytes)?;
            log::info!("wrote {}", p.display());
            Ok(())
        }
        None => {
            use std::io::Write;
            let mut so = std::io::stdout().lock();
            so.write_all(bytes).and_then(|_| so.write_all(b"\n")).map_err(|e| CliError::internal("IO_ERROR", e.to_string()))
        }
    }
}

fn read_text(path: &Path, missing: &'static str) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::read(path, e, missing))
}

fn load_scene(path: &Path) -> Result<Scene, CliError> {
    Scene::from_json(&read_text(path, "SCENE_NOT_FOUND")?).map_err(|e| CliError::data("SCENE_INVALID", format!("{}: {e}", path.display())))
}

fn load_table(path: &Path) -> Result<PreferenceTable, CliError> {
    serde_json::from_str(&read_text(path, "TABLE_NOT_FOUND")?).map_err(|e| CliError::data("TABLE_INVALID", format!("{}: {e}", path.display())))
}

/// Loads `--checkpoint` and checks it against `dim`.
fn load_checkpoint(cli: &Cli, dim: Dim) -> Result<Checkpoint, CliError> {
    let path = cli.checkpoint.clone().unwrap_or_else(|| PathBuf::from("checkpoint.opac"));
    let ck = Checkpoint::load(&path).map_err(|e| CliError::checkpoint(&path, e))?;
    if ck.params.arch.dim != dim {
        return Err(CliError::data(
            "DIM_MISMATCH",
            format!("{} is a {}D checkpoint, input is {}D", path.display(), ck.params.arch.dim.n(), dim.n()),
        ));
    }
    Ok(ck)
}

fn gen_data(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<(), CliError> {
    let dim = cfg.dim()?;
    let n = cfg.datagen.samples;
    let pos = build_dataset(n, &DatagenConfig::position(dim), cfg.seed, exec)?;
    let ori = build_dataset(n, &DatagenConfig::orientation(dim), cfg.seed.wrapping_add(1), exec)?;
    for (name, ds) in [(POSITION_FILE, &pos), (ORIENTATION_FILE, &ori)] {
        let f = &ds.failures;
        log::info!(
            "{name}: {} samples, rejected {} placement / {} band / {} clearance",
            ds.samples.len(),
            f.placement,
            f.non_convergence,
            f.clearance
        );
        emit(Some(&out.join(name)), &ds.to_bytes())?;
    }
    Ok(())
}

/// `checkpoint.opac` logs to `checkpoint.log.csv`.
fn log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("log.csv")
}

fn run_pretrain(cfg: &RunConfig, data: &Path, out: &Path, exec: Exec) -> Result<(), CliError> {
    let load = |name: &str| {
        let p = data.join(name);
        DatasetFile::load(&p).map_err(|e| CliError::dataset(&p, e))
    };
    let (pos, ori) = (load(POSITION_FILE)?, load(ORIENTATION_FILE)?);
    if pos.dim != cfg.dim()? {
        log::info!("training in {}D to match the datasets", pos.dim.n());
    }
    let mut rows = Vec::new();
    let ck = pretrain(&pos, &ori, &cfg.train, exec, &mut |r: &LogRow| {
        if r.split == Split::Holdout {
            log::info!("epoch {:>3}  holdout L_P {:.4}  L_R {:.4}  {:.1} s", r.epoch, r.loss_p, r.loss_r, r.wall_s);
        }
        rows.push(*r);
    })?;
    let mut csv = String::from(LOG_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.to_csv());
        csv.push('\n');
    }
    emit(Some(out), &ck.to_bytes())?;
    emit(Some(&log_path(out)), csv.as_bytes())
}

#[derive(Serialize)]
struct AdaptSummary {
    initial_loss: f64,
    final_loss: f64,
    best_restart: usize,
    restarts: usize,
    total_steps: usize,
    wall_s: f64,
    budget_exhausted: bool,
}

fn run_adapt(cli: &Cli, cfg: &RunConfig, exec: Exec) -> Result<(), CliError> {
    let path = required(&cli.perturbation, "--perturbation")?;
    let mut record = PerturbationRecord::from_json(&read_text(path, "PERTURBATION_NOT_FOUND")?)?;
    if let Some(scene) = &cli.scene {
        record = PerturbationRecord::new(record.poses, load_scene(scene)?)?;
    }
    let ck = load_checkpoint(cli, record.scene_snapshot.dim())?;
    let progress = |p: opa_core::adapter::AdaptProgress| log::debug!("restart {} step {} loss {:.6}", p.restart, p.step, p.loss);
    let out = adapt(&record, &ck.params, &ck.table, &cfg.adapt, exec, &progress)?;
    log::info!(
        "loss {:.5} -> {:.5} over {} restarts in {:.3} s",
        out.initial_loss,
        out.best_loss,
        out.restarts.len(),
        out.wall_s
    );
    let table = serde_json::to_string_pretty(&out.table).expect("table serializes");
    emit(Some(&out_or(cli, "table.json")), table.as_bytes())?;
    let summary = AdaptSummary {
        initial_loss: out.initial_loss,
        final_loss: out.best_loss,
        best_restart: out.best_restart,
        restarts: out.restarts.len(),
        total_steps: out.total_steps(),
        wall_s: out.wall_s,
        budget_exhausted: out.budget_exhausted,
    };
    emit(None, serde_json::to_string_pretty(&summary).expect("summary serializes").as_bytes())
}

fn run_eval(cli: &Cli, cfg: &RunConfig, exec: Exec) -> Result<(), CliError> {
    let path = cli.checkpoint.clone().unwrap_or_else(|| PathBuf::from("checkpoint.opac"));
    let ck = Checkpoint::load(&path).map_err(|e| CliError::checkpoint(&path, e))?;
    let dim = match cli.dim {
        Some(_) => cfg.dim()?,
        None => ck.params.arch.dim,
    };
    let ck = load_checkpoint(cli, dim)?;
    let out = out_or(cli, "report");
    let suite = default_suite(dim, cfg.eval.held_out, cfg.seed);
    let report = run_benchmark(&suite, &ck.params, &ck.table, &cfg.adapt, exec)?;
    if let Some(err) = report.records.first().and_then(|r| r.error.as_ref()) {
        log::warn!("adaptation failed: {err}");
    }
    emit(Some(&out.join("report.json")), report.to_json().as_bytes())?;
    emit(Some(&out.join("report.csv")), report.to_csv().as_bytes())?;
    if cfg.eval.sweeps {
        let rows = time_sweep(&suite, &ck.params, &ck.table, &cfg.adapt, &cfg.eval.time_budgets, exec)?;
        let mut csv = format!("{TIME_SWEEP_CSV_HEADER}\n");
        rows.iter().for_each(|r| csv.push_str(&(r.to_csv() + "\n")));
        emit(Some(&out.join("time_sweep.csv")), csv.as_bytes())?;

        let sweep = interpolation_sweep(&ck.params, &ck.table, suite.train_scene(), suite.target_object, &cfg.eval.lambdas, exec)?;
        let mut csv = String::from("lambda,min_distance\n");
        sweep.iter().for_each(|(l, d)| csv.push_str(&format!("{l},{d}\n")));
        emit(Some(&out.join("lambda_sweep.csv")), csv.as_bytes())?;
        let (ls, ds): (Vec<f64>, Vec<f64>) = sweep.into_iter().unzip();
        log::info!("repel-attract sweep: spearman {:.3}", spearman(&ls, &ds));
    }
    emit(None, serde_json::to_string_pretty(&report.held_out).expect("aggregate serializes").as_bytes())
}

fn run_plot(input: &Path, log: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let mut drawn = 0;
    let lambda = input.join("lambda_sweep.csv");
    if lambda.exists() {
        let c = plot::read_columns(&lambda, &["lambda", "min_distance"])?;
        let s = Series {
            label: "min distance to object".into(),
            points: c[0].iter().copied().zip(c[1].iter().copied()).collect(),
        };
        write_chart(&out.join("lambda_sweep.svg"), "Repel to attract blend", "lambda", "min distance (m)", &[s])?;
        drawn += 1;
    }
    let time = input.join("time_sweep.csv");
    if time.exists() {
        let cols = ["budget_s", "post_min_distance", "post_min_angle", "held_out_min_distance", "held_out_min_angle"];
        let c = plot::read_columns(&time, &cols)?;
        let series: Vec<Series> = (1..cols.len())
            .map(|k| Series {
                label: cols[k].replace('_', " "),
                points: c[0].iter().copied().zip(c[k].iter().copied()).collect(),
            })
            .collect();
        write_chart(&out.join("time_sweep.svg"), "Error vs adaptation time", "budget (s)", "m / rad", &series)?;
        drawn += 1;
    }
    if let Some(log) = log {
        let mut rdr = csv::Reader::from_path(log).map_err(|e| CliError::data("INPUT_NOT_FOUND", format!("{}: {e}", log.display())))?;
        let rows: Vec<LogRow> = rdr
            .deserialize()
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::data("INPUT_INVALID", format!("{}: {e}", log.display())))?;
        let pick = |split: Split, f: fn(&LogRow) -> f64| rows.iter().filter(|r| r.split == split).map(|r| (r.epoch as f64, f(r))).collect();
        let series = vec![
            Series {
                label: "train L_P".into(),
                points: pick(Split::Train, |r| r.loss_p),
            },
            Series {
                label: "holdout L_P".into(),
                points: pick(Split::Holdout, |r| r.loss_p),
            },
            Series {
                label: "train L_R".into(),
                points: pick(Split::Train, |r| r.loss_r),
            },
            Series {
                label: "holdout L_R".into(),
                points: pick(Split::Holdout, |r| r.loss_r),
            },
        ];
        write_chart(&out.join("training_log.svg"), "Pretraining losses", "epoch", "loss", &series)?;
        drawn += 1;
    }
    if drawn == 0 {
        return Err(CliError::data("NOTHING_TO_PLOT", format!("no sweep tables in {} and no --log", input.display())));
    }
    Ok(())
}

/// Renders beside the target and renames into place.
fn write_chart(path: &Path, title: &str, x: &str, y: &str, series: &[Series]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::internal("IO_ERROR", e.to_string()))?;
    }
    let tmp = path.with_extension(format!("tmp{}.svg", std::process::id()));
    let res = plot::line_chart(&tmp, title, x, y, series);
    if res.is_err() {
        let _ = std::fs::remove_file(&tmp);
        return res;
    }
    std::fs::rename(&tmp, path).map_err(|e| CliError::internal("IO_ERROR", e.to_string()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn run_serve(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let ck = load_checkpoint(cli, Dim::Two)?;
    let addr: std::net::SocketAddr = cfg
        .serve
        .addr
        .parse()
        .map_err(|e| CliError::usage("BAD_ADDRESS", format!("{}: {e}", cfg.serve.addr)))?;
    let service_cfg = opa_service::ServiceConfig {
        adapt: cfg.adapt.clone(),
        seed: cfg.seed,
    };
    let state = opa_service::AppState::new(ck, service_cfg).map_err(|e| CliError::data("DIM_MISMATCH", e))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::internal("RUNTIME", e.to_string()))?;
    rt.block_on(opa_service::serve(state, addr)).map_err(|e| CliError::internal("SERVE_FAILED", e.to_string()))
}
