use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use branch_mpc::baselines::{contingency_plan, robust_plan};
use branch_mpc::config::{ConfigError, ScenarioConfig};
use branch_mpc::output::{
    config_hash, write_events_json, write_plan_csv, write_run_meta, write_sweep_csv,
    write_trace_csv, RunMeta,
};
use branch_mpc::planner::PlanningProblem;
use branch_mpc::sim::{run_closed_loop, run_sweep, PlannerKind};
use branch_mpc::tree::build_tree;

/// Branch MPC for longitudinal motion planning among multi-modal drivers.
#[derive(Debug, Parser)]
#[command(name = "branch-mpc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve one plan from the initial scene and write its branch time series.
    Plan(PlanArgs),
    /// Run one closed-loop trial and write its trace and event log.
    Run(RunArgs),
    /// Sweep branch probabilities closed loop and write the cost table.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Scenario configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Master random seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Planner variant. `prescient` treats the configured nominal branch as
    /// the ground truth, since nothing has happened yet at planning time.
    #[arg(long, default_value = "branch")]
    planner: PlannerKind,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value = "branch")]
    planner: PlannerKind,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Restrict the sweep to one planner (default: all four).
    #[arg(long)]
    planner: Option<PlannerKind>,
    /// Closed-loop trials per (probability, planner) cell.
    #[arg(long, default_value_t = 200)]
    trials: u64,
    /// Probability grid for the second child branch.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    grid: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code_for(&err)
        }
    }
}

/// Contract: 0 success, 2 config error, 3 when the infeasibility fallback
/// engaged anywhere (outputs are still written).
fn exit_code_for(err: &anyhow::Error) -> ExitCode {
    if err.chain().any(|cause| cause.is::<ConfigError>()) {
        ExitCode::from(2)
    } else {
        ExitCode::FAILURE
    }
}

fn load(common: &CommonArgs) -> anyhow::Result<(ScenarioConfig, String)> {
    let text = std::fs::read_to_string(&common.config).map_err(|source| ConfigError::Io {
        path: common.config.display().to_string(),
        source,
    })?;
    let config: ScenarioConfig =
        serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: common.config.display().to_string(),
            source,
        })?;
    config.validate()?;
    Ok((config, text))
}

fn prepare_out(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
}

fn meta_for(command: &str, common: &CommonArgs, config_text: &str) -> RunMeta {
    RunMeta {
        command: command.to_string(),
        config_path: common.config.display().to_string(),
        config_sha256: config_hash(config_text),
        seed: common.seed,
        planner: None,
        trials: None,
        grid: None,
        files: Vec::new(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Plan(args) => cmd_plan(args),
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

fn cmd_plan(args: PlanArgs) -> anyhow::Result<ExitCode> {
    let (config, text) = load(&args.common)?;
    prepare_out(&args.common.out)?;
    let grid = config.time_grid()?;
    let problem = PlanningProblem::from_config(&config)?;
    let tree = build_tree(&config, &grid, config.hv_init, config.av_init)?;
    if tree.dt_obs_steps < config.dt_obs_steps(&grid) {
        eprintln!(
            "warning: observation window truncated to {} steps by the horizon",
            tree.dt_obs_steps
        );
    }
    let hv = config.hv_init;
    let av = config.av_init;
    let plan = match args.planner {
        PlannerKind::Branch => problem.plan_branch(&tree, hv, av, 0.0, None)?,
        PlannerKind::Robust => robust_plan(&problem, &tree, hv, av, 0.0, None),
        PlannerKind::Prescient => {
            let pruned = tree.pruned_to(config.nominal_branch_id())?;
            problem.plan_branch(&pruned, hv, av, 0.0, None)?
        }
        PlannerKind::Contingency => {
            contingency_plan(&problem, &tree, config.nominal_branch_id(), hv, av, 0.0, None)?
        }
    };

    write_plan_csv(&args.common.out, &plan, &grid)?;
    let mut meta = meta_for("plan", &args.common, &text);
    meta.planner = Some(args.planner);
    meta.files = vec!["plan.csv".into()];
    write_run_meta(&args.common.out, &meta)?;

    let d = &plan.diagnostics;
    println!(
        "plan: cost {:.4}, {} iterations, residual {:.2e}{}",
        d.cost,
        d.iterations,
        d.max_violation,
        if d.fallback { ", fallback engaged" } else { "" }
    );
    Ok(if d.fallback { ExitCode::from(3) } else { ExitCode::SUCCESS })
}

fn cmd_run(args: RunArgs) -> anyhow::Result<ExitCode> {
    let (config, text) = load(&args.common)?;
    prepare_out(&args.common.out)?;
    let trial = run_closed_loop(&config, args.planner, args.common.seed, 0)?;

    write_trace_csv(&args.common.out, &trial)?;
    write_events_json(&args.common.out, &trial)?;
    let mut meta = meta_for("run", &args.common, &text);
    meta.planner = Some(args.planner);
    meta.files = vec!["trace.csv".into(), "events.json".into()];
    write_run_meta(&args.common.out, &meta)?;

    println!(
        "run: planner {}, truth branch {}, cost {:.4}, min margin {:.3}, {} steps{}",
        trial.planner,
        trial.truth_branch,
        trial.total_cost,
        trial.min_margin,
        trial.steps.len(),
        if trial.fallback_cycles > 0 { ", fallback engaged" } else { "" }
    );
    Ok(if trial.fallback_cycles > 0 { ExitCode::from(3) } else { ExitCode::SUCCESS })
}

fn default_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<ExitCode> {
    let (config, text) = load(&args.common)?;
    prepare_out(&args.common.out)?;
    let grid = args.grid.clone().unwrap_or_else(default_grid);
    let planners: Vec<PlannerKind> =
        args.planner.map(|p| vec![p]).unwrap_or_else(|| PlannerKind::ALL.to_vec());
    let cells = run_sweep(&config, &planners, &grid, args.trials, args.common.seed)?;

    write_sweep_csv(&args.common.out, &cells)?;
    let mut meta = meta_for("sweep", &args.common, &text);
    meta.planner = args.planner;
    meta.trials = Some(args.trials);
    meta.grid = Some(grid.clone());
    meta.files = vec!["sweep.csv".into()];
    write_run_meta(&args.common.out, &meta)?;

    let fallbacks: u64 = cells.iter().map(|c| c.fallback_trials).sum();
    let collisions: u64 = cells.iter().map(|c| c.collisions).sum();
    println!(
        "sweep: {} cells, {} trials each, {} collisions, {} trials with fallback",
        cells.len(),
        args.trials,
        collisions,
        fallbacks
    );
    Ok(if fallbacks > 0 { ExitCode::from(3) } else { ExitCode::SUCCESS })
}
