use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use deq_core::cells::Model;
use deq_core::harness::{
    evaluate, load_checkpoint, run_experiment, run_sweep, score_state, split_set, write_aa_csv,
    write_metrics_csv, Checkpoint, ExperimentConfig, RunDir, SweepGrid, TaskBatch,
};
use deq_core::metrics::{
    aa_score, adversarial_attack, residual_curve_model, trajectory_projection_model, AaOptions,
    AttackConfig, AttackInit, KernelConfig, SimilarityKernel,
};
use deq_core::solvers::{solve_model, SolverConfig, SolverMethod};
use deq_core::Tensor;

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_UNHEALTHY: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "deq", version, about = "Train and probe weight-tied equilibrium models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "snake_case")]
enum Command {
    /// Train a model and evaluate its grid.
    Train(TrainArgs),
    /// Evaluate a checkpoint over splits and budgets.
    Eval(EvalArgs),
    /// Per-example asymptotic alignment on one split.
    Aa(AaArgs),
    /// Search for adversarial initializations.
    Attack(AttackArgs),
    /// Residual curves of several solvers on one example.
    Trace(TraceArgs),
    /// Run a grid of experiments and fit the AA trend.
    Sweep(SweepArgs),
    /// Project hidden-state trajectories onto two random directions.
    Project(ProjectArgs),
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_delimiter = ',')]
    splits: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<usize>>,
    #[arg(long)]
    solver: Option<SolverMethod>,
    /// Skip the AA score.
    #[arg(long)]
    no_aa: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct AaArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    split: String,
    #[arg(long)]
    budget: usize,
    #[arg(long, default_value = "cosine")]
    kernel: SimilarityKernel,
    #[arg(long, default_value_t = 5000.0)]
    eps: f64,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long)]
    solver: Option<SolverMethod>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct AttackArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    split: String,
    #[arg(long, default_value_t = 50)]
    updates: usize,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    /// Solver budget; the training depth when absent.
    #[arg(long)]
    budget: Option<usize>,
    /// Attack only the first N examples of the split.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, default_value = "encoded", value_parser = parse_init)]
    init: AttackInit,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    solver: Option<SolverMethod>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct TraceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "naive,broyden")]
    solvers: Vec<SolverMethod>,
    #[arg(long)]
    budget: usize,
    /// Split to draw the example from; the first eval split when absent.
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value_t = 0)]
    example: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ProjectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    inits: usize,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value_t = 0)]
    example: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_init(s: &str) -> Result<AttackInit, String> {
    match s {
        "encoded" => Ok(AttackInit::Encoded),
        "normal" => Ok(AttackInit::Normal),
        other => Err(format!("unknown init {other:?}; use encoded or normal")),
    }
}

#[derive(Debug)]
enum Failure {
    Core(deq_core::Error),
    Usage(String),
    Unhealthy(String),
}

impl From<deq_core::Error> for Failure {
    fn from(e: deq_core::Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Usage(format!("{}: {e}", path.display()))
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

/// Output directory for a checkpoint-based command.
fn out_dir(out: &Option<PathBuf>, ckpt: &Path, name: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| {
        ckpt.parent()
            .unwrap_or(Path::new("."))
            .join(format!("{name}-{}", stem(ckpt)))
    })
}

/// Opens a run directory with the resolved config and command line, runs
/// `body`, and closes it with DONE or FAILED.
fn with_run_dir(
    path: PathBuf,
    config: &ExperimentConfig,
    command: &Command,
    body: impl FnOnce(&RunDir) -> Outcome,
) -> Outcome {
    let dir = RunDir::create(path)?;
    dir.write_json("config.json", config)?;
    dir.write_json("command.json", command)?;
    match body(&dir) {
        Ok(()) => {
            dir.finish("ok")?;
            eprintln!("wrote {}", dir.path().display());
            Ok(())
        }
        Err(f) => {
            let msg = match &f {
                Failure::Core(e) => e.to_string(),
                Failure::Usage(m) | Failure::Unhealthy(m) => m.clone(),
            };
            dir.fail(&msg)?;
            Err(f)
        }
    }
}

fn eval_solver(ck: &Checkpoint, method: Option<SolverMethod>, budget: usize) -> SolverConfig {
    let mut s = ck.config.eval.solver(budget);
    if let Some(m) = method {
        s.method = m;
    }
    s
}

fn example(data: &TaskBatch, i: usize) -> Result<TaskBatch, Failure> {
    if i >= data.count() {
        return Err(Failure::Usage(format!(
            "example {i} is out of range for a split of {}",
            data.count()
        )));
    }
    Ok(data.select(&[i]))
}

fn cmd_train(args: &TrainArgs, command: &Command) -> Outcome {
    let text = std::fs::read_to_string(&args.config).map_err(|e| io_err(&args.config, e))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-seed{}", stem(&args.config), cfg.seed)));
    let run_id = stem(&out);
    let dir = RunDir::create(&out)?;
    dir.write_json("command.json", command)?;
    match run_experiment(&cfg, &dir, &run_id) {
        Ok(s) if s.unhealthy => Err(Failure::Unhealthy(format!(
            "{} of {} steps skipped; run marked unhealthy",
            s.skipped, s.steps
        ))),
        Ok(_) => {
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Err(e) => {
            dir.fail(&e.to_string())?;
            Err(e.into())
        }
    }
}

fn cmd_eval(args: &EvalArgs, command: &Command) -> Outcome {
    let ck = load_checkpoint(&args.ckpt)?;
    let mut cfg = ck.config.clone();
    if let Some(s) = &args.splits {
        cfg.eval.splits = s.clone();
    }
    if let Some(b) = &args.budgets {
        cfg.eval.budgets = b.clone();
    }
    if let Some(m) = args.solver {
        cfg.eval.method = m;
    }
    if args.no_aa {
        cfg.eval.aa = false;
    }
    cfg.validate()?;
    let run_id = stem(&args.ckpt);
    with_run_dir(out_dir(&args.out, &args.ckpt, "eval"), &cfg, command, |dir| {
        let evals = evaluate(&ck.params, &cfg, &cfg.eval, &run_id, &format!("step{}", ck.step))?;
        let rows: Vec<_> = evals.iter().map(|(_, e)| e.row.clone()).collect();
        dir.write_with("metrics.csv", |w| write_metrics_csv(&rows, w, true))?;
        if cfg.eval.aa {
            dir.write_with("aa.csv", |w| write_aa_csv(&evals, w))?;
        }
        Ok(())
    })
}

fn cmd_aa(args: &AaArgs, command: &Command) -> Outcome {
    let ck = load_checkpoint(&args.ckpt)?;
    let data = split_set(&ck.config, &args.split)?;
    let solver = eval_solver(&ck, args.solver, args.budget);
    solver.validate()?;
    let opts = AaOptions {
        repeats: args.repeats,
        kernel: KernelConfig::new(args.kernel, args.eps),
        ..AaOptions::default()
    };
    opts.kernel.validate()?;
    with_run_dir(out_dir(&args.out, &args.ckpt, "aa"), &ck.config, command, |dir| {
        let x = data.inputs();
        let mut rep = aa_score(&ck.params, &x, &solver, &opts)?;
        rep.correct = score_state(&ck.params, &data, &rep.canonical)?.correct;
        dir.write_with("aa.csv", |w| rep.write_csv(w, &args.split, true))?;
        dir.write_json(
            "summary.json",
            &json!({
                "split": args.split,
                "budget": args.budget,
                "kernel": args.kernel.to_string(),
                "eps": args.eps,
                "aa_mean": rep.mean(),
                "aa_mean_unflagged": rep.mean_unflagged(),
                "flagged_fraction": rep.flagged_fraction(),
            }),
        )?;
        Ok(())
    })
}

#[derive(Serialize)]
struct AttackRow {
    example_id: usize,
    split: String,
    clean_correct: Option<bool>,
    attacked_aa: f64,
    attacked_correct: Option<bool>,
    diverged: bool,
    lbfgs_stop: String,
}

fn cmd_attack(args: &AttackArgs, command: &Command) -> Outcome {
    let ck = load_checkpoint(&args.ckpt)?;
    let data = split_set(&ck.config, &args.split)?;
    let budget = args.budget.unwrap_or(ck.config.train_solver.max_iters);
    let solver = eval_solver(&ck, args.solver, budget);
    solver.validate()?;
    let n = args.count.unwrap_or(data.count()).min(data.count());
    with_run_dir(out_dir(&args.out, &args.ckpt, "attack"), &ck.config, command, |dir| {
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let one = example(&data, i)?;
            let x = one.inputs();
            let cfg = AttackConfig {
                updates: args.updates,
                restarts: args.restarts,
                init: args.init,
                seed: args.seed.wrapping_add(i as u64),
            };
            let res = adversarial_attack(&ck.params, &x, &solver, &cfg)?;
            let clean = score_state(&ck.params, &one, &res.canonical_state)?;
            let attacked = score_state(&ck.params, &one, &res.attacked_state)?;
            let worst = res
                .restarts
                .iter()
                .min_by(|a, b| a.attacked_aa.total_cmp(&b.attacked_aa))
                .map(|r| format!("{:?}", r.stop))
                .unwrap_or_default();
            rows.push(AttackRow {
                example_id: i,
                split: args.split.clone(),
                clean_correct: clean.correct[0],
                attacked_aa: res.attacked_aa,
                attacked_correct: attacked.correct[0],
                diverged: res.diverged,
                lbfgs_stop: worst,
            });
        }
        dir.write_with("attack.csv", |w| {
            let mut c = csv_writer(w);
            for r in &rows {
                c.serialize(r).map_err(deq_core::Error::from)?;
            }
            c.flush().map_err(|e| deq_core::Error::Numeric(format!("attack csv: {e}")))?;
            Ok(())
        })?;
        let frac = |f: &dyn Fn(&AttackRow) -> Option<bool>| {
            let v: Vec<bool> = rows.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().filter(|b| **b).count() as f64 / v.len() as f64)
        };
        dir.write_json(
            "summary.json",
            &json!({
                "examples": n,
                "budget": budget,
                "attacked_aa_mean": rows.iter().map(|r| r.attacked_aa).sum::<f64>() / n.max(1) as f64,
                "clean_accuracy": frac(&|r| r.clean_correct),
                "attacked_accuracy": frac(&|r| r.attacked_correct),
                "diverged_fraction": rows.iter().filter(|r| r.diverged).count() as f64 / n.max(1) as f64,
            }),
        )?;
        Ok(())
    })
}

fn csv_writer(w: &mut dyn std::io::Write) -> csv::Writer<&mut dyn std::io::Write> {
    csv::Writer::from_writer(w)
}

fn pick_split(ck: &Checkpoint, split: &Option<String>) -> String {
    split.clone().unwrap_or_else(|| ck.config.eval.splits[0].clone())
}

fn cmd_trace(args: &TraceArgs, command: &Command) -> Outcome {
    let ck = load_checkpoint(&args.ckpt)?;
    if args.solvers.is_empty() {
        return Err(Failure::Usage("--solvers needs at least one method".into()));
    }
    let split = pick_split(&ck, &args.split);
    let data = split_set(&ck.config, &split)?;
    let one = example(&data, args.example)?;
    with_run_dir(out_dir(&args.out, &args.ckpt, "trace"), &ck.config, command, |dir| {
        let solvers: Vec<SolverConfig> = args
            .solvers
            .iter()
            .map(|m| eval_solver(&ck, Some(*m), args.budget))
            .collect();
        let x = one.inputs();
        let z0 = Tensor::zeros(&ck.params.state_shape(&x)?);
        let curves = residual_curve_model(&ck.params, &x, &z0, &solvers)?;
        dir.write_with("residuals.csv", |w| curves.write_csv(w))?;
        if !curves.distance.is_empty() {
            dir.write_with("distance.csv", |w| curves.write_distance_csv(w))?;
        }
        let per_solver: Vec<_> = solvers
            .iter()
            .zip(&curves.traces)
            .enumerate()
            .map(|(s, (cfg, tr))| -> Result<_, Failure> {
                let pred = score_state(&ck.params, &one, &tr.final_state)?;
                Ok(json!({
                    "solver": cfg.method.to_string(),
                    "final_residual": curves.residual(s, args.budget),
                    "diverged_at": curves.diverged_at(s),
                    "correct": pred.correct[0],
                    "mse": pred.mse.map(|m| m[0]),
                }))
            })
            .collect::<Result<_, _>>()?;
        dir.write_json(
            "summary.json",
            &json!({
                "split": split,
                "example": args.example,
                "budget": args.budget,
                "solvers": per_solver,
                "max_distance": curves.distance.iter().copied().fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.max(d)))),
            }),
        )?;
        Ok(())
    })
}

fn cmd_sweep(args: &SweepArgs) -> Outcome {
    let text = std::fs::read_to_string(&args.grid).map_err(|e| io_err(&args.grid, e))?;
    let grid = SweepGrid::from_json(&text)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("sweep-{}", stem(&args.grid))));
    let (summaries, report) = run_sweep(&grid, &out)?;
    match (&report.fit, report.spearman, &report.note) {
        (Some(f), _, _) => eprintln!(
            "{} runs: slope {:.4}, intercept {:.4}, pearson r {:.4}",
            summaries.len(),
            f.slope,
            f.intercept,
            f.pearson_r
        ),
        (None, Some(r), _) => eprintln!("{} runs: spearman {r:.4}", summaries.len()),
        (_, _, Some(note)) => eprintln!("{} runs: fit refused: {note}", summaries.len()),
        _ => {}
    }
    eprintln!("wrote {}", out.display());
    if summaries.iter().any(|s| s.unhealthy) {
        return Err(Failure::Unhealthy("at least one sweep run is unhealthy".into()));
    }
    Ok(())
}

fn cmd_project(args: &ProjectArgs, command: &Command) -> Outcome {
    let ck = load_checkpoint(&args.ckpt)?;
    let split = pick_split(&ck, &args.split);
    let data = split_set(&ck.config, &split)?;
    if args.inits < 2 || args.inits >= data.count() {
        return Err(Failure::Usage(format!(
            "--inits must lie in 2..{} for this split",
            data.count()
        )));
    }
    let one = example(&data, args.example)?;
    with_run_dir(out_dir(&args.out, &args.ckpt, "project"), &ck.config, command, |dir| {
        // Inits are fixed points of other examples, solved at the training depth.
        let solver = eval_solver(&ck, None, ck.config.train_solver.max_iters);
        let mut inits = Vec::with_capacity(args.inits);
        for k in 1..=args.inits {
            let j = (args.example + k) % data.count();
            let other = data.select(&[j]).inputs();
            let z0 = Tensor::zeros(&ck.params.state_shape(&other)?);
            inits.push(solve_model(&ck.params, &other, &z0, &solver)?.final_state);
        }
        let proj = trajectory_projection_model(&ck.params, &one.inputs(), &inits, args.steps, args.seed)?;
        dir.write_with("projection.csv", |w| proj.write_csv(w))?;
        Ok(())
    })
}

fn run(cli: Cli) -> Outcome {
    let command = &cli.command;
    match command {
        Command::Train(a) => cmd_train(a, command),
        Command::Eval(a) => cmd_eval(a, command),
        Command::Aa(a) => cmd_aa(a, command),
        Command::Attack(a) => cmd_attack(a, command),
        Command::Trace(a) => cmd_trace(a, command),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Project(a) => cmd_project(a, command),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { EXIT_NUMERIC } else { EXIT_USAGE })
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Unhealthy(m)) => {
            eprintln!("unhealthy: {m}");
            ExitCode::from(EXIT_UNHEALTHY)
        }
    }
}
