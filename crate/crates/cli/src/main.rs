mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use np3m_core::data::{generate_synthetic, load_dataset, save_dataset, split, BoundaryMode, DatasetRecord};
use np3m_core::ewald::{ewald_components, tune_params};
use np3m_core::geometry::build_assignment_graph;
use np3m_core::mesh::{choose_mesh_counts, construct_cell, generate_mesh};
use np3m_core::p3m::p3m_total;
use np3m_core::train::{build_model, drive, evaluate, Checkpoint, OutputPaths, Trainer};
use np3m_core::xyz::read_structure;
use np3m_core::{ChargeAssignment, EwaldParams, P3mSettings};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "np3m", version, about = "Ewald/P3M electrostatics and mesh-augmented neural potentials")]
struct Cli {
    /// TOML configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Train a model.
    Train(TrainArgs),
    /// Energy and force MAE of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Ewald summation for a periodic structure.
    Ewald(EwaldArgs),
    /// P3M for a periodic structure.
    P3m(P3mArgs),
    /// Cell, mesh and assignment graph for a structure.
    Mesh(MeshArgs),
    /// Finite-difference check of model gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Generate a synthetic point-charge dataset.
    Gen(GenArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    atoms: Option<usize>,
    #[arg(long = "box")]
    box_length: Option<f64>,
    #[arg(long)]
    mode: Option<BoundaryMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Train the parameter-matched model without the mesh branch.
    #[arg(long)]
    ablate_mesh: bool,
    /// Dataset (JSON lines); generated from [data] when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a last.json checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct EwaldArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    rcut: Option<f64>,
    #[arg(long)]
    mmax: Option<usize>,
    /// Choose β, r_cut and m_max for this truncation tolerance.
    #[arg(long)]
    auto: Option<f64>,
    #[arg(long)]
    forces: bool,
}

#[derive(Args)]
struct P3mArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_parser = parse_counts)]
    mesh: Option<[usize; 3]>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    rcut: Option<f64>,
    #[arg(long)]
    forces: bool,
}

#[derive(Args)]
struct MeshArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    padding: Option<f64>,
    #[arg(long)]
    rassign: Option<f64>,
    #[arg(long, value_parser = parse_counts)]
    counts: Option<[usize; 3]>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_counts(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("expected NX,NY,NZ, got {s:?}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, c] if a > 0 && b > 0 && c > 0 => Ok([a, b, c]),
        _ => Err(format!("expected three positive counts NX,NY,NZ, got {s:?}")),
    }
}

fn required<T>(value: Option<T>, flag: &str) -> anyhow::Result<T> {
    value.ok_or_else(|| np3m_core::Error::Config(format!("missing --{flag} (or its config entry)")).into())
}

fn emit(value: &Value) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("NP3M_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| np3m_core::Error::Config(format!("NP3M_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("np3m: error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<np3m_core::Error>().map(|e| e.kind()).unwrap_or("runtime");
            eprintln!("np3m: error[{kind}]: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain on one line, dropping causes already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = vec![];
    for cause in e.chain() {
        let s = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&s)) {
            parts.push(s);
        }
    }
    parts.join(": ").replace('\n', " ")
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Data {
            command: DataCommand::Gen(a),
        } => data_gen(a, cfg),
        Command::Train(a) => train(a, cfg),
        Command::Eval(a) => eval(a, cfg),
        Command::Ewald(a) => ewald(a, cfg),
        Command::P3m(a) => p3m(a, cfg),
        Command::Mesh(a) => mesh(a, cfg),
        Command::Gradcheck(a) => gradcheck(a, cfg),
    }
}

fn data_gen(a: GenArgs, cfg: config::FileConfig) -> anyhow::Result<()> {
    let d = cfg.data;
    let n = a.n.unwrap_or(d.n);
    let atoms = a.atoms.unwrap_or(d.atoms);
    let box_length = a.box_length.unwrap_or(d.box_length);
    let mode = a.mode.unwrap_or(d.mode);
    let seed = a.seed.unwrap_or(d.seed);
    let out = required(a.out.or(d.out), "out")?;
    let records = generate_synthetic(n, atoms, box_length, mode, seed)?;
    save_dataset(&out, &records)?;
    emit(&json!({ "records": records.len(), "atoms": atoms, "box": box_length, "mode": mode, "seed": seed, "out": out }))
}

fn dataset_for_training(path: Option<PathBuf>, d: &config::DataSection) -> anyhow::Result<Vec<DatasetRecord>> {
    match path {
        Some(p) => load_dataset(&p).with_context(|| format!("loading {}", p.display())),
        None => Ok(generate_synthetic(d.n, d.atoms, d.box_length, d.mode, d.seed)?),
    }
}

fn train(a: TrainArgs, cfg: config::FileConfig) -> anyhow::Result<()> {
    let mut schedule = cfg.train.schedule.clone();
    schedule.ablate_mesh |= a.ablate_mesh;
    if let Some(e) = a.epochs {
        schedule.epochs = e;
    }
    if let Some(s) = a.seed {
        schedule.seed = s;
    }
    schedule.validate()?;
    let records = dataset_for_training(a.data.or(cfg.data.path.clone()), &cfg.data)?;
    if records.is_empty() {
        bail!(np3m_core::Error::Config("dataset is empty".into()));
    }
    let output = a.output.or(cfg.train.output.clone()).unwrap_or_else(|| PathBuf::from("np3m-run"));
    let paths = OutputPaths { dir: output };
    let resume = a.resume.or(cfg.train.resume.clone());

    let (trainer_config, model, state) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(&path)?;
            let state = ck
                .training
                .clone()
                .ok_or_else(|| np3m_core::Error::Checkpoint(format!("{} holds no training state", path.display())))?;
            let mut state = state;
            // the epoch budget may be extended on resume; everything else is fixed
            state.config.epochs = schedule.epochs;
            (state.config.clone(), ck.to_model()?, Some(state))
        }
        None => {
            let reference = records[0].system()?;
            let model = build_model(&cfg.model, &reference, schedule.ablate_mesh)?;
            (schedule, model, None)
        }
    };
    let (tr, va, te) = split(records.len(), trainer_config.split, trainer_config.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| &records[i]).collect::<Vec<_>>();
    let (tr_refs, va_refs) = (pick(&tr), pick(&va));
    let params = model.num_parameters();
    let trainer = match state {
        Some(s) => Trainer::resume(model, s, &tr_refs, &va_refs)?,
        None => Trainer::new(model, trainer_config, &tr_refs, &va_refs)?,
    };
    let outcome = drive(trainer, Some(&paths))?;
    let test: Vec<DatasetRecord> = te.iter().map(|&i| records[i].clone()).collect();
    let test_metrics = if test.is_empty() { None } else { Some(evaluate(&outcome.best, &test)?) };
    emit(&json!({
        "parameters": params,
        "use_mesh": outcome.best.config.use_mesh,
        "mesh_counts": outcome.best.counts,
        "epochs": outcome.state.epoch,
        "best_epoch": outcome.state.best_epoch,
        "best_val_energy_mae": outcome.state.best_val,
        "test": test_metrics,
        "checkpoint": paths.best(),
        "metrics": paths.metrics(),
    }))
}

fn eval(a: EvalArgs, cfg: config::FileConfig) -> anyhow::Result<()> {
    let ck_path = required(a.checkpoint.or(cfg.eval.checkpoint), "checkpoint")?;
    let data_path = required(a.data.or(cfg.eval.data), "data")?;
    let model = Checkpoint::load(&ck_path)?.to_model()?;
    let records = load_dataset(&data_path)?;
    let m = evaluate(&model, &records)?;
    emit(&serde_json::to_value(m)?)
}

fn forces_json(forces: &[[f64; 3]]) -> Value {
    json!(forces)
}

fn ewald(a: EwaldArgs, cfg: config::FileConfig) -> anyhow::Result<()> {
    let e = cfg.ewald;
    let input = required(a.input.or(e.input), "input")?;
    let system = read_structure(&input).with_context(|| format!("reading {}", input.display()))?;
    let params = match a.auto.or(e.auto) {
        Some(tol) => tune_params(&system, tol)?,
        None => EwaldParams::new(
            required(a.beta.or(e.beta), "beta")?,
            required(a.rcut.or(e.rcut), "rcut")?,
            required(a.mmax.or(e.mmax), "mmax")?,
        )?,
    };
    let r = ewald_components(&system, &params)?;
    let mut out = json!({
        "beta": params.beta, "r_cut": params.r_cut, "m_max": params.m_max,
        "e_short": r.e_short, "e_long": r.e_long, "e_self": r.e_self, "total": r.total,
    });
    if a.forces || e.forces {
        out["forces"] = forces_json(&r.forces);
    }
    emit(&out)
}

fn p3m(a: P3mArgs, cfg: config::FileConfig) -> anyhow::Result<()> {
    let p = cfg.p3m;
    let input = required(a.input.or(p.input), "input")?;
    let system = read_structure(&input).with_context(|| format!("reading {}", input.display()))?;
    let counts = required(a.mesh.or(p.mesh), "mesh")?;
    let order = required(a.order.or(p.order), "order")?;
    let assignment = ChargeAssignment::new(order)?;
    // m_max is not used by the mesh solver
    let params = EwaldParams::new(required(a.beta.or(p.beta), "beta")?, required(a.rcut.or(p.rcut), "rcut")?, 1)?;
    let r = p3m_total(&system, &params, &P3mSettings::new(counts, assignment))?;
    let mut out = json!({
        "beta": params.beta, "r_cut": params.r_cut, "mesh": counts, "order": order,
        "e_short": r.e_short, "e_long": r.e_long, "e_self": r.e_self, "total": r.total,
    });
    if a.forces || p.forces {
        out["forces"] = forces_json(&r.forces);
    }
    emit(&out)
}

fn mesh(a: MeshArgs, cfg: config::FileConfig) -> anyhow::Result<()> {
    let m = cfg.mesh;
    let input = required(a.input.or(m.input), "input")?;
    let padding = a.padding.unwrap_or(m.padding);
    let r_assign = a.rassign.unwrap_or(m.rassign);
    let system = read_structure(&input).with_context(|| format!("reading {}", input.display()))?;
    let (cell, in_cell, frame) = if system.is_periodic() {
        let cell = system
            .cell
            .ok_or_else(|| np3m_core::Error::InvalidSystem("periodic system without a cell".into()))?;
        (cell, system.clone(), None)
    } else {
        let c = construct_cell(&system, padding)?;
        (c.cell, c.system.clone(), Some((c.frame, c.origin)))
    };
    let counts = a.counts.or(m.counts).unwrap_or_else(|| choose_mesh_counts(&cell, r_assign));
    let grid = generate_mesh(&cell, counts)?;
    let graph = build_assignment_graph(&in_cell, &grid, r_assign)?;
    let mut out = json!({
        "periodic": system.is_periodic(),
        "cell": cell,
        "counts": counts,
        "mesh_points": grid.points.len(),
        "assignment_edges": graph.edges.len(),
        "uncovered_atoms": graph.uncovered_atoms,
    });
    if let Some((f, origin)) = frame {
        out["frame"] = json!({ "rotation": f.rotation, "centroid": f.centroid, "degenerate": f.degenerate, "origin": origin });
    }
    emit(&out)
}

fn gradcheck(a: GradcheckArgs, cfg: config::FileConfig) -> anyhow::Result<()> {
    let seed = a.seed.unwrap_or(cfg.gradcheck.seed);
    let report = np3m_core::gradcheck::gradcheck(seed)?;
    let worst = report.max_error();
    emit(&json!({ "seed": seed, "max_rel_error": worst, "groups": report.groups, "positions": report.positions }))?;
    if !(worst < 1e-5) {
        bail!("gradcheck failed: max relative error {worst:.3e}");
    }
    Ok(())
}
