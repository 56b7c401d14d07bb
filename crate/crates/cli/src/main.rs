use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use relaytopo::bench::{
    emit_training_curves, export_topology_dot, run_experiment, solve, write_results, ExperimentConfig, Scheme,
    SolutionRecord,
};
use relaytopo::generator::{GeneratorConfig, Trainer};
use relaytopo::model::{generate_instance, read_instance, write_instance, NetworkInstance, SystemParams};

/// Worker count for `bench`; all cores when unset.
const WORKERS_ENV: &str = "RELAYTOPO_WORKERS";
/// Directory that relative output paths are resolved against.
const OUT_DIR_ENV: &str = "RELAYTOPO_OUT_DIR";

#[derive(Parser)]
#[command(name = "relaytopo", version, about = "Relay-topology planning for energy-harvesting TDMA networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a network instance.
    Generate(GenerateArgs),
    /// Build a topology with one scheme and balance its slots.
    Solve(SolveArgs),
    /// Train the generator, writing loss curves and a checkpoint.
    Train(TrainArgs),
    /// Run a sweep described by a TOML file and write the results CSV.
    Bench(BenchArgs),
    /// Render a solved topology as Graphviz DOT.
    ExportDot(ExportDotArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    n_devices: usize,
    #[arg(long, default_value_t = 2)]
    n_beacons: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Beacon transmit power, watts.
    #[arg(long)]
    pb_power: Option<f64>,
    /// TOML file with system parameters.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SolverArgs {
    /// TOML file with `[ib]`, `[pt]`, `[train]` and `[adam]` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    net_seed: Option<u64>,
    #[arg(long)]
    latent_seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

impl SolverArgs {
    fn load(&self) -> Result<GeneratorConfig> {
        let mut cfg: GeneratorConfig = match &self.config {
            Some(p) => GeneratorConfig::from_toml(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?,
            None => GeneratorConfig::default(),
        };
        if let Some(s) = self.net_seed {
            cfg.train.net_seed = s;
        }
        if let Some(s) = self.latent_seed {
            cfg.train.latent_seed = s;
        }
        if let Some(m) = self.max_epochs {
            cfg.train.max_epochs = m;
        }
        if self.patience.is_some() {
            cfg.train.patience = self.patience;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    scheme: Scheme,
    /// Seed of the greedy visiting order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    solver: SolverArgs,
    /// Output JSON file; stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    instance: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value = "curves.csv")]
    curves: PathBuf,
    #[arg(long, default_value = "checkpoint.json")]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    /// Results CSV; defaults to the `output` entry of the config.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ExportDotArgs {
    #[arg(long)]
    instance: PathBuf,
    /// JSON written by `solve`.
    #[arg(long)]
    solution: PathBuf,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_instance(path: &Path) -> Result<NetworkInstance> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_instance(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if path.is_relative() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

fn create(path: &Path) -> Result<io::BufWriter<fs::File>> {
    let path = resolve(path);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(io::BufWriter::new(file))
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => create(p)?.write_all(text.as_bytes())?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut params = match &args.params {
        Some(p) => SystemParams::from_toml(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => SystemParams::default(),
    };
    if let Some(p) = args.pb_power {
        params.pb_power_w = p;
    }
    let inst = generate_instance(args.seed, args.n_devices, args.n_beacons, params)?;
    let mut buf = Vec::new();
    write_instance(&inst, &mut buf)?;
    emit(args.output.as_deref(), std::str::from_utf8(&buf)?)
}

fn solve_cmd(args: SolveArgs) -> Result<()> {
    let inst = load_instance(&args.instance)?;
    let cfg = args.solver.load()?;
    let solution = solve(&inst, args.scheme, &cfg, args.seed)?;
    emit(args.output.as_deref(), &SolutionRecord::from(&solution).to_json()?)
}

fn train(args: TrainArgs) -> Result<()> {
    let inst = load_instance(&args.instance)?;
    let cfg = args.solver.load()?;
    let mut trainer = Trainer::new(&inst, cfg)?;
    trainer.run()?;
    emit_training_curves(trainer.history(), create(&args.curves)?)?;
    trainer.checkpoint().save(create(&args.checkpoint)?)?;
    let last = trainer.history().last().expect("at least one epoch");
    println!(
        "epochs {} champion_loss {} b_min {}",
        trainer.epochs(),
        last.running_min_loss,
        last.b_min
    );
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let cfg = ExperimentConfig::from_toml(&read_text(&args.config)?)
        .with_context(|| format!("parsing {}", args.config.display()))?;
    let workers = match std::env::var(WORKERS_ENV) {
        Ok(v) => Some(v.parse().with_context(|| format!("{WORKERS_ENV}={v:?}"))?),
        Err(_) => None,
    };
    let rows = run_experiment(&cfg, workers)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    write_results(&rows, create(args.output.as_deref().unwrap_or(&cfg.output))?)?;
    if failed > 0 {
        log::warn!("{failed} of {} runs failed; see the error column", rows.len());
    }
    Ok(())
}

fn export_dot(args: ExportDotArgs) -> Result<()> {
    let inst = load_instance(&args.instance)?;
    let record = SolutionRecord::from_json(&read_text(&args.solution)?)?;
    if record.parents.len() != inst.n_devices() {
        bail!("solution has {} devices, instance has {}", record.parents.len(), inst.n_devices());
    }
    let dot = export_topology_dot(&inst, &record.topology()?, &record.slots)?;
    emit(args.output.as_deref(), &dot)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Generate(a) => generate(a),
        Command::Solve(a) => solve_cmd(a),
        Command::Train(a) => train(a),
        Command::Bench(a) => bench(a),
        Command::ExportDot(a) => export_dot(a),
    }
}
