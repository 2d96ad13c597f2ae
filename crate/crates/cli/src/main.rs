//! `trecover`: runs the recovery experiments and diagnostics from the command line.
//!
//! Exit codes: 0 on success, 1 for usage or validation errors, 2 when a
//! computation aborts on a non-finite value.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use transport_recovery::config::{parse_config, parse_override, RunConfig};
use transport_recovery::densities::{wrap_angle, VonMisesPreset};
use transport_recovery::embedding::{
    check_embedding, circle_grid, delay_map, line_grid, quotient_embedding_check, EmbeddingReport,
};
use transport_recovery::experiments::{run_trials, sweep_divfield, BatchResult, ExperimentKind};
use transport_recovery::metrics::energy_mmd;
use transport_recovery::rng::stream;
use transport_recovery::{Domain, Error, ParticleEnsemble};

#[derive(Parser, Debug)]
#[command(
    name = "trecover",
    version,
    about = "Recover transport maps and vector fields from finitely many densities"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn the circle map from pushforwards of von Mises densities.
    RecoverMap(RunArgs),
    /// Learn the Lorenz-63 field from density snapshots.
    RecoverLorenz(RunArgs),
    /// Learn the pendulum field from weighted divergences.
    RecoverDivfield {
        #[command(flatten)]
        run: RunArgs,
        /// Number of densities (divfield.m).
        #[arg(long)]
        m: Option<usize>,
    },
    /// Relative error versus number of densities, m = 1..m_max.
    SweepDivfield {
        #[command(flatten)]
        run: RunArgs,
        /// Largest m (divfield.m_max).
        #[arg(long)]
        m_max: Option<usize>,
        /// Runs per m (divfield.repeats).
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Numerical injectivity and immersion check of a fixture map.
    CheckEmbedding(EmbeddingArgs),
    /// Energy MMD between two point clouds stored as CSV.
    Metric { a: PathBuf, b: PathBuf },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; trial k uses seed + k.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    /// Trials run concurrently (results do not depend on it).
    #[arg(long)]
    workers: Option<usize>,
    /// Iteration budget of the selected experiment.
    #[arg(long)]
    iterations: Option<usize>,
    /// Any config key, e.g. `--set lorenz.particles=20000`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Fixture {
    /// (sin x, cos x) on the circle.
    Circle,
    /// sin x on the circle.
    Sine,
    /// x^3 on [-1, 1].
    Cubic,
    /// Quotient map of m random von Mises densities.
    Quotient,
    /// Delay map of cos under rotation by one radian, k = m.
    Delay,
}

#[derive(Args, Debug)]
struct EmbeddingArgs {
    #[arg(long, value_enum, default_value = "circle")]
    fixture: Fixture,
    /// Densities (quotient) or delay length (delay).
    #[arg(long, default_value_t = 6)]
    m: usize,
    /// Number of test points.
    #[arg(long, default_value_t = 256)]
    grid: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sep_threshold: Option<f64>,
    #[arg(long)]
    sv_threshold: Option<f64>,
}

fn resolve(args: &RunArgs, kind: ExperimentKind) -> Result<RunConfig, Error> {
    let overrides = args
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    let mut cfg = parse_config(args.config.as_deref(), &overrides)?;
    cfg.experiment = Some(kind);
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = &args.out {
        cfg.out = v.clone();
    }
    if let Some(v) = args.trials {
        cfg.trials = v;
    }
    if let Some(v) = args.workers {
        cfg.workers = v;
    }
    if let Some(v) = args.iterations {
        match kind {
            ExperimentKind::Map1d => cfg.map1d.iterations = v,
            ExperimentKind::Lorenz => cfg.lorenz.iterations = v,
            ExperimentKind::Divfield => cfg.divfield.iterations = v,
        }
    }
    Ok(cfg)
}

fn finish_batch(batch: BatchResult, cfg: &RunConfig) -> Result<ExitCode, Error> {
    batch.write(cfg, &cfg.out)?;
    println!("{}", serde_json::to_string_pretty(&batch.aggregate)?);
    for r in &batch.records {
        if let Some(e) = &r.summary.error {
            eprintln!("{} (seed {}) aborted: {e}", r.name, r.summary.seed);
        }
    }
    eprintln!("wrote {}", cfg.out.display());
    Ok(if batch.any_numeric_abort() {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn embedding(args: &EmbeddingArgs) -> Result<EmbeddingReport, Error> {
    let mut th = parse_config(args.config.as_deref(), &[])?.embedding;
    if let Some(v) = args.sep_threshold {
        th.sep_threshold = v;
    }
    if let Some(v) = args.sv_threshold {
        th.sv_threshold = v;
    }
    let circle = circle_grid(args.grid);
    match args.fixture {
        Fixture::Circle => check_embedding(
            |x| Ok(vec![x[0].sin(), x[0].cos()]),
            &circle,
            Domain::Circle,
            th,
        ),
        Fixture::Sine => check_embedding(|x| Ok(vec![x[0].sin()]), &circle, Domain::Circle, th),
        Fixture::Cubic => {
            // odd count so that the critical point 0 is a test point
            let pts = line_grid(args.grid | 1, -1.0, 1.0);
            check_embedding(|x| Ok(vec![x[0].powi(3)]), &pts, Domain::Euclidean, th)
        }
        Fixture::Quotient => {
            let family = VonMisesPreset::circle_map()
                .draw(args.m, &mut stream(args.seed, "embedding.quotient"))?;
            quotient_embedding_check(&family, &circle, th)
        }
        Fixture::Delay => check_embedding(
            |x| delay_map(|p| p[0].cos(), |p| vec![wrap_angle(p[0] + 1.0)], args.m, x),
            &circle,
            Domain::Circle,
            th,
        ),
    }
}

fn read_points(path: &Path) -> Result<ParticleEnsemble, Error> {
    ParticleEnsemble::read_csv(BufReader::new(File::open(path)?))
}

fn dispatch(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::RecoverMap(args) => {
            let cfg = resolve(&args, ExperimentKind::Map1d)?;
            finish_batch(run_trials(ExperimentKind::Map1d, &cfg)?, &cfg)
        }
        Command::RecoverLorenz(args) => {
            let cfg = resolve(&args, ExperimentKind::Lorenz)?;
            finish_batch(run_trials(ExperimentKind::Lorenz, &cfg)?, &cfg)
        }
        Command::RecoverDivfield { run, m } => {
            let mut cfg = resolve(&run, ExperimentKind::Divfield)?;
            if let Some(m) = m {
                cfg.divfield.m = m;
            }
            finish_batch(run_trials(ExperimentKind::Divfield, &cfg)?, &cfg)
        }
        Command::SweepDivfield {
            run,
            m_max,
            repeats,
        } => {
            let mut cfg = resolve(&run, ExperimentKind::Divfield)?;
            if let Some(v) = m_max {
                cfg.divfield.m_max = v;
            }
            if let Some(v) = repeats {
                cfg.divfield.repeats = v;
            }
            finish_batch(sweep_divfield(&cfg)?, &cfg)
        }
        Command::CheckEmbedding(args) => {
            let report = embedding(&args)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            eprintln!("note: verdicts are numerical evidence on a finite grid, not a certificate");
            Ok(ExitCode::SUCCESS)
        }
        Command::Metric { a, b } => {
            let d = energy_mmd(&read_points(&a)?, &read_points(&b)?)?;
            println!("{}", serde_json::to_string_pretty(&d)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
