use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use slim3d::ablation::{ablation_strategies, run_ablation, AblationConfig, DEFAULT_SEEDS};
use slim3d::attention::gradcheck::InjectedFault;
use slim3d::attention::train::TrainConfig;
use slim3d::bench::{bench_csv, run_bench, BenchConfig};
use slim3d::check::{run_checks, CheckConfig, DEFAULT_CASES};
use slim3d::geo::GeoParams;
use slim3d::mask::{compose, save_mask, sparsity_stats, MaskStrategy, DEFAULT_N_FIXED};
use slim3d::scene::{load_layout, load_scene};
use slim3d::scenegen::SceneRecipe;
use slim3d::SlimError;

/// Geometry-adaptive attention masks: build, verify, benchmark, ablate.
#[derive(Parser)]
#[command(name = "slim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct NeighborArgs {
    /// Lower bound on adaptive neighbor counts.
    #[arg(long, default_value_t = 2)]
    kmin: usize,
    /// Upper bound on adaptive neighbor counts.
    #[arg(long, default_value_t = 10)]
    kmax: usize,
    /// Neighbor count for `fixedn` when the spec gives none.
    #[arg(long, default_value_t = DEFAULT_N_FIXED)]
    nfixed: usize,
}

impl NeighborArgs {
    fn geo(&self) -> Result<GeoParams, SlimError> {
        GeoParams::new(self.kmin, self.kmax)
    }

    fn strategy(&self, spec: &str) -> Result<MaskStrategy, SlimError> {
        let spec = spec.trim().to_ascii_lowercase();
        let spec = match spec.strip_prefix("fixedn") {
            Some(rest) if rest.is_empty() || rest == "+inst" => {
                format!("fixedn:{}{rest}", self.nfixed)
            }
            _ => spec,
        };
        MaskStrategy::parse(&spec, self.geo()?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    /// Corrupt one analytic W_V gradient entry.
    InjectGrad,
}

#[derive(Subcommand)]
enum Command {
    /// Build the attention mask for a scene and layout and write a SLIMMASK file.
    Mask {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        layout: PathBuf,
        /// causal | fullall | full | diag | fixedn[:k] | geo, optionally +inst
        #[arg(long, default_value = "geo+inst")]
        strategy: String,
        #[command(flatten)]
        neighbors: NeighborArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle, invariance and gradient suites.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random scenes for the oracle suite.
        #[arg(long, default_value_t = DEFAULT_CASES)]
        cases: usize,
        #[arg(long, value_enum)]
        fault: Option<Fault>,
        #[command(flatten)]
        neighbors: NeighborArgs,
    },
    /// Time dense against sparse-gather attention.
    Bench {
        /// Object counts, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [64, 128, 256, 512])]
        sizes: Vec<usize>,
        /// Strategy specs, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = ["geo".to_string(), "fixedn".to_string(), "full".to_string()])]
        strategy: Vec<String>,
        #[arg(long, default_value_t = 21)]
        trials: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        neighbors: NeighborArgs,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the toy decoder under every masking strategy.
    Ablate {
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: u64,
        /// First seed; runs use seed, seed+1, ...
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training steps per run (default: the built-in budget).
        #[arg(long)]
        steps: Option<usize>,
        /// key=value scene recipe file.
        #[arg(long)]
        recipe: Option<PathBuf>,
        /// Only these strategies, comma separated.
        #[arg(long, value_delimiter = ',')]
        strategy: Vec<String>,
        #[command(flatten)]
        neighbors: NeighborArgs,
        /// Also write the table CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-run `step,loss,accuracy` curves into this directory.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
}

enum Failure {
    /// Bad input or configuration: exit code 2.
    Usage(SlimError),
    /// A verification or training failure: exit code 1.
    Failed(String),
}

impl From<SlimError> for Failure {
    fn from(e: SlimError) -> Self {
        match e {
            SlimError::GradCheck(_) | SlimError::Diverged { .. } => Failure::Failed(e.to_string()),
            other => Failure::Usage(other),
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("SLIM_THREADS") else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::Usage(SlimError::Config(format!(
            "SLIM_THREADS=`{value}` is not a positive integer"
        )))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(SlimError::Config(e.to_string())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Mask {
            scene,
            layout,
            strategy,
            neighbors,
            out,
        } => {
            let strategy = neighbors.strategy(&strategy)?;
            let scene = load_scene(&scene)?;
            let layout = load_layout(&layout)?;
            let mask = compose(&scene, &layout, &strategy)?;
            save_mask(&mask, &out)?;
            println!("{} {}", strategy.label(), sparsity_stats(&mask));
        }
        Command::Check {
            seed,
            cases,
            fault,
            neighbors,
        } => {
            let config = CheckConfig {
                seed,
                cases,
                geo: neighbors.geo()?,
                fault: fault.map(|Fault::InjectGrad| InjectedFault::value_projection()),
            };
            let report = run_checks(&config)?;
            print!("{report}");
            if !report.passed() {
                return Err(Failure::Failed("verification failed".into()));
            }
        }
        Command::Bench {
            sizes,
            strategy,
            trials,
            warmup,
            seed,
            neighbors,
            out,
        } => {
            let config = BenchConfig {
                sizes,
                strategies: strategy
                    .iter()
                    .map(|s| neighbors.strategy(s))
                    .collect::<Result<_, _>>()?,
                warmup,
                trials,
                seed,
                ..BenchConfig::default()
            };
            let csv = bench_csv(&run_bench(&config)?);
            print!("{csv}");
            if let Some(path) = out {
                fs::write(path, &csv).map_err(SlimError::from)?;
            }
        }
        Command::Ablate {
            seeds,
            seed,
            steps,
            recipe,
            strategy,
            neighbors,
            out,
            curves,
        } => {
            let mut train = TrainConfig::grounding_default();
            if let Some(path) = recipe {
                train.recipe = SceneRecipe::load(path)?;
                train.fit_vocab();
            }
            if let Some(steps) = steps {
                train.steps = steps;
            }
            let strategies = if strategy.is_empty() {
                ablation_strategies(neighbors.geo()?, neighbors.nfixed)?
            } else {
                strategy
                    .iter()
                    .map(|s| neighbors.strategy(s))
                    .collect::<Result<_, _>>()?
            };
            let config = AblationConfig {
                train,
                strategies,
                seeds: (seed..seed + seeds).collect(),
            };
            let table = run_ablation(&config)?;
            if let Some(dir) = curves {
                fs::create_dir_all(&dir).map_err(SlimError::from)?;
                for row in &table.rows {
                    for cell in &row.cells {
                        if let Ok(m) = &cell.outcome {
                            let name =
                                format!("{}_seed{}.csv", file_stem(&row.strategy), cell.seed);
                            fs::write(dir.join(name), m.to_csv()).map_err(SlimError::from)?;
                        }
                    }
                }
            }
            let csv = table.to_csv();
            print!("{csv}\n{}", table.to_text());
            for row in &table.rows {
                for cell in &row.cells {
                    if let Ok(m) = &cell.outcome {
                        println!("{}", m.summary());
                    }
                }
            }
            if let Some(path) = out {
                fs::write(path, &csv).map_err(SlimError::from)?;
            }
            if table.has_failures() {
                return Err(Failure::Failed("some training runs failed".into()));
            }
        }
    }
    Ok(())
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
