use clap::{Parser, Subcommand};
use contseg::config::{DistillMode, RunConfig};
use contseg::error::{Error, Result};
use contseg::harness::{
    analyze, gen_data, resolve_scenario, run_continual, run_grid, run_offline, ClassMapping,
    ExperimentGrid,
};
use contseg::model::load_checkpoint;
use contseg::policies::{Direction, PolicyId};
use contseg::scoring::{all_scalar_kinds, score_dataset, write_scores_csv};
use contseg::types::ScenarioKind;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "contseg",
    about = "Continual-learning engine for semantic segmentation with replay-buffer sample selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario dataset.
    GenData {
        /// class | domain
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional key-value config file.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a continual (or offline) training sequence.
    Run {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        th: Option<f64>,
        #[arg(long)]
        cmp: Option<usize>,
        #[arg(long)]
        rss_dim: Option<usize>,
        #[arg(long)]
        direction: Option<String>,
        #[arg(long)]
        buffer_size: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        distill: Option<String>,
        /// Joint training on all tasks instead of the continual sequence.
        #[arg(long, default_value_t = false)]
        offline: bool,
    },
    /// Run every cell of a grid file and summarize as CSV.
    RunGrid {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two finished runs over the same scenario.
    Analyze {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a dataset under a checkpoint and emit the per-sample table.
    Score {
        /// Path to a checkpoint blob (`model_task2.bin`; the `.json`
        /// header sits next to it).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn scenario_kind(s: &str) -> Result<ScenarioKind> {
    match s {
        "class" | "class_incremental" => Ok(ScenarioKind::ClassIncremental),
        "domain" | "domain_incremental" => Ok(ScenarioKind::DomainIncremental),
        other => Err(Error::Config(format!("unknown scenario '{}'", other))),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<(RunConfig, Option<Vec<u8>>)> {
    match path {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            let text = String::from_utf8_lossy(&bytes).into_owned();
            Ok((RunConfig::from_kv_text(&text)?, Some(bytes)))
        }
        None => Ok((RunConfig::default(), None)),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_command(
    out: PathBuf,
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    seed: Option<u64>,
    scenario: Option<String>,
    policy: Option<String>,
    th: Option<f64>,
    cmp: Option<usize>,
    rss_dim: Option<usize>,
    direction: Option<String>,
    buffer_size: Option<usize>,
    epochs: Option<usize>,
    distill: Option<String>,
    offline: bool,
) -> Result<()> {
    let (mut cfg, file_bytes) = load_config(&config)?;
    if let Some(s) = scenario {
        let kind = scenario_kind(&s)?;
        if kind == ScenarioKind::DomainIncremental && cfg.tasks == 3 {
            cfg.tasks = 2;
        }
        cfg.scenario = kind;
    }
    if let Some(d) = data {
        cfg.data_dir = Some(d);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(p) = policy {
        cfg.policy.id = p.parse::<PolicyId>()?;
    }
    if let Some(v) = th {
        cfg.policy.th = v;
    }
    if let Some(v) = cmp {
        cfg.policy.cmp = v;
    }
    if let Some(v) = rss_dim {
        cfg.policy.rss_dim = v;
    }
    if let Some(v) = direction {
        cfg.policy.direction = v.parse::<Direction>()?;
    }
    if let Some(v) = buffer_size {
        cfg.buffer_capacity = v;
    }
    if let Some(v) = epochs {
        cfg.epochs = v;
    }
    if let Some(v) = distill {
        cfg.distill = v.parse::<DistillMode>()?;
    }

    let scenario = resolve_scenario(&cfg)?;
    let echo = match file_bytes {
        Some(b) => b,
        None => cfg.canonical_kv().into_bytes(),
    };
    let artifacts = if offline {
        run_offline(&cfg, &scenario, &echo, &out)?
    } else {
        run_continual(&cfg, &scenario, &echo, &out)?
    };
    println!(
        "run complete: {} steps, artifacts in {}",
        artifacts.metrics.steps.len(),
        artifacts.out_dir.display()
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result: Result<()> = match cli.command {
        Command::GenData {
            scenario,
            out,
            seed,
            config,
        } => (|| {
            let (mut cfg, _) = load_config(&config)?;
            let kind = scenario_kind(&scenario)?;
            if kind == ScenarioKind::DomainIncremental && cfg.tasks == 3 {
                cfg.tasks = 2;
            }
            cfg.scenario = kind;
            cfg.seed = seed;
            gen_data(&cfg, &out)?;
            println!("dataset written to {}", out.display());
            Ok(())
        })(),
        Command::Run {
            out,
            config,
            data,
            seed,
            scenario,
            policy,
            th,
            cmp,
            rss_dim,
            direction,
            buffer_size,
            epochs,
            distill,
            offline,
        } => run_command(
            out, config, data, seed, scenario, policy, th, cmp, rss_dim, direction,
            buffer_size, epochs, distill, offline,
        ),
        Command::RunGrid { grid, out } => (|| {
            let text = std::fs::read_to_string(&grid)
                .map_err(|e| Error::io(grid.display().to_string(), e))?;
            let grid = ExperimentGrid::from_kv_text(&text)?;
            let summary = run_grid(&grid, &out)?;
            println!("grid summary at {}", summary.display());
            Ok(())
        })(),
        Command::Analyze { a, b, out } => (|| {
            analyze(&a, &b, &out)?;
            println!("comparison written to {}", out.display());
            Ok(())
        })(),
        Command::Score { model, data, out } => (|| {
            let json = model.with_extension("json");
            let (model, _) = load_checkpoint(&model, &json)?;
            let scenario = contseg::harness::scenario_from_dir(&data)?;
            let mut mapping = ClassMapping::new();
            for t in &scenario.tasks {
                mapping.extend(&t.labeled_classes);
            }
            if mapping.slots() != model.num_classes {
                return Err(Error::Config(format!(
                    "checkpoint has {} outputs but the dataset labels {} classes",
                    model.num_classes,
                    mapping.slots()
                )));
            }
            let mut all = Vec::new();
            for task in &scenario.tasks {
                let samples: Vec<_> = task
                    .train_samples
                    .iter()
                    .chain(&task.val_samples)
                    .cloned()
                    .collect();
                let scores = score_dataset(
                    Some(&model),
                    &samples,
                    &task.labeled_classes,
                    scenario.num_classes,
                    &all_scalar_kinds(),
                    Some(mapping.table()),
                )?;
                all.extend(scores);
            }
            all.sort_by_key(|s| s.id);
            write_scores_csv(&all, &out)?;
            println!("score table written to {}", out.display());
            Ok(())
        })(),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e);
        std::process::exit(1);
    }
}
