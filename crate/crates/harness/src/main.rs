use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand};

use selrob_core::corruptions::corruption_suite_eval;
use selrob_harness::config::{parse_list, StepRule, OUTPUT_ROOT_ENV};
use selrob_harness::evaluate;
use selrob_harness::run::{load_splits, train_run};
use selrob_harness::sweep::{collect_cached, evaluate_run, run_alpha_sweep};
use selrob_harness::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "selrob", version, about = "Class selectivity vs. robustness experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (relative paths resolve under $SELROB_OUTPUT_ROOT).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Comma-separated α values.
    #[arg(long, allow_hyphen_values = true)]
    alphas: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// `eps-over-ten`, `fine`, or a fixed step size.
    #[arg(long)]
    pgd_step: Option<String>,
}

#[derive(Debug, Args)]
struct Cell {
    #[arg(long, allow_hyphen_values = true)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic dataset to STNS files.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Destination (default: <output>/data).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one cell (reuses a cached checkpoint when present).
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cell: Cell,
        /// Train on PGD examples with this many iterations.
        #[arg(long, default_value_t = 0)]
        pgd_iterations: usize,
    },
    /// FGSM ε sweep and PGD step sweep for one cell.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cell: Cell,
    },
    /// Corruption-suite accuracy for one cell.
    Corrupt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cell: Cell,
    },
    /// Every measurement for one cell, written as metrics JSON.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cell: Cell,
    },
    /// Train and evaluate every (α, seed) cell, then write the report.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Rebuild the report from stored runs without training.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &c.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(a) = &c.alphas {
        cfg.alphas = parse_list(a)?;
    }
    if let Some(s) = &c.seeds {
        cfg.seeds = parse_list(s)?;
    }
    if let Some(e) = c.epochs {
        cfg.training.epochs = e;
    }
    if let Some(s) = &c.pgd_step {
        cfg.attacks.pgd_step = match s.as_str() {
            "eps-over-ten" => StepRule::EpsOverTen,
            "fine" => StepRule::Fine,
            v => StepRule::Fixed(v.parse().with_context(|| format!("PGD step {v:?}"))?),
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = load_config(&common)?;
            let splits = load_splits(&cfg)?;
            let dir = out.unwrap_or_else(|| cfg.resolved_output_dir().join("data"));
            splits.save(&dir)?;
            println!("wrote {} / {} / {} samples to {}", splits.train.set.len(), splits.val.set.len(), splits.test.set.len(), dir.display());
        }
        Command::Train { common, cell, pgd_iterations } => {
            let cfg = load_config(&common)?;
            let splits = load_splits(&cfg)?;
            let attack = cfg.adversarial_training.attack(pgd_iterations);
            let run = train_run(&cfg, &splits, cell.alpha, cell.seed, attack)?;
            let r = &run.record;
            println!("run_dir={}", run.dir.display());
            println!("cached={} best_epoch={} val_accuracy={:.4}", run.cached, r.best_epoch, r.best_val_accuracy());
        }
        Command::Attack { common, cell } => {
            let cfg = load_config(&common)?;
            let splits = load_splits(&cfg)?;
            let run = train_run(&cfg, &splits, cell.alpha, cell.seed, None)?;
            let set = if cfg.attacks.samples == 0 { splits.test.set.clone() } else { splits.test.set.head(cfg.attacks.samples)? };
            for p in evaluate::fgsm_sweep(&cfg, &run.network, &set)? {
                println!("fgsm epsilon={}/255 accuracy={:.4}", p.epsilon, p.accuracy);
            }
            let curve = evaluate::pgd_sweep(&cfg, &run.network, &set)?;
            for (s, a) in &curve.points {
                println!("pgd epsilon={}/255 step={} steps={s} accuracy={a:.4}", curve.epsilon, curve.step_size);
            }
        }
        Command::Corrupt { common, cell } => {
            let cfg = load_config(&common)?;
            let splits = load_splits(&cfg)?;
            let run = train_run(&cfg, &splits, cell.alpha, cell.seed, None)?;
            let t = &splits.test.set;
            let suite = corruption_suite_eval(&run.network, &t.x, &t.y, cfg.corruptions.suite_seed)?;
            println!("clean accuracy={:.4}", suite.clean_accuracy);
            for (k, kind) in suite.kinds.iter().enumerate() {
                let cells: Vec<String> = suite.accuracy[k].iter().map(|a| format!("{a:.4}")).collect();
                println!("{:<15} {}", kind.name(), cells.join(" "));
            }
            println!("grand mean={:.4}", suite.grand_mean);
        }
        Command::Analyze { common, cell } => {
            let cfg = load_config(&common)?;
            let splits = load_splits(&cfg)?;
            let run = train_run(&cfg, &splits, cell.alpha, cell.seed, None)?;
            let metrics = evaluate_run(&cfg, &splits, &run)?;
            if let Some(s) = &metrics.selectivity {
                let path = run.dir.join("units.csv");
                s.write_csv(fs::File::create(&path)?)?;
                println!("si network={:.4} units={}", s.network_mean, path.display());
            }
            if let Some(j) = metrics.jacobian_frobenius {
                println!("jacobian frobenius={j:.4}");
            }
            for f in &metrics.failures {
                eprintln!("stage {} failed: {}", f.stage, f.message);
            }
            println!("metrics in {}", run.dir.display());
        }
        Command::Sweep { common } => {
            let cfg = load_config(&common)?;
            let out = run_alpha_sweep(&cfg)?;
            println!("cells={} pgd_training={} failures={}", out.cells.len(), out.adversarial.len(), out.failures.len());
            println!("report_dir={}", out.report.dir.display());
        }
        Command::Report { common } => {
            let cfg = load_config(&common)?;
            let out = collect_cached(&cfg)?;
            if out.cells.is_empty() {
                bail!("no stored runs under {} (is {OUTPUT_ROOT_ENV} set as during the sweep?)", cfg.resolved_output_dir().display());
            }
            println!("cells={} missing={}", out.cells.len(), out.failures.iter().filter(|f| f.stage == "collect").count());
            println!("report_dir={}", out.report.dir.display());
        }
    }
    Ok(())
}
