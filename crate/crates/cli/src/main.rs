use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rct::data::save_csv;
use rct::harness::grid::grid_experiment;
use rct::harness::persist::write_history;
use rct::harness::pipeline::{annotate_stage, load_annotation, prepare, run_pipeline, run_with_annotation};
use rct::harness::presets::{reproduce, Figure, ReproduceOptions};
use rct::harness::{Axis, PipelineConfig, RunRecord};
use rct::nets::Network;
use rct::robustify::evaluate;
use rct::{Error, Result};

/// Robust co-training: annotate unlabeled data, then train adversarially.
#[derive(Parser)]
#[command(name = "rct", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON pipeline configuration; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Override a configuration value, e.g. `--set annotation.cotrain.lambda1=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self, base: PipelineConfig) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => base,
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Validation("this command needs --out".into()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the labeled, unlabeled and test splits as CSV.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Annotate the unlabeled pool and write annotation.csv.
    Annotate {
        #[command(flatten)]
        common: Common,
    },
    /// Adversarially train on the labeled set plus an existing annotation.
    AdvTrain {
        #[command(flatten)]
        common: Common,
        /// annotation.csv from a previous `annotate` run.
        #[arg(long)]
        annotation: PathBuf,
    },
    /// Evaluate a saved network on the configured test set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// model.bin from a previous run.
        #[arg(long)]
        model: PathBuf,
    },
    /// Run the whole pipeline once.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Run a Cartesian grid of configurations, `replicates` times per cell.
    Grid {
        #[command(flatten)]
        common: Common,
        /// `path=v1,v2,...` or `path=[v1, v2]`; repeat for more axes.
        #[arg(long = "axis", value_name = "PATH=VALUES")]
        axes: Vec<String>,
    },
    /// Re-run a named trend experiment and report whether the trend holds.
    Reproduce {
        /// label_quality, total_variance, heatmap or adv_training.
        figure: String,
        #[command(flatten)]
        common: Common,
        /// Number of seeds; each figure has its own default.
        #[arg(long)]
        seeds: Option<usize>,
    },
}

enum Outcome {
    Done,
    TrendViolated,
}

fn print_record(rec: &RunRecord) {
    let r = &rec.report;
    print!("run {}  std_acc {:.4}", rec.run_id, r.standard_accuracy);
    for (name, acc) in &r.robust_accuracy {
        print!("  {name} {acc:.4}");
    }
    if let Some(p) = r.pseudo_label_accuracy {
        print!("  pseudo_acc {p:.4}");
    }
    println!("  ({:.1}s)", rec.wall_clock_secs);
}

fn execute(command: Command) -> Result<Outcome> {
    match command {
        Command::GenData { common } => {
            let cfg = common.resolve(PipelineConfig::default())?;
            let out = common.out_dir()?;
            let prep = prepare(&cfg)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            save_csv(&prep.labeled, &out.join("labeled.csv"))?;
            save_csv(&prep.pool.as_dataset(), &out.join("unlabeled.csv"))?;
            save_csv(&prep.test, &out.join("test.csv"))?;
            println!(
                "{} labeled, {} unlabeled, {} test rows written to {}",
                prep.labeled.len(),
                prep.pool.len(),
                prep.test.len(),
                out.display()
            );
        }
        Command::Annotate { common } => {
            let cfg = common.resolve(PipelineConfig::default())?;
            let out = common.out_dir()?;
            let prep = prepare(&cfg)?;
            let ann = annotate_stage(&cfg, &prep)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            rct::harness::persist::write_annotation(&prep.pool, &ann, &out.join("annotation.csv"))?;
            write_history(&ann.history, &out.join("annotation_history.csv"))?;
            let accuracy = prep.pool_accuracy().map(|score| score(&ann.pseudo_labels));
            print!("{} annotated {} points", cfg.annotation.method.name(), prep.pool.len());
            match accuracy {
                Some(acc) => println!(", pseudo_acc {acc:.4}"),
                None => println!(),
            }
        }
        Command::AdvTrain { common, annotation } => {
            let cfg = common.resolve(PipelineConfig::default())?;
            let prep = prepare(&cfg)?;
            let ann = load_annotation(&annotation, &prep)?;
            print_record(&run_with_annotation(&cfg, ann, common.out.as_deref())?);
        }
        Command::Eval { common, model } => {
            let cfg = common.resolve(PipelineConfig::default())?;
            let prep = prepare(&cfg)?;
            let net = Network::load(&model)?;
            let report = evaluate(&net, &prep.test, &cfg.eval.attacks)?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join("eval.json"), &json)?;
            }
            println!("{json}");
        }
        Command::Run { common } => {
            let cfg = common.resolve(PipelineConfig::default())?;
            print_record(&run_pipeline(&cfg, common.out.as_deref())?);
        }
        Command::Grid { common, axes } => {
            let cfg = common.resolve(PipelineConfig::default())?;
            let axes = axes.iter().map(|a| Axis::parse(a)).collect::<Result<Vec<_>>>()?;
            let runs = grid_experiment(&cfg, &axes, common.jobs, common.out.as_deref())?;
            for run in &runs {
                let cell: Vec<String> = run.assignments.iter().map(|(k, v)| format!("{k}={v}")).collect();
                print!("cell {} [{}] replicate {}: ", run.cell, cell.join(" "), run.replicate);
                print_record(&run.record);
            }
        }
        Command::Reproduce { figure, common, seeds } => {
            let figure: Figure = figure.parse()?;
            let cfg = common.resolve(figure.preset())?;
            let opts = ReproduceOptions {
                seeds: seeds.unwrap_or(figure.default_seeds()),
                jobs: common.jobs,
            };
            let verdict = reproduce(figure, &cfg, &opts, common.out.as_deref())?;
            println!("{verdict}");
            if !verdict.passed() {
                return Ok(Outcome::TrendViolated);
            }
        }
    }
    Ok(Outcome::Done)
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
    match execute(cli.command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::TrendViolated) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
