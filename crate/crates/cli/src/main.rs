use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedcil::experiment::{
    ablation_set, compare_methods, export_plot_data, run, summary_csv, sweep_csv, sweep_local_iterations,
    DatasetKind, ExperimentConfig, PlotKind,
};
use fedcil::trainers::Method;

/// Class-incremental federated learning simulator.
#[derive(Parser, Debug)]
#[command(name = "fedcil", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one configuration over its seeds and write the run directory.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Sweep the number of local iterations per round.
    #[command(name = "sweep-T")]
    SweepT {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated local-iteration values.
        #[arg(long, value_delimiter = ',', required = true)]
        t_values: Vec<usize>,
        /// Keep the round count fixed instead of holding T×R constant.
        #[arg(long)]
        fixed_rounds: bool,
        /// CSV output path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare methods (or the FedCIL ablation set) over shared seeds.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated methods; defaults to the configured method.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        /// Run full FedCIL and its three ablations instead.
        #[arg(long, conflicts_with = "methods")]
        ablation: bool,
        /// Extra configuration files, one row each.
        #[arg(long = "with-config")]
        with_configs: Vec<PathBuf>,
        /// CSV output path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export plot data from a finished run directory as CSV.
    Export {
        /// Run directory holding seed-* subdirectories.
        run_dir: PathBuf,
        /// loss_trace, grad_norm, fid_trace, confusion or post_sync_accuracy.
        #[arg(long)]
        kind: String,
        /// Output directory; defaults to <run_dir>/plots.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    num_clients: Option<usize>,
    #[arg(long)]
    classes_per_task: Option<usize>,
    #[arg(long)]
    num_tasks: Option<usize>,
    /// Local iterations per round (T).
    #[arg(long, short = 'T')]
    local_iterations: Option<usize>,
    /// Communication rounds (R).
    #[arg(long, short = 'R')]
    rounds: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// mixture or tiny_digits.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    data_dim: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    /// Three comma-separated weights.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    consistency_weights: Option<Vec<f64>>,
    #[arg(long)]
    kd_temperature: Option<f64>,
    #[arg(long)]
    consolidation_iterations: Option<usize>,
    #[arg(long)]
    consolidation_batch_size: Option<usize>,
    #[arg(long)]
    consolidation_lr: Option<f64>,
    #[arg(long)]
    no_consolidation: bool,
    #[arg(long)]
    no_consistency: bool,
    #[arg(long)]
    no_replay: bool,
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path)?)
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => load_config(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $($target:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$field { c.$($target).+ = v.clone(); })*
            };
        }
        set!(
            method => method,
            num_clients => num_clients,
            classes_per_task => classes_per_task,
            num_tasks => num_tasks,
            local_iterations => local_iterations,
            rounds => rounds,
            seeds => seeds,
            output_dir => output_dir,
            eval_every => eval_every,
            num_classes => dataset.num_classes,
            samples_per_class => dataset.samples_per_class,
            data_dim => dataset.data_dim,
            batch_size => training.batch_size,
            lr => training.lr,
            mu => training.mu,
            kd_temperature => training.kd_temperature,
            consolidation_iterations => consolidation.iterations,
            consolidation_batch_size => consolidation.batch_size,
            consolidation_lr => consolidation.lr,
        );
        if let Some(n) = &self.name {
            c.name = Some(n.clone());
        }
        if let Some(kind) = &self.dataset {
            c.dataset.kind = match kind.as_str() {
                "mixture" => DatasetKind::Mixture,
                "tiny_digits" => DatasetKind::TinyDigits,
                other => bail!("unknown dataset {other:?}; expected mixture or tiny_digits"),
            };
        }
        if let Some(w) = &self.consistency_weights {
            c.training.consistency_weights = [w[0], w[1], w[2]];
        }
        c.ablation.no_consolidation |= self.no_consolidation;
        c.ablation.no_consistency |= self.no_consistency;
        c.ablation.no_replay |= self.no_replay;
        c.validate().context("invalid configuration")?;
        Ok(c)
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
            eprintln!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => {
            let cfg = config.resolve()?;
            let artifact = run(&cfg)?;
            let s = &artifact.summary;
            println!(
                "{}: final accuracy {:.4} ± {:.4} over seeds {:?}",
                s.label, s.mean_accuracy, s.std_accuracy, s.seeds
            );
            println!("artifacts in {}", artifact.dir.display());
        }
        Command::SweepT {
            config,
            t_values,
            fixed_rounds,
            out,
        } => {
            let cfg = config.resolve()?;
            let rows = sweep_local_iterations(&cfg, &t_values, !fixed_rounds)?;
            emit(&sweep_csv(&rows), out.as_deref())?;
        }
        Command::Compare {
            config,
            methods,
            ablation,
            with_configs,
            out,
        } => {
            let base = config.resolve()?;
            let mut configs = if ablation {
                ablation_set(&base)
            } else if methods.is_empty() {
                vec![base.clone()]
            } else {
                methods
                    .iter()
                    .map(|&m| {
                        let mut c = base.clone();
                        c.method = m;
                        c.name = None;
                        c
                    })
                    .collect()
            };
            for p in &with_configs {
                configs.push(load_config(p)?);
            }
            let rows = compare_methods(&configs)?;
            emit(&summary_csv(&rows), out.as_deref())?;
        }
        Command::Export { run_dir, kind, out } => {
            let kind: PlotKind = kind.parse()?;
            let out = out.unwrap_or_else(|| run_dir.join("plots"));
            for p in export_plot_data(&run_dir, kind, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
