use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use drloc::config::ExperimentConfig;
use drloc::data::{self, DatasetKind};
use drloc::drloc::Variant;
use drloc::sweep::{run_sweep, SweepAxis, TABLE_FILE};
use drloc::trainer::run_experiment;
use drloc::{check, plot, Error, Result};

#[derive(Parser)]
#[command(
    name = "drloc",
    version,
    about = "Dense relative localization on a toy vision transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed.
    Train(TrainArgs),
    /// Sweep one axis over a list of values, every seed per value.
    Sweep {
        #[command(flatten)]
        common: TrainArgs,
        /// m, lambda, variant or grid_side
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Write epoch,value CSV curves for finished runs or sweeps.
    PlotData {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
    /// Run the gradient, oracle and sampler self-checks.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// TOML experiment config; defaults apply to anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Total epochs; the warmup keeps its share of the schedule.
    #[arg(long)]
    epochs: Option<usize>,
    /// synthetic, cifar10 or cifar100
    #[arg(long)]
    dataset: Option<DatasetKind>,
    /// Directory with the CIFAR batch files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Remove the auxiliary head entirely.
    #[arg(long)]
    no_aux: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Write null sec_per_batch so repeated runs give byte-identical files.
    #[arg(long)]
    no_timing: bool,
    /// Also write per-epoch backbone gradient norms of each loss term.
    #[arg(long)]
    grad_norms: bool,
}

impl TrainArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seeds = vec![s];
        }
        if let Some(v) = self.variant {
            c.loss.variant = v;
        }
        if let Some(m) = self.m {
            c.loss.m = m;
        }
        if let Some(l) = self.lambda {
            c.loss.lambda = l;
        }
        if self.grad_norms {
            c.record_grad_norms = true;
        }
        if self.no_aux {
            c.loss.enabled = false;
        }
        if let Some(e) = self.epochs {
            c.optim.warmup_epochs *= e as f64 / c.optim.total_epochs as f64;
            c.optim.total_epochs = e;
        }
        if let Some(k) = self.dataset {
            c.dataset.kind = k;
        }
        if let Some(p) = &self.data_dir {
            c.dataset.path = Some(p.clone());
        }
        if let Some(o) = &self.out {
            c.output_dir = o.clone();
        }
        if self.jobs == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        c.validate()?;
        Ok(c)
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn train(args: &TrainArgs) -> Result<()> {
    let c = args.config()?;
    let data = data::load(&c.dataset, c.model.image_side, c.model.classes)?;
    for &seed in &c.seeds {
        let dir = c.output_dir.join(format!("seed_{seed}"));
        let spec = c.run_spec(seed, args.jobs, !args.no_timing);
        let outcome = run_experiment(&spec, &data, Some(&dir))?;
        let last = outcome.run.final_record();
        println!(
            "seed {seed}: test_acc {} pretext_l1 {} (epoch 0: {}) -> {}",
            fmt_opt(last.and_then(|r| r.test_acc)),
            fmt_opt(last.and_then(|r| r.pretext_l1)),
            fmt_opt(outcome.run.initial.pretext_l1),
            dir.display()
        );
    }
    Ok(())
}

fn sweep(args: &TrainArgs, axis: SweepAxis, values: &[String]) -> Result<()> {
    let c = args.config()?;
    let (rows, cells) = run_sweep(&c, axis, values, &c.output_dir, args.jobs, !args.no_timing)?;
    for cell in cells.iter().filter(|c| c.result.is_err()) {
        eprintln!(
            "cell {}={} seed {} failed: {}",
            axis.name(),
            cell.value,
            cell.seed,
            cell.result.as_ref().unwrap_err()
        );
    }
    for r in &rows {
        println!(
            "{}={}: top1 {} +- {} over {} runs ({} failed)",
            axis.name(),
            r.value,
            fmt_opt(r.mean.map(|v| 100.0 * v)),
            fmt_opt(r.std.map(|v| 100.0 * v)),
            r.runs,
            r.failed
        );
    }
    println!("table: {}", c.output_dir.join(TABLE_FILE).display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(args) => train(&args).map(|_| true),
        Command::Sweep { common, axis, values } => sweep(&common, axis, &values).map(|_| true),
        Command::PlotData { runs, out } => {
            let files = plot::emit_plot_data(&runs, &out)?;
            println!("wrote {} curve files to {}", files.len(), out.display());
            Ok(true)
        }
        Command::Check { seed } => {
            let results = check::run_all(seed)?;
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} checks, {failed} failed", results.len());
            Ok(failed == 0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
