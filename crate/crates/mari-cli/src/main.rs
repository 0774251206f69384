use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mari::gate::QuantileConvention;
use mari::harness::{LabelMode, PipelineConfig, Run};
use mari::{MariError, Result};

#[derive(Parser, Debug)]
#[command(
    name = "mari",
    version,
    about = "Routed low-rank editing with an energy gate, on a synthetic benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate the dataset splits and start a run directory.
    GenData,
    /// Pretrain the backbone.
    Pretrain,
    /// Train the single adapter, the adapter bank and the steering baseline.
    TrainAdapters,
    /// Fit the PCA basis and train the probe.
    TrainProbe,
    /// Calibrate the gate threshold on the control split.
    Calibrate,
    /// Evaluate every variant on the test splits.
    Eval,
    /// Bound checks, routing risk and representation analyses.
    Diagnose,
    /// Write report.md from the evaluation metrics.
    Report,
    /// All of the above, in order.
    Run,
}

#[derive(Args, Debug, Default)]
struct Flags {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON pipeline configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    #[arg(long, global = true)]
    rho: Option<f64>,
    #[arg(long, global = true)]
    k_adapters: Option<usize>,
    #[arg(long, global = true)]
    rank: Option<usize>,
    #[arg(long, global = true)]
    probe_rank: Option<usize>,
    #[arg(long, global = true)]
    pca_rank: Option<usize>,
    #[arg(long, global = true)]
    alpha_probe: Option<f64>,
    #[arg(long, global = true)]
    alpha_full: Option<f64>,
    #[arg(long, global = true, value_enum)]
    quantile_convention: Option<Convention>,
    #[arg(long, global = true, value_enum)]
    label_mode: Option<Labels>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Convention {
    Rho,
    OneMinusRho,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Labels {
    Regime,
    Outcome,
}

impl Flags {
    fn touches_config(&self) -> bool {
        self.config.is_some()
            || self.rho.is_some()
            || self.k_adapters.is_some()
            || self.rank.is_some()
            || self.probe_rank.is_some()
            || self.pca_rank.is_some()
            || self.alpha_probe.is_some()
            || self.alpha_full.is_some()
            || self.quantile_convention.is_some()
            || self.label_mode.is_some()
    }

    fn apply(&self, mut c: PipelineConfig) -> Result<PipelineConfig> {
        if let Some(p) = &self.config {
            if !p.exists() {
                return Err(MariError::MissingArtifact(p.display().to_string()));
            }
            c = serde_json::from_str(&std::fs::read_to_string(p)?)?;
        }
        if let Some(v) = self.rho {
            c.gate.rho = v;
        }
        if let Some(v) = self.k_adapters {
            c.k_adapters = v;
        }
        if let Some(v) = self.rank {
            c.rank = v;
        }
        if let Some(v) = self.probe_rank {
            c.probe_rank = v;
        }
        if let Some(v) = self.pca_rank {
            c.gate.pca_rank = v;
        }
        if let Some(v) = self.alpha_probe {
            c.gate.alpha_probe = v;
        }
        if let Some(v) = self.alpha_full {
            c.gate.alpha_full = v;
        }
        if let Some(v) = self.quantile_convention {
            c.gate.convention = match v {
                Convention::Rho => QuantileConvention::Rho,
                Convention::OneMinusRho => QuantileConvention::OneMinusRho,
            };
        }
        if let Some(v) = self.label_mode {
            c.label_mode = match v {
                Labels::Regime => LabelMode::Regime,
                Labels::Outcome => LabelMode::Outcome,
            };
        }
        Ok(c)
    }
}

fn json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    let f = &cli.flags;
    let mut run = if matches!(cli.command, Command::GenData | Command::Run) {
        Run::create(
            &f.run_dir,
            f.seed.unwrap_or(0),
            f.apply(PipelineConfig::default())?,
        )?
    } else {
        let mut run = Run::open(&f.run_dir)?;
        if let Some(s) = f.seed.filter(|&s| s != run.manifest.seed) {
            return Err(MariError::Invalid(format!(
                "--seed {s} differs from the run's seed {}",
                run.manifest.seed
            )));
        }
        if f.touches_config() {
            let c = f.apply(run.config().clone())?;
            run.set_config(c)?;
        }
        run
    };
    match cli.command {
        Command::GenData => {
            let s = run.gen_data()?;
            let counts: Vec<(&str, usize)> = mari::harness::DatasetSplits::NAMES
                .iter()
                .map(|n| (*n, s.get(n).map_or(0, Vec::len)))
                .collect();
            json(&counts)
        }
        Command::Pretrain => json(&run.pretrain()?),
        Command::TrainAdapters => {
            let (l1, l) = run.train_adapters()?;
            json(&serde_json::json!({
                "single_final_loss": l1.final_loss(50),
                "bank_final_loss": l.final_loss(50),
                "bank_min_usage": l.min_usage(50),
            }))
        }
        Command::TrainProbe => {
            let l = run.train_probe()?;
            json(&serde_json::json!({
                "task_loss": l.task_loss.last(),
                "off_fraction_initial": l.off_fraction_initial,
                "off_fraction_final": l.off_fraction_final,
            }))
        }
        Command::Calibrate => json(&run.calibrate()?),
        Command::Eval => json(&run.eval()?.metrics),
        Command::Diagnose => json(&run.diagnose()?),
        Command::Report => {
            print!("{}", run.report()?);
            Ok(())
        }
        Command::Run => {
            run.run_all()?;
            print!("{}", std::fs::read_to_string(run.dir.join("report.md"))?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!(
                "USAGE_ERROR: {}",
                msg.lines()
                    .next()
                    .unwrap_or("bad arguments")
                    .trim_start_matches("error: ")
            );
            return ExitCode::from(2);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
