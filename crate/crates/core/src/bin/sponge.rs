use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sponge_core::config::Options;
use sponge_core::energy::energy_report_dataset;
use sponge_core::streaming::simulate_streaming;
use sponge_core::sweep::run_sweep;
use sponge_core::{checkpoint, report, trainer, Error, Model, Result};

#[derive(Parser)]
#[command(name = "sponge", version, about = "Sponge poisoning experiments on small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write history.csv, model.ckpt and energy.json
    Train(Invocation),
    /// Train one model per grid point and write sweep.csv and sweep.json
    Sweep(Invocation),
    /// Measure the energy ratio of a checkpoint on the validation set
    Energy(Invocation),
    /// Simulate battery drain of a checkpoint under continuous inference
    Stream(Invocation),
}

#[derive(Args)]
struct Invocation {
    /// TOML file with option values; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    options: Options,
}

impl Invocation {
    fn resolve(self) -> Result<Options> {
        match self.config {
            Some(path) => Ok(Options::load(path)?.overlay(self.options)),
            None => Ok(self.options),
        }
    }
}

fn required_model(opts: &Options) -> Result<Model> {
    let path = opts
        .model
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--model <checkpoint> is required".into()))?;
    checkpoint::load(path)
}

fn train(opts: Options) -> Result<ExitCode> {
    let cfg = opts.train_config()?;
    let (trainset, valset) = opts.datasets()?;
    let model = match &opts.model {
        Some(path) => checkpoint::load(path)?,
        None => opts.model_spec().build(&trainset)?,
    };
    let (model, history) = trainer::train(model, &trainset, &valset, &cfg)?;
    let out = opts.out_dir();
    report::emit_history(&history, &out)?;
    checkpoint::save(&model, out.join("model.ckpt"))?;
    let energy = energy_report_dataset(&model, &valset, opts.skip_rule())?;
    report::emit_energy(&energy, &out)?;
    if let Some(last) = history.last() {
        println!(
            "epoch {}: task_loss {:.4}, val_accuracy {:.4}, mean_density {:.4}, energy_ratio {:.4}",
            last.epoch, last.task_loss, last.val_accuracy, last.mean_density, energy.energy_ratio
        );
    }
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn sweep(opts: Options) -> Result<ExitCode> {
    let spec = opts.sweep_spec()?;
    let (trainset, valset) = opts.datasets()?;
    let result = run_sweep(&spec, &trainset, &valset)?;
    let out = opts.out_dir();
    report::emit_sweep(&result, &out)?;
    println!("{:>12} {:>8} {:>8} {:>8}  note", spec.axis.name(), "ratio", "acc", "density");
    for row in &result.rows {
        let note = match (&row.error, row.baseline) {
            (Some(e), _) => format!("failed: {e}"),
            (None, true) => "baseline".to_string(),
            (None, false) => String::new(),
        };
        println!(
            "{:>12e} {:>8} {:>8} {:>8}  {note}",
            row.axis_value,
            opt(row.energy_ratio),
            opt(row.val_accuracy),
            opt(row.mean_density)
        );
    }
    println!("wrote {}", out.display());
    let failures = result.failures();
    if failures > 0 && !opts.allow_partial {
        eprintln!("{failures} grid point(s) failed; pass --allow-partial to accept partial results");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn energy(opts: Options) -> Result<ExitCode> {
    let model = required_model(&opts)?;
    let (_, valset) = opts.datasets()?;
    let energy = energy_report_dataset(&model, &valset, opts.skip_rule())?;
    let accuracy = trainer::validate(&model, &valset)?;
    let path = report::emit_energy(&energy, &opts.out_dir())?;
    println!(
        "energy_ratio {:.4} ({} of {} MACs), val_accuracy {:.4}",
        energy.energy_ratio, energy.total_consumed, energy.total_worst, accuracy
    );
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn stream(opts: Options) -> Result<ExitCode> {
    let model = required_model(&opts)?;
    let (_, valset) = opts.datasets()?;
    let discharge = simulate_streaming(&model, &valset, &opts.battery(), opts.skip_rule(), &opts.streaming())?;
    let path = report::emit_discharge(&discharge, &opts.out_dir())?;
    if let Some(last) = discharge.rows.last() {
        println!(
            "{} epochs: cumulative drain {:.3}%, {:.3}%/h",
            last.epoch, last.cumulative_percent, last.discharge_rate_per_hour
        );
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(inv) => inv.resolve().and_then(train),
        Command::Sweep(inv) => inv.resolve().and_then(sweep),
        Command::Energy(inv) => inv.resolve().and_then(energy),
        Command::Stream(inv) => inv.resolve().and_then(stream),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
