use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use freshnets::data::load_mnist_dir;
use freshnets::training::{evaluate, fit, TrainConfig};
use freshnets::{model_file, selftest, visualize, CompressionMethod, Error, NetworkSpec};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "freshnets", version, about = "Train and inspect frequency-hashed CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network on an MNIST-format IDX directory.
    Train(TrainArgs),
    /// Report test error and loss of a saved model as JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
    },
    /// Export the filters of one conv layer as PGM images plus a JSON sidecar.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the built-in consistency checks.
    Selftest,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// JSON run config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: PathBuf,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Metric log (JSON lines). Defaults to `<out>.metrics.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Master seed for hashing, initialisation and training order.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    method: Option<CompressionMethod>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
}

/// Top-level config file: the architecture plus every [`TrainConfig`] field.
#[derive(Serialize, Deserialize)]
struct RunConfig {
    #[serde(default = "NetworkSpec::desk_mnist")]
    network: NetworkSpec,
    /// Lift conv layers too small for one bucket per frequency band.
    #[serde(default)]
    band_floor: bool,
    #[serde(flatten)]
    train: TrainConfig,
}

fn load_config(path: Option<&Path>) -> freshnets::Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
        None => "{}".to_string(),
    };
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid config: {e}")))
}

fn cmd_train(args: TrainArgs) -> freshnets::Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    let t = &mut cfg.train;
    if let Some(seed) = args.seed {
        t.seed = seed;
        t.compression.seed = seed;
    }
    t.deterministic |= args.deterministic;
    if let Some(m) = args.method {
        t.compression.method = m;
    }
    if let Some(r) = args.rate {
        t.compression.rate = r;
    }
    if let Some(a) = args.alpha {
        t.compression.alpha = a;
    }
    if let Some(b) = args.beta {
        t.compression.beta = b;
    }
    t.validate()?;
    let spec = if cfg.band_floor {
        cfg.network.with_band_floor(t.compression.rate)
    } else {
        cfg.network.clone()
    };
    spec.validate()?;
    let (pool, test) = load_mnist_dir(&args.data_dir, spec.num_classes())?;

    let log_path = args.log.unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".metrics.jsonl");
        PathBuf::from(p)
    });
    let mut log = BufWriter::new(File::create(&log_path)?);
    let mut log_err = None;
    let trained = fit(&spec, &pool, &test, t, |rec| {
        eprintln!(
            "epoch {:>3} {:<5} loss {:.4} error {:.4}",
            rec.epoch, rec.split, rec.loss, rec.error
        );
        let line = serde_json::to_string(rec).expect("record serialises");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    log.flush()?;
    model_file::save(&args.out, &trained.network, &trained.data.normalizer)?;
    let (test_error, test_loss) = evaluate(&trained.network, &trained.data.test)?;
    eprintln!(
        "best epoch {} (val error {:.4}); test error {test_error:.4}, loss {test_loss:.4}",
        trained.report.best_epoch, trained.report.best_val_error
    );
    eprintln!("wrote {} and {}", args.out.display(), log_path.display());
    Ok(())
}

fn cmd_eval(model: &Path, data_dir: &Path) -> freshnets::Result<()> {
    let (network, normalizer) = model_file::load(model)?;
    let (_, test) = load_mnist_dir(data_dir, network.spec().num_classes())?;
    let test = freshnets::Batch {
        images: normalizer.apply(&test.images),
        labels: test.labels,
    };
    let (error, loss) = evaluate(&network, &test)?;
    let out = serde_json::json!({
        "test_error": error,
        "test_loss": loss,
        "samples": test.len(),
    });
    println!("{out}");
    Ok(())
}

fn cmd_inspect(model: &Path, layer: usize, out_dir: &Path) -> freshnets::Result<()> {
    let (network, _) = model_file::load(model)?;
    let report = visualize::export_layer(&network, layer, out_dir)?;
    println!(
        "{}",
        serde_json::json!({
            "layer": report.layer,
            "method": report.method,
            "filters": report.filters.len(),
            "mean_smoothness": report.mean_smoothness,
            "out_dir": out_dir.display().to_string(),
        })
    );
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Data(_) | Error::Format { .. } | Error::Io(_) | Error::Json(_) => 2,
        Error::Diverged(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval { model, data_dir } => cmd_eval(&model, &data_dir),
        Command::Inspect { model, layer, out_dir } => cmd_inspect(&model, layer, &out_dir),
        Command::Selftest => {
            let checks = selftest::run();
            print!("{}", selftest::render(&checks));
            if checks.iter().all(|c| c.passed) {
                Ok(())
            } else {
                return ExitCode::from(1);
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
