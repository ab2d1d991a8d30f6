mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aesm2::data::{write_csv, Dataset};
use aesm2::eval::{evaluate, kl_curves, metrics_table, utilization};
use aesm2::model::{write_atomic, Checkpoint, Layout, ModelKind};
use aesm2::train::{init_model, train, train_transfer, EpochRecord, JsonlStepLog, StepRecord, TrainObserver};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "aesm2", version, about = "Multi-scenario, multi-task ranking with automatic expert selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_kind)]
    model: Option<ModelKind>,
    /// Drop the auxiliary selection losses.
    #[arg(long)]
    no_aux: bool,
    /// Disable gate noise during training.
    #[arg(long)]
    no_noise: bool,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/val/test CSVs plus the spec and schema.
    GenData(Common),
    /// Train a model and save the best checkpoint.
    Train(Common),
    /// Score a trained checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Also train one model per scenario and emit the cross-scenario AUC matrix.
        #[arg(long)]
        transfer: bool,
    },
    /// Emit KL curves and expert utilization for a finished run.
    Analyze(Common),
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: aesm2::Error| e.to_string())
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(
            self.config.as_deref(),
            &Overrides {
                seed: self.seed,
                model: self.model,
                no_aux: self.no_aux,
                no_noise: self.no_noise,
                out: self.out.clone(),
            },
        )
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(c) => c.load().and_then(|cfg| gen_data(&cfg)),
        Command::Train(c) => c.load().and_then(|cfg| train_cmd(&cfg)),
        Command::Eval { common, transfer } => common.load().and_then(|cfg| eval_cmd(&cfg, *transfer)),
        Command::Analyze(c) => c.load().and_then(|cfg| analyze(&cfg)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_atomic(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn csv_bytes(data: &Dataset) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_csv(data, &mut buf)?;
    Ok(buf)
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let spec = &cfg.data.synthetic;
    spec.validate()?;
    let splits = aesm2::data::generate_splits(spec, cfg.seed)?;
    let dir = cfg.out.join("data");
    for (name, data) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        write_file(&dir.join(format!("{name}.csv")), &csv_bytes(data)?)?;
    }
    write_file(&dir.join("spec.json"), serde_json::to_string_pretty(spec)?.as_bytes())?;
    write_file(&dir.join("schema.json"), serde_json::to_string_pretty(&spec.schema())?.as_bytes())?;

    println!("scenario,share,ctr,cvr");
    let counts = splits.train.label_counts();
    for (s, (n, clicks, convs)) in counts.iter().enumerate() {
        println!(
            "{},{:.4},{:.4},{:.4}",
            splits.train.schema.scenario_name(s),
            *n as f64 / splits.train.len() as f64,
            *clicks as f64 / (*n).max(1) as f64,
            *convs as f64 / (*clicks).max(1) as f64
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

/// Collects epoch summaries and streams the step log.
struct RunLog<W: Write> {
    steps: JsonlStepLog<W>,
    epochs: Vec<EpochRecord>,
}

impl<W: Write> TrainObserver for RunLog<W> {
    fn on_step(&mut self, record: &StepRecord) -> aesm2::Result<()> {
        self.steps.on_step(record)
    }

    fn on_epoch(&mut self, record: &EpochRecord) -> aesm2::Result<()> {
        let auc = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        eprintln!(
            "epoch {:>3}  loss {:.5}  kl_sp {:.4}  kl_sh {:.4}  val ctr {}  ctcvr {}{}",
            record.epoch,
            record.mean_loss,
            record.mean_kl_specific,
            record.mean_kl_shared,
            auc(record.val_ctr_auc),
            auc(record.val_ctcvr_auc),
            if record.improved { "  *" } else { "" }
        );
        self.epochs.push(record.clone());
        Ok(())
    }
}

fn epochs_csv(epochs: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("epoch,steps,mean_loss,mean_kl_specific,mean_kl_shared,val_ctr_auc,val_ctcvr_auc,improved\n");
    for e in epochs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            e.epoch,
            e.steps,
            e.mean_loss,
            e.mean_kl_specific,
            e.mean_kl_shared,
            opt(e.val_ctr_auc),
            opt(e.val_ctcvr_auc),
            e.improved
        ));
    }
    out
}

fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let splits = cfg.load_data()?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write_file(&cfg.out.join("config_echo.toml"), cfg.to_toml()?.as_bytes())?;

    let model = init_model(cfg.model.clone(), Layout::from_schema(&splits.train.schema), cfg.seed)?;
    eprintln!(
        "training {} ({} parameters) on {} instances",
        model.kind(),
        model.parameter_count(),
        splits.train.len()
    );
    let steps_tmp = cfg.out.join(".steps.log.tmp");
    let file = fs::File::create(&steps_tmp).with_context(|| format!("creating {}", steps_tmp.display()))?;
    let mut log = RunLog {
        steps: JsonlStepLog {
            out: std::io::BufWriter::new(file),
        },
        epochs: Vec::new(),
    };
    let val = (!splits.val.is_empty()).then_some(&splits.val);
    let outcome = train(model, &splits.train, val, &cfg.training, &mut log)?;
    log.steps.out.flush()?;
    drop(log.steps);
    fs::rename(&steps_tmp, cfg.out.join("steps.log"))?;

    write_file(&cfg.out.join("metrics.csv"), epochs_csv(&log.epochs).as_bytes())?;
    Checkpoint::from_model(&outcome.model).save(&cfg.out.join("checkpoint.json"))?;
    match outcome.best_epoch {
        Some(e) => println!("best epoch {e}, validation ctr auc {:.6}", outcome.best_val_auc().unwrap_or(f64::NAN)),
        None => println!("no validation data; kept final weights"),
    }
    println!("wrote {}", cfg.out.display());
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig, layout: &Layout) -> Result<aesm2::model::Model> {
    let path = cfg.out.join("checkpoint.json");
    if !path.exists() {
        bail!("no checkpoint at {}; run `aesm2 train` with the same --out first", path.display());
    }
    let checkpoint = Checkpoint::load(&path)?;
    Ok(checkpoint.into_model_checked(&cfg.model, layout)?)
}

fn eval_cmd(cfg: &RunConfig, transfer: bool) -> Result<()> {
    let splits = cfg.load_data()?;
    let layout = Layout::from_schema(&splits.test.schema);
    let model = load_checkpoint(cfg, &layout)?;
    if splits.test.is_empty() {
        bail!("test split is empty");
    }
    let report = evaluate(&model, &splits.test)?;
    let dir = cfg.out.join("eval");
    write_file(&dir.join("report.json"), report.to_json()?.as_bytes())?;
    let table = metrics_table(&[(model.kind().to_string(), &report)])?;
    write_file(&dir.join("metrics_table.csv"), table.as_bytes())?;
    print!("{table}");

    if transfer {
        let matrix = train_transfer(&cfg.model, &splits.train, Some(&splits.val), &splits.test, &cfg.training)?;
        write_file(&dir.join("transfer.csv"), matrix.to_csv().as_bytes())?;
        write_file(&dir.join("transfer.json"), serde_json::to_string_pretty(&matrix)?.as_bytes())?;
        print!("{}", matrix.to_csv());
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn analyze(cfg: &RunConfig) -> Result<()> {
    let log_path = cfg.out.join("steps.log");
    let log = fs::read_to_string(&log_path)
        .with_context(|| format!("reading {}; run `aesm2 train` with the same --out first", log_path.display()))?;
    let curves = kl_curves(&log)?;
    let dir = cfg.out.join("analysis");
    write_file(&dir.join("kl_curves.csv"), curves.to_csv().as_bytes())?;

    let splits = cfg.load_data()?;
    if splits.test.is_empty() {
        bail!("evaluation set is empty; utilization needs at least one instance");
    }
    let model = load_checkpoint(cfg, &Layout::from_schema(&splits.test.schema))?;
    if model.kind() == ModelKind::Aesm2 || model.kind() == ModelKind::StaticSplit {
        let report = utilization(&model, &splits.test)?;
        write_file(&dir.join("utilization.csv"), report.to_csv().as_bytes())?;
        write_file(&dir.join("utilization.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    } else {
        eprintln!("{} makes no expert selections; skipping utilization", model.kind());
    }
    println!("wrote {}", dir.display());
    Ok(())
}
