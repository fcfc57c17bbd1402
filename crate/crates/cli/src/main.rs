use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tbigan::error::{Error, Result};
use tbigan::eval::{self, EvalReport};
use tbigan::experiment::{self, ExperimentConfig, Loaded};
use tbigan::trainer::ModelTag;

/// Semi-supervised Triplet BiGAN: train encoders, evaluate embeddings.
#[derive(Parser)]
#[command(name = "tbigan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes config.txt, metrics.jsonl and checkpoints/.
    Train(TrainArgs),
    /// k-NN accuracy and retrieval mAP of a checkpoint; writes report.json and report.txt.
    Eval(LoadArgs),
    /// Export embeddings as tab-separated text.
    Embed {
        #[command(flatten)]
        load: LoadArgs,
        /// labeled, validation or test
        #[arg(long, default_value = "test")]
        split: String,
        /// Output file [default: <out>/embeddings.tsv]
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Render a query/nearest-neighbors image grid as PNG.
    RetrieveGrid {
        #[command(flatten)]
        load: LoadArgs,
        #[arg(long, default_value_t = 5)]
        queries: usize,
        #[arg(long, default_value_t = eval::DEFAULT_GRID_TOP)]
        top: usize,
        #[arg(long = "grid-seed", default_value_t = 0)]
        grid_seed: u64,
        /// Output file [default: <out>/retrieval_grid.png]
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Print result tables from report.json files or run directories.
    Report {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Train and evaluate every (model, m, n) cell; completed cells are reused.
    Sweep {
        #[command(flatten)]
        common: ExperimentArgs,
        /// Comma-separated models
        #[arg(long, value_delimiter = ',', default_value = "triplet,bigan,triplet-bigan")]
        models: Vec<String>,
        /// Comma-separated feature sizes
        #[arg(long = "ms", value_delimiter = ',', required = true)]
        ms: Vec<usize>,
        /// Comma-separated labeled examples per class
        #[arg(long = "ns", value_delimiter = ',', required = true)]
        ns: Vec<usize>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ExperimentArgs,
    /// Continue from a checkpoint; architecture and training settings come from it.
    #[arg(long)]
    resume: Option<PathBuf>,
}

/// Flags shared by train and sweep. Each overrides the matching key of --config.
#[derive(Args)]
struct ExperimentArgs {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// cifar10, svhn or synthetic
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, env = "TBIGAN_DATA_ROOT")]
    data_root: Option<PathBuf>,
    /// triplet, bigan or triplet-bigan
    #[arg(long)]
    model: Option<String>,
    /// Feature vector size
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n_per_class: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hard_negatives: bool,
    /// tiny or standard
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Zero wall times in metrics.jsonl so reruns are byte-identical
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    k: Option<usize>,
    /// k-NN vote weight: inverse (1/d) or uniform
    #[arg(long = "knn-weight")]
    knn_weight: Option<String>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ExperimentArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut o: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        put("dataset", self.dataset.clone());
        put("data_root", self.data_root.as_ref().map(|p| p.display().to_string()));
        put("model.kind", self.model.clone());
        put("model.m", self.m.map(|v| v.to_string()));
        put("model.preset", self.preset.clone());
        put("model.width", self.width.map(|v| v.to_string()));
        put("train.n_per_class", self.n_per_class.map(|v| v.to_string()));
        put("train.lambda", self.lambda.map(|v| v.to_string()));
        put("train.warmup_epochs", self.warmup_epochs.map(|v| v.to_string()));
        put("train.epochs", self.epochs.map(|v| v.to_string()));
        put("train.batch_size", self.batch_size.map(|v| v.to_string()));
        put("train.lr", self.lr.map(|v| v.to_string()));
        put("train.seed", self.seed.map(|v| v.to_string()));
        put("train.hard_negatives", self.hard_negatives.then(|| "true".into()));
        put("train.checkpoint_every", self.checkpoint_every.map(|v| v.to_string()));
        put("train.deterministic", self.deterministic.then(|| "true".into()));
        put("eval.k", self.k.map(|v| v.to_string()));
        put("eval.knn_weight", self.knn_weight.clone());
        put("output_dir", self.out.as_ref().map(|p| p.display().to_string()));
        o
    }

    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        for (k, v) in self.overrides() {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct LoadArgs {
    /// Checkpoint file or run directory (uses checkpoints/latest.ckpt)
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = "TBIGAN_DATA_ROOT")]
    data_root: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    /// k-NN vote weight: inverse (1/d) or uniform
    #[arg(long = "knn-weight")]
    knn_weight: Option<String>,
    /// validation or test
    #[arg(long = "query-split")]
    query_split: Option<String>,
    /// Output directory [default: the run directory]
    #[arg(long)]
    out: Option<PathBuf>,
}

impl LoadArgs {
    fn checkpoint_path(&self) -> PathBuf {
        if self.checkpoint.is_dir() {
            experiment::latest_checkpoint(&self.checkpoint)
        } else {
            self.checkpoint.clone()
        }
    }

    fn load(&self) -> Result<Loaded> {
        let mut o = Vec::new();
        if let Some(p) = &self.data_root {
            o.push(("data_root".to_string(), p.display().to_string()));
        }
        if let Some(k) = self.k {
            o.push(("eval.k".to_string(), k.to_string()));
        }
        if let Some(w) = &self.knn_weight {
            o.push(("eval.knn_weight".to_string(), w.clone()));
        }
        if let Some(q) = &self.query_split {
            o.push(("eval.queries".to_string(), q.clone()));
        }
        experiment::load_run(&self.checkpoint_path(), &o)
    }

    fn out_dir(&self, loaded: &Loaded) -> PathBuf {
        self.out.clone().unwrap_or_else(|| loaded.config.output_dir.clone())
    }
}

fn print_report(r: &EvalReport) {
    println!(
        "{} m={} n={}: accuracy {:.4}, mAP {:.4} ({} queries, {} database items)",
        r.model_tag, r.m, r.n_per_class, r.accuracy, r.map, r.query_count, r.database_count
    );
}

fn read_reports(paths: &[PathBuf]) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    for p in paths {
        let file = if p.is_dir() { p.join(experiment::REPORT_JSON) } else { p.clone() };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(format!("read {}", file.display()), e))?;
        out.push(EvalReport::from_json(&text)?);
    }
    Ok(out)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let trainer = match &args.resume {
                Some(ckpt) => {
                    if args.common.config.is_some() {
                        return Err(Error::Usage("--config cannot be combined with --resume".into()));
                    }
                    experiment::run_resume(ckpt, &args.common.overrides())?
                }
                None => experiment::run_train(&args.common.config()?)?,
            };
            if let Some(last) = trainer.state.history.last() {
                println!(
                    "trained {} epochs ({} steps); final triplet accuracy {:.4}",
                    trainer.state.epoch, trainer.state.global_step, last.triplet_accuracy
                );
            }
        }
        Command::Eval(load) => {
            let loaded = load.load()?;
            let report = experiment::run_eval(&loaded, &load.out_dir(&loaded))?;
            print_report(&report);
        }
        Command::Embed { load, split, file } => {
            let loaded = load.load()?;
            let path = file.unwrap_or_else(|| load.out_dir(&loaded).join(experiment::EMBEDDINGS_FILE));
            ensure_parent(&path)?;
            let n = experiment::run_embed(&loaded, &split, &path)?;
            println!("wrote {n} embeddings to {}", path.display());
        }
        Command::RetrieveGrid {
            load,
            queries,
            top,
            grid_seed,
            file,
        } => {
            let loaded = load.load()?;
            let path = file.unwrap_or_else(|| load.out_dir(&loaded).join(experiment::GRID_FILE));
            ensure_parent(&path)?;
            experiment::run_grid(&loaded, queries, top, grid_seed, &path)?;
            println!("wrote {}", path.display());
        }
        Command::Report { paths } => {
            print!("{}", eval::render_report_tables(&read_reports(&paths)?));
        }
        Command::Sweep { common, models, ms, ns } => {
            let base = common.config()?;
            let models = models.iter().map(|m| m.parse()).collect::<Result<Vec<ModelTag>>>()?;
            let cells = experiment::sweep_grid(&models, &ms, &ns);
            let outcome = experiment::run_sweep(&base, &cells)?;
            print!("{}", outcome.tables);
            if !outcome.failed.is_empty() {
                return Err(Error::Data(format!("{} sweep cells failed", outcome.failed.len())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
