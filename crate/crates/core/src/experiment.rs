//! Experiment configuration (flat `key = value` text with dotted sections)
//! and the train / eval / embed / grid / sweep runners behind the CLI.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datasets::{load_dataset, resolve_data_root, select_labeled_subset, DatasetId, DatasetSplit, LabeledIndex, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::{self, EmbeddingSource, EvalReport, KnnWeight, QuerySplit};
use crate::models::{ArchitectureConfig, Preset};
use crate::trainer::{ModelTag, RunOutput, TrainConfig, Trainer};

pub const CONFIG_FILE: &str = "config.txt";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";
pub const GRID_FILE: &str = "retrieval_grid.png";
pub const LOCK_FILE: &str = ".lock";

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetId,
    /// `None` falls back to `TBIGAN_DATA_ROOT`, then `./data`.
    pub data_root: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub preset: Option<Preset>,
    pub width: Option<usize>,
    pub train: TrainConfig,
    /// `None` resolves from the model: 0 for `bigan`, 1 otherwise.
    pub lambda: Option<f64>,
    pub k: usize,
    pub knn_weight: KnnWeight,
    pub queries: QuerySplit,
    pub synthetic: SyntheticConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetId::Synthetic,
            data_root: None,
            output_dir: PathBuf::from("runs/default"),
            preset: None,
            width: None,
            train: TrainConfig::default(),
            lambda: None,
            k: eval::DEFAULT_K,
            knn_weight: KnnWeight::Inverse,
            queries: QuerySplit::Test,
            synthetic: SyntheticConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Usage(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Usage(format!("{key}: expected true or false, got `{value}`"))),
    }
}

impl ExperimentConfig {
    /// Parses config text over the defaults. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("config line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read config {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "dataset" => self.dataset = value.parse()?,
            "data_root" => self.data_root = Some(PathBuf::from(value)),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "model.kind" => t.model = value.parse()?,
            "model.m" => t.latent_dim = parse(key, value)?,
            "model.preset" => self.preset = Some(value.parse()?),
            "model.width" => self.width = Some(parse(key, value)?),
            "train.lambda" => self.lambda = Some(parse(key, value)?),
            "train.warmup_epochs" => t.warmup_epochs = parse(key, value)?,
            "train.epochs" => t.total_epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lr" => t.learning_rate = parse(key, value)?,
            "train.adam_beta1" => t.adam_beta1 = parse(key, value)?,
            "train.adam_beta2" => t.adam_beta2 = parse(key, value)?,
            "train.adam_eps" => t.adam_eps = parse(key, value)?,
            "train.n_per_class" => t.n_per_class = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.hard_negatives" => t.hard_negatives = parse_bool(key, value)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "train.eval_triplets" => t.eval_triplets = parse(key, value)?,
            "train.deterministic" => t.deterministic = parse_bool(key, value)?,
            "eval.k" => self.k = parse(key, value)?,
            "eval.knn_weight" => self.knn_weight = value.parse()?,
            "eval.queries" => self.queries = value.parse()?,
            "synthetic.classes" => self.synthetic.class_count = parse(key, value)?,
            "synthetic.per_class" => self.synthetic.per_class = parse(key, value)?,
            "synthetic.image_size" => self.synthetic.image_size = parse(key, value)?,
            "synthetic.seed" => self.synthetic.seed = parse(key, value)?,
            "synthetic.holdout_per_class" => self.synthetic.holdout_per_class = Some(parse(key, value)?),
            other => return Err(Error::Usage(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    fn image_size(&self) -> usize {
        match self.dataset {
            DatasetId::Synthetic => self.synthetic.image_size,
            DatasetId::Cifar10 | DatasetId::Svhn => 32,
        }
    }

    /// Fills every defaulted field and checks cross-field rules.
    pub fn resolve(&self) -> Result<Self> {
        let mut r = self.clone();
        let lambda = match (r.train.model, r.lambda) {
            (ModelTag::Bigan, Some(l)) if l != 0.0 => {
                return Err(Error::Usage(format!(
                    "lambda: the bigan model trains without the triplet term, got lambda = {l}"
                )))
            }
            (ModelTag::Bigan, _) => 0.0,
            (_, Some(l)) => l,
            (_, None) => 1.0,
        };
        r.lambda = Some(lambda);
        r.train.lambda = lambda;
        let size = r.image_size();
        let preset = match r.preset {
            Some(p) => p,
            None => Preset::for_image_size(size)
                .ok_or_else(|| Error::Usage(format!("model.preset: no preset for {size}x{size} images")))?,
        };
        if preset.image_size() != size {
            return Err(Error::Usage(format!(
                "model.preset: {preset} expects {0}x{0} images, the dataset has {size}x{size}",
                preset.image_size()
            )));
        }
        r.preset = Some(preset);
        r.width = Some(r.width.unwrap_or(preset.default_width()));
        r.synthetic.holdout_per_class = Some(r.synthetic.holdout());
        if r.data_root.is_none() && r.dataset != DatasetId::Synthetic {
            r.data_root = Some(resolve_data_root(None));
        }
        if r.k == 0 {
            return Err(Error::Usage("eval.k: must be positive".into()));
        }
        r.train.validate()?;
        Ok(r)
    }

    pub fn architecture(&self) -> Result<ArchitectureConfig> {
        let r = self.resolve()?;
        let preset = r.preset.expect("resolved");
        Ok(ArchitectureConfig::preset(
            preset,
            r.width.expect("resolved"),
            r.train.latent_dim,
            self.channels(),
        ))
    }

    fn channels(&self) -> usize {
        3
    }

    /// Every key, one per line, in a fixed order. Parsing the output gives
    /// back the same resolved config.
    pub fn to_text(&self) -> Result<String> {
        let r = self.resolve()?;
        let t = &r.train;
        let mut lines = vec![
            format!("dataset = {}", r.dataset),
            format!("output_dir = {}", r.output_dir.display()),
        ];
        if let Some(root) = &r.data_root {
            lines.push(format!("data_root = {}", root.display()));
        }
        lines.extend([
            format!("model.kind = {}", t.model),
            format!("model.m = {}", t.latent_dim),
            format!("model.preset = {}", r.preset.expect("resolved")),
            format!("model.width = {}", r.width.expect("resolved")),
            format!("train.lambda = {:?}", t.lambda),
            format!("train.warmup_epochs = {}", t.warmup_epochs),
            format!("train.epochs = {}", t.total_epochs),
            format!("train.batch_size = {}", t.batch_size),
            format!("train.lr = {:?}", t.learning_rate),
            format!("train.adam_beta1 = {:?}", t.adam_beta1),
            format!("train.adam_beta2 = {:?}", t.adam_beta2),
            format!("train.adam_eps = {:?}", t.adam_eps),
            format!("train.n_per_class = {}", t.n_per_class),
            format!("train.seed = {}", t.seed),
            format!("train.hard_negatives = {}", t.hard_negatives),
            format!("train.checkpoint_every = {}", t.checkpoint_every),
            format!("train.eval_triplets = {}", t.eval_triplets),
            format!("train.deterministic = {}", t.deterministic),
            format!("eval.k = {}", r.k),
            format!("eval.knn_weight = {}", r.knn_weight),
            format!("eval.queries = {}", r.queries),
            format!("synthetic.classes = {}", r.synthetic.class_count),
            format!("synthetic.per_class = {}", r.synthetic.per_class),
            format!("synthetic.image_size = {}", r.synthetic.image_size),
            format!("synthetic.seed = {}", r.synthetic.seed),
            format!("synthetic.holdout_per_class = {}", r.synthetic.holdout()),
        ]);
        Ok(lines.join("\n") + "\n")
    }

    pub fn load_data(&self) -> Result<(DatasetSplit, LabeledIndex)> {
        let root = resolve_data_root(self.data_root.as_deref());
        let split = load_dataset(self.dataset, &root, &self.synthetic)?;
        let index = select_labeled_subset(&split, self.train.n_per_class, self.train.seed)?;
        Ok((split, index))
    }
}

/// Exclusive claim on an output directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => {
                let _ = fs::write(&path, std::process::id().to_string());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Usage(format!(
                "{} is in use by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(format!("create {}", path.display()), e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn latest_checkpoint(dir: &Path) -> PathBuf {
    dir.join("checkpoints").join("latest.ckpt")
}

/// Trains from scratch into `cfg.output_dir`.
pub fn run_train(cfg: &ExperimentConfig) -> Result<Trainer> {
    let cfg = cfg.resolve()?;
    let text = cfg.to_text()?;
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join(CONFIG_FILE), &text)?;
    let (split, index) = cfg.load_data()?;
    let mut trainer = Trainer::new(&cfg.architecture()?, cfg.train.clone())?;
    trainer.fit(
        &split,
        &index,
        Some(&RunOutput {
            dir: &cfg.output_dir,
            experiment: &text,
        }),
    )?;
    Ok(trainer)
}

/// Keys that may differ from the checkpoint when resuming.
const RESUMABLE_OVERRIDES: [&str; 7] = [
    "train.epochs",
    "data_root",
    "output_dir",
    "train.checkpoint_every",
    "eval.k",
    "eval.knn_weight",
    "eval.queries",
];

/// Continues the run stored in `checkpoint`. Only the epoch budget,
/// checkpoint cadence, data root and output directory may be overridden.
pub fn run_resume(checkpoint: &Path, overrides: &[(String, String)]) -> Result<Trainer> {
    let (mut trainer, text) = Trainer::resume(checkpoint)?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    let stored = cfg.resolve()?;
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    let cfg = cfg.resolve()?;
    for (k, _) in overrides {
        if !RESUMABLE_OVERRIDES.contains(&k.as_str()) {
            let mut probe = stored.clone();
            probe.set(k, &overrides.iter().rev().find(|(kk, _)| kk == k).expect("present").1)?;
            if probe.resolve()? != stored {
                return Err(Error::Usage(format!(
                    "{k}: cannot change on resume, the checkpoint fixes the architecture and training config"
                )));
            }
        }
    }
    trainer.set_total_epochs(cfg.train.total_epochs)?;
    let text = cfg.to_text()?;
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join(CONFIG_FILE), &text)?;
    let (split, index) = cfg.load_data()?;
    trainer.fit(
        &split,
        &index,
        Some(&RunOutput {
            dir: &cfg.output_dir,
            experiment: &text,
        }),
    )?;
    Ok(trainer)
}

/// A trained model with the experiment that produced it.
pub struct Loaded {
    pub trainer: Trainer,
    pub config: ExperimentConfig,
    pub split: DatasetSplit,
    pub index: LabeledIndex,
}

/// Loads a checkpoint and its data. `overrides` may relocate the data or
/// change evaluation options.
pub fn load_run(checkpoint: &Path, overrides: &[(String, String)]) -> Result<Loaded> {
    if !checkpoint.is_file() {
        return Err(Error::Usage(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let (trainer, text) = Trainer::resume(checkpoint)?;
    let mut config = ExperimentConfig::parse(&text)?;
    for (k, v) in overrides {
        config.set(k, v)?;
    }
    let config = config.resolve()?;
    let (split, index) = config.load_data()?;
    Ok(Loaded {
        trainer,
        config,
        split,
        index,
    })
}

impl Loaded {
    pub fn evaluate(&self) -> Result<EvalReport> {
        eval::evaluate(
            self.trainer.networks(),
            &self.trainer.state.params,
            &self.split,
            &self.index,
            self.config.train.model,
            self.config.k,
            self.config.knn_weight,
            self.config.queries,
        )
    }

    pub fn query_set(&self) -> (&crate::datasets::ImageSet, EmbeddingSource) {
        match self.config.queries {
            QuerySplit::Validation => (&self.split.validation, EmbeddingSource::Validation),
            QuerySplit::Test => (&self.split.test, EmbeddingSource::Test),
        }
    }
}

/// Evaluates and writes `report.json` and `report.txt` into `out_dir`.
pub fn run_eval(loaded: &Loaded, out_dir: &Path) -> Result<EvalReport> {
    let report = loaded.evaluate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("create {}", out_dir.display()), e))?;
    write_text(&out_dir.join(REPORT_JSON), &(report.to_json() + "\n"))?;
    write_text(&out_dir.join(REPORT_TEXT), &render_single(&report))?;
    Ok(report)
}

fn render_single(r: &EvalReport) -> String {
    let mut s = format!(
        "model {}  m={}  n={}  k={}  queries={} ({})  database={}\naccuracy {:.4}\nmAP      {:.4}\n\nclass      AP  queries\n",
        r.model_tag, r.m, r.n_per_class, r.k, r.queries, r.query_count, r.database_count, r.accuracy, r.map
    );
    for c in &r.per_class_ap {
        s.push_str(&format!("{:>5} {:>7.4} {:>8}\n", c.class, c.ap, c.queries));
    }
    s
}

/// Exports embeddings of the chosen split (`labeled` = the labeled train subset).
pub fn run_embed(loaded: &Loaded, which: &str, path: &Path) -> Result<usize> {
    let nets = loaded.trainer.networks();
    let p = &loaded.trainer.state.params;
    let labeled;
    let (images, source) = match which {
        "labeled" => {
            labeled = loaded.index.images(&loaded.split.train);
            (&labeled, EmbeddingSource::TrainLabeled)
        }
        "validation" => (&loaded.split.validation, EmbeddingSource::Validation),
        "test" => (&loaded.split.test, EmbeddingSource::Test),
        other => return Err(Error::Usage(format!("split: unknown `{other}`, expected labeled, validation or test"))),
    };
    let set = eval::embed(nets, p, images, 256, source)?;
    eval::export_embeddings(&set, path)?;
    Ok(set.len())
}

/// Neighbor grid for `count` seeded random queries against the labeled subset.
pub fn run_grid(loaded: &Loaded, count: usize, top: usize, seed: u64, path: &Path) -> Result<()> {
    let nets = loaded.trainer.networks();
    let p = &loaded.trainer.state.params;
    let db_images = loaded.index.images(&loaded.split.train);
    let db = eval::embed(nets, p, &db_images, 256, EmbeddingSource::TrainLabeled)?;
    let (qset, source) = loaded.query_set();
    if count == 0 || count > qset.len() {
        return Err(Error::Usage(format!("queries: {count} requested, the split has {}", qset.len())));
    }
    let mut picks = sample(&mut ChaCha8Rng::seed_from_u64(seed), qset.len(), count).into_vec();
    picks.sort_unstable();
    let q_images = qset.subset(&picks);
    let q = eval::embed(nets, p, &q_images, 256, source)?;
    let grid = eval::retrieval_grid(&db_images, &db, &q_images, &q, top)?;
    eval::save_png(&grid, path)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub model: ModelTag,
    pub m: usize,
    pub n_per_class: usize,
}

impl SweepCell {
    pub fn dir_name(&self) -> String {
        format!("{}_m{}_n{}", self.model, self.m, self.n_per_class)
    }
}

#[derive(Debug, Default)]
pub struct SweepOutcome {
    pub reports: Vec<EvalReport>,
    pub skipped: Vec<String>,
    pub failed: Vec<(String, String)>,
    pub tables: String,
}

/// Cartesian product of models, feature sizes and labeled-set sizes.
pub fn sweep_grid(models: &[ModelTag], ms: &[usize], ns: &[usize]) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    for &model in models {
        for &m in ms {
            for &n_per_class in ns {
                cells.push(SweepCell { model, m, n_per_class });
            }
        }
    }
    cells
}

/// Trains and evaluates every cell under `base.output_dir/<cell>`.
/// Cells with an existing report are reused; failures are recorded and
/// the sweep moves on. Writes `sweep.txt` at the root.
pub fn run_sweep(base: &ExperimentConfig, cells: &[SweepCell]) -> Result<SweepOutcome> {
    let root = base.output_dir.clone();
    let _lock = RunLock::acquire(&root)?;
    let mut outcome = SweepOutcome::default();
    let mut seen = BTreeSet::new();
    for cell in cells {
        let name = cell.dir_name();
        if !seen.insert(name.clone()) {
            continue;
        }
        let dir = root.join(&name);
        let report_path = dir.join(REPORT_JSON);
        if let Ok(text) = fs::read_to_string(&report_path) {
            if let Ok(r) = EvalReport::from_json(&text) {
                log::info!("sweep: {name} already done");
                outcome.reports.push(r);
                outcome.skipped.push(name);
                continue;
            }
        }
        let result = (|| -> Result<EvalReport> {
            let mut cfg = base.clone();
            cfg.output_dir = dir.clone();
            cfg.train.model = cell.model;
            cfg.train.latent_dim = cell.m;
            cfg.train.n_per_class = cell.n_per_class;
            if cell.model == ModelTag::Bigan {
                cfg.lambda = None;
            }
            run_train(&cfg)?;
            let loaded = load_run(&latest_checkpoint(&dir), &[])?;
            run_eval(&loaded, &dir)
        })();
        match result {
            Ok(r) => outcome.reports.push(r),
            Err(e) => {
                log::error!("sweep: {name} failed: {e}");
                outcome.failed.push((name, e.to_string()));
            }
        }
    }
    let mut tables = eval::render_report_tables(&outcome.reports);
    for (name, err) in &outcome.failed {
        tables.push_str(&format!("failed: {name}: {err}\n"));
    }
    write_text(&root.join("sweep.txt"), &tables)?;
    outcome.tables = tables;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.set("model.m", "16").unwrap();
        c.set("train.lr", "0.0003").unwrap();
        c.set("train.hard_negatives", "true").unwrap();
        let text = c.to_text().unwrap();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back.resolve().unwrap(), c.resolve().unwrap());
        assert_eq!(back.to_text().unwrap(), text);
        assert!(text.contains("train.lambda = 1.0"));
    }

    #[test]
    fn bad_keys_and_values_name_the_field() {
        let mut c = ExperimentConfig::default();
        assert!(matches!(c.set("train.speed", "1"), Err(Error::Usage(m)) if m.contains("train.speed")));
        assert!(matches!(c.set("train.epochs", "ten"), Err(Error::Usage(m)) if m.starts_with("train.epochs")));
        assert!(ExperimentConfig::parse("dataset synthetic").is_err());
    }

    #[test]
    fn bigan_forces_lambda_zero() {
        let mut c = ExperimentConfig::default();
        c.set("model.kind", "bigan").unwrap();
        assert_eq!(c.resolve().unwrap().train.lambda, 0.0);
        c.set("train.lambda", "0.5").unwrap();
        assert!(matches!(c.resolve(), Err(Error::Usage(m)) if m.starts_with("lambda")));
    }

    #[test]
    fn preset_must_match_images() {
        let mut c = ExperimentConfig::default();
        c.set("model.preset", "standard").unwrap();
        assert!(c.resolve().is_err());
        c.set("dataset", "cifar10").unwrap();
        assert_eq!(c.resolve().unwrap().preset, Some(Preset::Standard));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(lock);
        RunLock::acquire(dir.path()).unwrap();
    }
}
