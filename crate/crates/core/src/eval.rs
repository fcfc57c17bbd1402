//! Embedding evaluation: distance-weighted k-NN accuracy, retrieval mean
//! average precision over the full database, neighbor grids and export.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use tbigan_nn::Tensor;

use crate::datasets::{DatasetSplit, ImageSet, LabeledIndex};
use crate::error::{Error, Result};
use crate::models::{ModelParams, Networks};
use crate::sampler::euclidean;
use crate::trainer::ModelTag;

pub const DEFAULT_K: usize = 9;
pub const DEFAULT_GRID_TOP: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingSource {
    TrainLabeled,
    Validation,
    Test,
}

/// Which split supplies the queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuerySplit {
    Validation,
    Test,
}

impl FromStr for QuerySplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "validation" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            other => Err(Error::Usage(format!("unknown query split `{other}`, expected validation or test"))),
        }
    }
}

impl fmt::Display for QuerySplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Validation => "validation",
            Self::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    vectors: Tensor,
    labels: Vec<usize>,
    pub source: EmbeddingSource,
    pub deterministic: bool,
}

impl EmbeddingSet {
    pub fn new(vectors: Tensor, labels: Vec<usize>, source: EmbeddingSource, deterministic: bool) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.dim(0) != labels.len() {
            return Err(Error::Contract(format!(
                "{} labels for vectors of shape {:?}",
                labels.len(),
                vectors.shape()
            )));
        }
        if !vectors.all_finite() {
            return Err(Error::Numerical {
                term: "embedding".into(),
                step: 0,
            });
        }
        Ok(Self {
            vectors,
            labels,
            source,
            deterministic,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn m(&self) -> usize {
        self.vectors.dim(1)
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Deterministic-mode codes for every image in `images`.
pub fn embed(nets: &Networks, params: &ModelParams, images: &ImageSet, batch_size: usize, source: EmbeddingSource) -> Result<EmbeddingSet> {
    let vectors = nets.encode_set(params, images, batch_size)?;
    EmbeddingSet::new(vectors, images.labels().to_vec(), source, true)
}

fn check_pair(db: &EmbeddingSet, queries: &EmbeddingSet) -> Result<()> {
    if db.is_empty() {
        return Err(Error::Contract("empty embedding database".into()));
    }
    if !queries.is_empty() && db.m() != queries.m() {
        return Err(Error::Contract(format!(
            "database has m = {}, queries have m = {}",
            db.m(),
            queries.m()
        )));
    }
    Ok(())
}

/// Database indices sorted by distance to `q`, ties by index, with distances.
fn ranking(db: &EmbeddingSet, q: &[f64]) -> Vec<(f64, usize)> {
    let mut r: Vec<(f64, usize)> = (0..db.len()).map(|i| (euclidean(q, db.vector(i)), i)).collect();
    r.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    r
}

/// Largest score wins; equal scores go to the smallest class id.
fn argmax_class(scores: &BTreeMap<usize, f64>) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (&c, &s) in scores {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    best.expect("at least one neighbor").0
}

/// How each of the k neighbors votes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KnnWeight {
    /// `1/d`; neighbors at distance zero outvote everything else.
    #[default]
    Inverse,
    Uniform,
}

impl FromStr for KnnWeight {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse" => Ok(Self::Inverse),
            "uniform" => Ok(Self::Uniform),
            _ => Err(Error::Usage(format!("unknown knn weight `{s}` (inverse, uniform)"))),
        }
    }
}

impl fmt::Display for KnnWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Inverse => "inverse",
            Self::Uniform => "uniform",
        })
    }
}

/// k-NN with `1/d` votes. Neighbors at distance zero outvote everything
/// else: only they count, one vote each.
pub fn knn_classify(db: &EmbeddingSet, queries: &EmbeddingSet, k: usize) -> Result<Vec<usize>> {
    knn_classify_weighted(db, queries, k, KnnWeight::Inverse)
}

pub fn knn_classify_weighted(db: &EmbeddingSet, queries: &EmbeddingSet, k: usize, weight: KnnWeight) -> Result<Vec<usize>> {
    check_pair(db, queries)?;
    if k == 0 || k > db.len() {
        return Err(Error::Contract(format!("k = {k} for a database of {}", db.len())));
    }
    Ok((0..queries.len())
        .map(|q| {
            let nn = &ranking(db, queries.vector(q))[..k];
            let mut scores = BTreeMap::new();
            if weight == KnnWeight::Uniform {
                for &(_, i) in nn {
                    *scores.entry(db.labels[i]).or_insert(0.0) += 1.0;
                }
            } else if nn[0].0 == 0.0 {
                for &(_, i) in nn.iter().take_while(|n| n.0 == 0.0) {
                    *scores.entry(db.labels[i]).or_insert(0.0) += 1.0;
                }
            } else {
                for &(d, i) in nn {
                    *scores.entry(db.labels[i]).or_insert(0.0) += 1.0 / d;
                }
            }
            argmax_class(&scores)
        })
        .collect())
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Mean of precision@i over the relevant ranks `i`, on the full ranking.
/// Returns `None` when nothing is relevant.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub ap: f64,
    pub queries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    pub map: f64,
    pub per_class_ap: Vec<ClassAp>,
    /// Queries whose class never occurs in the database; they score AP 0.
    pub zero_relevant: usize,
}

pub fn retrieval_map(db: &EmbeddingSet, queries: &EmbeddingSet) -> Result<Retrieval> {
    check_pair(db, queries)?;
    if queries.is_empty() {
        return Err(Error::Contract("no retrieval queries".into()));
    }
    let mut per_class: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    let mut zero_relevant = 0;
    for q in 0..queries.len() {
        let label = queries.labels[q];
        let rel: Vec<bool> = ranking(db, queries.vector(q)).iter().map(|&(_, i)| db.labels[i] == label).collect();
        let ap = average_precision(&rel).unwrap_or_else(|| {
            zero_relevant += 1;
            0.0
        });
        total += ap;
        let e = per_class.entry(label).or_insert((0.0, 0));
        e.0 += ap;
        e.1 += 1;
    }
    if zero_relevant > 0 {
        log::warn!("{zero_relevant} queries have no relevant database item");
    }
    Ok(Retrieval {
        map: total / queries.len() as f64,
        per_class_ap: per_class
            .into_iter()
            .map(|(class, (sum, n))| ClassAp {
                class,
                ap: sum / n as f64,
                queries: n,
            })
            .collect(),
        zero_relevant,
    })
}

const GRID_GAP: u32 = 2;

/// One row per query: the query image followed by its `top` nearest
/// database images, closest first.
pub fn retrieval_grid(
    db_images: &ImageSet,
    db: &EmbeddingSet,
    query_images: &ImageSet,
    queries: &EmbeddingSet,
    top: usize,
) -> Result<RgbImage> {
    check_pair(db, queries)?;
    if top > db.len() || db_images.len() != db.len() || query_images.len() != queries.len() {
        return Err(Error::Contract("retrieval grid inputs are not aligned".into()));
    }
    let [c, h, w] = db_images.shape();
    if query_images.shape() != [c, h, w] || !(c == 1 || c == 3) {
        return Err(Error::Contract(format!("cannot tile images of shape {:?}", db_images.shape())));
    }
    let (cw, ch) = (w as u32 + GRID_GAP, h as u32 + GRID_GAP);
    let cols = top as u32 + 1;
    let mut grid = RgbImage::from_pixel(cols * cw + GRID_GAP, queries.len() as u32 * ch + GRID_GAP, Rgb([255, 255, 255]));
    let mut paste = |bytes: &[u8], row: u32, col: u32| {
        for y in 0..h {
            for x in 0..w {
                let px = |ch_: usize| bytes[(ch_ * h + y) * w + x];
                let rgb = if c == 1 { [px(0); 3] } else { [px(0), px(1), px(2)] };
                grid.put_pixel(GRID_GAP + col * cw + x as u32, GRID_GAP + row * ch + y as u32, Rgb(rgb));
            }
        }
    };
    for q in 0..queries.len() {
        paste(query_images.image_bytes(q), q as u32, 0);
        for (j, &(_, i)) in ranking(db, queries.vector(q)).iter().take(top).enumerate() {
            paste(db_images.image_bytes(i), q as u32, j as u32 + 1);
        }
    }
    Ok(grid)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(format!("write {}", path.display()), std::io::Error::other(e)))
}

/// Tab-separated text: a `m=<m>\tcount=<n>` header, then one row per
/// vector with `m` values in `%.8e` and the integer label last.
pub fn export_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let ctx = || format!("write {}", path.display());
    let f = fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(f);
    let m = if set.is_empty() { set.vectors.shape().get(1).copied().unwrap_or(0) } else { set.m() };
    let mut out = format!("m={m}\tcount={}\n", set.len());
    for i in 0..set.len() {
        for v in set.vector(i) {
            let _ = write!(out, "{v:.8e}\t");
        }
        let _ = writeln!(out, "{}", set.labels[i]);
    }
    w.write_all(out.as_bytes()).map_err(|e| Error::io(ctx(), e))?;
    w.flush().map_err(|e| Error::io(ctx(), e))
}

/// Reads a file written by [`export_embeddings`] into `(vectors, labels)`.
pub fn read_embeddings(path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let f = fs::File::open(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let bad = |reason: String| Error::Ingest {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = BufReader::new(f).lines();
    let header = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .map_err(|e| Error::io("read header", e))?;
    let field = |key: &str| -> Result<usize> {
        header
            .split('\t')
            .find_map(|kv| kv.strip_prefix(key))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("header lacks {key}")))
    };
    let (m, count) = (field("m=")?, field("count=")?);
    let mut data = Vec::with_capacity(m * count);
    let mut labels = Vec::with_capacity(count);
    for (row, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io("read row", e))?;
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != m + 1 {
            return Err(bad(format!("row {row} has {} cells, expected {}", cells.len(), m + 1)));
        }
        for c in &cells[..m] {
            data.push(c.parse::<f64>().map_err(|e| bad(format!("row {row}: {e}")))?);
        }
        labels.push(cells[m].parse::<usize>().map_err(|e| bad(format!("row {row}: {e}")))?);
    }
    if labels.len() != count {
        return Err(bad(format!("header says {count} rows, found {}", labels.len())));
    }
    Ok((Tensor::from_vec(&[count, m], data)?, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_tag: ModelTag,
    pub m: usize,
    pub n_per_class: usize,
    pub k: usize,
    #[serde(default)]
    pub knn_weight: KnnWeight,
    pub accuracy: f64,
    pub map: f64,
    pub per_class_ap: Vec<ClassAp>,
    pub queries: QuerySplit,
    pub query_count: usize,
    pub database_count: usize,
    pub zero_relevant_queries: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Usage(format!("not an evaluation report: {e}")))
    }
}

/// The labeled train subset is the database; `queries` picks the query split.
pub fn evaluate(
    nets: &Networks,
    params: &ModelParams,
    split: &DatasetSplit,
    index: &LabeledIndex,
    model_tag: ModelTag,
    k: usize,
    knn_weight: KnnWeight,
    queries: QuerySplit,
) -> Result<EvalReport> {
    let db = embed(nets, params, &index.images(&split.train), 256, EmbeddingSource::TrainLabeled)?;
    let (qset, source) = match queries {
        QuerySplit::Validation => (&split.validation, EmbeddingSource::Validation),
        QuerySplit::Test => (&split.test, EmbeddingSource::Test),
    };
    let q = embed(nets, params, qset, 256, source)?;
    let predicted = knn_classify_weighted(&db, &q, k, knn_weight)?;
    let retrieval = retrieval_map(&db, &q)?;
    Ok(EvalReport {
        model_tag,
        m: nets.latent_dim(),
        n_per_class: index.n_per_class(),
        k,
        knn_weight,
        accuracy: accuracy(&predicted, q.labels()),
        map: retrieval.map,
        per_class_ap: retrieval.per_class_ap,
        queries,
        query_count: q.len(),
        database_count: db.len(),
        zero_relevant_queries: retrieval.zero_relevant,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Map,
}

impl Metric {
    fn of(self, r: &EvalReport) -> f64 {
        match self {
            Metric::Accuracy => r.accuracy,
            Metric::Map => r.map,
        }
    }

    fn title(self) -> &'static str {
        match self {
            Metric::Accuracy => "classification accuracy",
            Metric::Map => "retrieval mAP",
        }
    }
}

/// Column axis of a results table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Feature vector size.
    M,
    /// Labeled examples per class.
    N,
}

impl Axis {
    fn of(self, r: &EvalReport) -> usize {
        match self {
            Axis::M => r.m,
            Axis::N => r.n_per_class,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Axis::M => "m",
            Axis::N => "n",
        }
    }
}

/// Aligned text table, one row per model and one column per axis value.
/// Missing cells print `-`; duplicate cells keep the last report.
pub fn render_table(reports: &[EvalReport], metric: Metric, axis: Axis) -> String {
    let mut cols: Vec<usize> = reports.iter().map(|r| axis.of(r)).collect();
    cols.sort_unstable();
    cols.dedup();
    let mut cells: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let model_row = |t: ModelTag| ModelTag::ALL.iter().position(|&x| x == t).expect("known tag");
    for r in reports {
        cells.insert((model_row(r.model_tag), axis.of(r)), metric.of(r));
    }
    let fixed: Vec<String> = {
        let other = match axis {
            Axis::M => reports.iter().map(|r| format!("n={}", r.n_per_class)).collect::<Vec<_>>(),
            Axis::N => reports.iter().map(|r| format!("m={}", r.m)).collect::<Vec<_>>(),
        };
        let mut o = other;
        o.sort();
        o.dedup();
        o
    };
    let mut out = format!("{} by {} ({})\n", metric.title(), axis.name(), fixed.join(", "));
    let _ = write!(out, "{:<14}", "model");
    for c in &cols {
        let _ = write!(out, "{:>10}", format!("{}={c}", axis.name()));
    }
    out.push('\n');
    for (row, tag) in ModelTag::ALL.iter().enumerate() {
        if !cells.keys().any(|&(r, _)| r == row) {
            continue;
        }
        let _ = write!(out, "{:<14}", tag.to_string());
        for c in &cols {
            match cells.get(&(row, *c)) {
                Some(v) => {
                    let _ = write!(out, "{v:>10.4}");
                }
                None => {
                    let _ = write!(out, "{:>10}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Accuracy and mAP tables for both axes.
pub fn render_report_tables(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    for axis in [Axis::M, Axis::N] {
        for metric in [Metric::Accuracy, Metric::Map] {
            out.push_str(&render_table(reports, metric, axis));
            out.push('\n');
        }
    }
    out
}
