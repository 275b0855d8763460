//! Labeled feature sets, the synthetic cluster task, stratified splitting and
//! the two CSV schemas used to exchange data with other tools.
//!
//! Schema A (features): header `x0,..,x{d-1},label`, one sample per row.
//! Unlabeled point sets use the same header without `label`.
//!
//! Schema B (logits, long form): header `sample_id,label,domain,t,k,value`,
//! one logit per row. `label` may be empty, `domain` is `id` or `ood`.
//! A wide variant with `l_{t}_{k}` columns plus `domain` (and optional
//! `sample_id`, `label`) is also accepted on input.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{sample_gaussian, GaussianParams, Matrix, RngStream};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::InconsistentShape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::InvalidArgument("dataset must not be empty".into()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(LabeledDataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (self.features.row(i), self.labels[i])
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, ids: &[usize]) -> Result<LabeledDataset> {
        let d = self.dim();
        let mut data = Vec::with_capacity(ids.len() * d);
        let mut labels = Vec::with_capacity(ids.len());
        for &i in ids {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset::new(Matrix::new(ids.len(), d, data)?, labels, self.num_classes)
    }
}

/// Geometry of a Gaussian-mixture classification task.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSpec {
    pub means: Matrix,
    pub covs: Vec<Matrix>,
    pub per_class: usize,
}

impl ClusterSpec {
    /// Five unit-covariance clusters: four on a radius-4 circle plus one at
    /// the origin.
    pub fn toy(per_class: usize) -> Self {
        let r = 4.0;
        let means = Matrix::from_rows(&[[0.0, 0.0], [r, 0.0], [0.0, r], [-r, 0.0], [0.0, -r]])
            .expect("static geometry");
        ClusterSpec {
            means,
            covs: vec![Matrix::identity(2); 5],
            per_class,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn gaussians(&self) -> Result<Vec<GaussianParams>> {
        if self.covs.len() != self.num_classes() {
            return Err(Error::dims(self.num_classes(), self.covs.len()));
        }
        self.means
            .iter_rows()
            .zip(&self.covs)
            .map(|(m, c)| GaussianParams::new(m.to_vec(), c.clone()))
            .collect()
    }

    /// True if `x` lies outside the `radius`-Mahalanobis ellipse of every cluster.
    pub fn outside_all(&self, x: &[f64], radius: f64) -> Result<bool> {
        for g in self.gaussians()? {
            if g.mahalanobis2(x)? <= radius * radius {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Draws `per_class` points from each cluster, class by class.
pub fn make_clusters(spec: &ClusterSpec, rng: &mut RngStream) -> Result<LabeledDataset> {
    let c = spec.num_classes();
    let d = spec.dim();
    if c < 2 || d < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes and 2 dimensions, got {c} and {d}"
        )));
    }
    let gaussians = spec.gaussians()?;
    let mut data = Vec::with_capacity(c * spec.per_class * d);
    let mut labels = Vec::with_capacity(c * spec.per_class);
    for (label, g) in gaussians.iter().enumerate() {
        data.extend(sample_gaussian(g, spec.per_class, rng).into_vec());
        labels.extend(std::iter::repeat_n(label, spec.per_class));
    }
    LabeledDataset::new(Matrix::new(labels.len(), d, data)?, labels, c)
}

/// Uniform points in the box `[-half_width, half_width]^d` that fall outside
/// every cluster's `exclusion`-sigma ellipse (rejection sampling).
pub fn uniform_background(
    spec: &ClusterSpec,
    count: usize,
    half_width: f64,
    exclusion: f64,
    rng: &mut RngStream,
) -> Result<Matrix> {
    let d = spec.dim();
    let mut out = Vec::with_capacity(count * d);
    let mut accepted = 0;
    let mut attempts = 0usize;
    let mut x = vec![0.0; d];
    while accepted < count {
        attempts += 1;
        if attempts > 1000 * count.max(1) {
            return Err(Error::InvalidArgument(
                "background box is almost entirely covered by clusters".into(),
            ));
        }
        for v in x.iter_mut() {
            *v = rng.random_range(-half_width..=half_width);
        }
        if spec.outside_all(&x, exclusion)? {
            out.extend_from_slice(&x);
            accepted += 1;
        }
    }
    Matrix::new(count, d, out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split: each class contributes `round(fraction·n_c)` samples to
/// training, clamped so both sides keep at least one. Indices are sorted.
pub fn split(ds: &LabeledDataset, fraction: f64, rng: &mut RngStream) -> Result<SplitIndices> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut by_class = vec![Vec::new(); ds.num_classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut ids) in by_class.into_iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        if ids.len() < 2 {
            return Err(Error::ClassTooSmall {
                class,
                count: ids.len(),
            });
        }
        ids.shuffle(rng);
        let n_train = ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
        train.extend_from_slice(&ids[..n_train]);
        test.extend_from_slice(&ids[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Id,
    Ood,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Id => "id",
            Domain::Ood => "ood",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "id" => Ok(Domain::Id),
            "ood" => Ok(Domain::Ood),
            other => Err(format!("expected `id` or `ood`, got `{other}`")),
        }
    }
}

/// One externally evaluated input: `T` passes of `K` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitRecord {
    pub sample_id: String,
    pub label: Option<usize>,
    pub domain: Domain,
    pub logits: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogitDump {
    passes: usize,
    classes: usize,
    records: Vec<LogitRecord>,
}

impl LogitDump {
    pub fn new(records: Vec<LogitRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::InvalidArgument("logit dump has no rows".into()))?;
        let (passes, classes) = first.logits.shape();
        if passes == 0 || classes == 0 {
            return Err(Error::InconsistentShape("empty logit matrix".into()));
        }
        for r in &records {
            if r.logits.shape() != (passes, classes) {
                return Err(Error::InconsistentShape(format!(
                    "sample `{}` has {}x{} logits, expected {passes}x{classes}",
                    r.sample_id,
                    r.logits.rows(),
                    r.logits.cols()
                )));
            }
        }
        Ok(LogitDump {
            passes,
            classes,
            records,
        })
    }

    /// Number of stochastic passes per sample.
    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn records(&self) -> &[LogitRecord] {
        &self.records
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CsvData {
    Features(LabeledDataset),
    Logits(LogitDump),
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<CsvData> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file)
}

pub fn save_csv(path: impl AsRef<Path>, data: &CsvData) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    match data {
        CsvData::Features(ds) => write_features_csv(ds, &mut file)?,
        CsvData::Logits(dump) => write_logits_csv(dump, &mut file)?,
    }
    file.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => Error::Parse {
            line,
            column: "*".into(),
            message: format!("expected {expected_len} fields, found {len}"),
        },
        other => Error::Parse {
            line,
            column: "*".into(),
            message: format!("{other:?}"),
        },
    }
}

fn parse_cell<T: std::str::FromStr>(cell: &str, line: usize, column: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    cell.trim().parse::<T>().map_err(|e| Error::Parse {
        line,
        column: column.to_string(),
        message: format!("cannot parse `{cell}`: {e}"),
    })
}

fn parse_real(cell: &str, line: usize, column: &str) -> Result<f64> {
    let v: f64 = parse_cell(cell, line, column)?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            column: column.to_string(),
            message: format!("non-finite value `{cell}`"),
        });
    }
    Ok(v)
}

fn parse_feature_index(name: &str) -> Option<usize> {
    name.strip_prefix('x')?.parse().ok()
}

fn parse_wide_logit(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("l_")?;
    let (t, k) = rest.split_once('_')?;
    Some((t.parse().ok()?, k.parse().ok()?))
}

/// Reads either schema, deciding by the header row.
pub fn read_csv<R: Read>(reader: R) -> Result<CsvData> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    let has = |name: &str| header.iter().any(|h| h == name);
    let long_cols = ["t", "k", "value"];
    let is_long = long_cols.iter().any(|c| has(c));
    let is_wide = header.iter().any(|h| parse_wide_logit(h).is_some());
    let is_features = header.iter().any(|h| parse_feature_index(h).is_some());

    if is_long || is_wide {
        if !has("domain") {
            return Err(Error::Schema {
                column: "domain".into(),
            });
        }
        if is_long {
            for c in ["sample_id", "t", "k", "value"] {
                if !has(c) {
                    return Err(Error::Schema { column: c.into() });
                }
            }
            read_long_logits(&header, rdr).map(CsvData::Logits)
        } else {
            read_wide_logits(&header, rdr).map(CsvData::Logits)
        }
    } else if is_features {
        read_features(&header, rdr).map(CsvData::Features)
    } else if has("domain") || has("sample_id") {
        Err(Error::Schema {
            column: "value".into(),
        })
    } else {
        Err(Error::Schema {
            column: "x0".into(),
        })
    }
}

fn column_index(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema {
            column: name.to_string(),
        })
}

fn read_features<R: Read>(header: &[String], mut rdr: csv::Reader<R>) -> Result<LabeledDataset> {
    let label_col = column_index(header, "label")?;
    let d = header.iter().filter_map(|h| parse_feature_index(h)).count();
    let mut feature_cols = Vec::with_capacity(d);
    for j in 0..d {
        feature_cols.push(column_index(header, &format!("x{j}"))?);
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        for (j, &c) in feature_cols.iter().enumerate() {
            data.push(parse_real(&rec[c], line, &format!("x{j}"))?);
        }
        labels.push(parse_cell::<usize>(&rec[label_col], line, "label")?);
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("feature file has no rows".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(Matrix::new(labels.len(), d, data)?, labels, classes)
}

fn parse_label(cell: &str, line: usize) -> Result<Option<usize>> {
    if cell.trim().is_empty() {
        Ok(None)
    } else {
        parse_cell(cell, line, "label").map(Some)
    }
}

struct PartialRecord {
    label: Option<usize>,
    domain: Domain,
    cells: HashMap<(usize, usize), f64>,
}

fn read_long_logits<R: Read>(header: &[String], mut rdr: csv::Reader<R>) -> Result<LogitDump> {
    let id_col = column_index(header, "sample_id")?;
    let label_col = header.iter().position(|h| h == "label");
    let domain_col = column_index(header, "domain")?;
    let t_col = column_index(header, "t")?;
    let k_col = column_index(header, "k")?;
    let value_col = column_index(header, "value")?;

    let mut order: Vec<String> = Vec::new();
    let mut partial: HashMap<String, PartialRecord> = HashMap::new();
    let (mut max_t, mut max_k) = (0usize, 0usize);
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let id = rec[id_col].to_string();
        let label = match label_col {
            Some(c) => parse_label(&rec[c], line)?,
            None => None,
        };
        let domain: Domain = parse_cell(&rec[domain_col], line, "domain")?;
        let t: usize = parse_cell(&rec[t_col], line, "t")?;
        let k: usize = parse_cell(&rec[k_col], line, "k")?;
        let value = parse_real(&rec[value_col], line, "value")?;
        max_t = max_t.max(t + 1);
        max_k = max_k.max(k + 1);
        let entry = partial.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            PartialRecord {
                label,
                domain,
                cells: HashMap::new(),
            }
        });
        if entry.label != label || entry.domain != domain {
            return Err(Error::InconsistentShape(format!(
                "line {line}: sample `{id}` changes label or domain between rows"
            )));
        }
        if entry.cells.insert((t, k), value).is_some() {
            return Err(Error::InconsistentShape(format!(
                "line {line}: duplicate logit (t={t}, k={k}) for sample `{id}`"
            )));
        }
    }
    let mut records = Vec::with_capacity(order.len());
    for id in order {
        let p = partial.remove(&id).expect("recorded id");
        let mut data = Vec::with_capacity(max_t * max_k);
        for t in 0..max_t {
            for k in 0..max_k {
                let v = p.cells.get(&(t, k)).ok_or_else(|| {
                    Error::InconsistentShape(format!(
                        "sample `{id}` is missing logit (t={t}, k={k})"
                    ))
                })?;
                data.push(*v);
            }
        }
        records.push(LogitRecord {
            sample_id: id,
            label: p.label,
            domain: p.domain,
            logits: Matrix::new(max_t, max_k, data)?,
        });
    }
    LogitDump::new(records)
}

fn read_wide_logits<R: Read>(header: &[String], mut rdr: csv::Reader<R>) -> Result<LogitDump> {
    let id_col = header.iter().position(|h| h == "sample_id");
    let label_col = header.iter().position(|h| h == "label");
    let domain_col = column_index(header, "domain")?;
    let cells: Vec<(usize, (usize, usize))> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| parse_wide_logit(h).map(|tk| (i, tk)))
        .collect();
    let passes = cells.iter().map(|(_, (t, _))| t + 1).max().unwrap_or(0);
    let classes = cells.iter().map(|(_, (_, k))| k + 1).max().unwrap_or(0);
    if cells.len() != passes * classes {
        return Err(Error::InconsistentShape(format!(
            "wide header has {} logit columns, expected {passes}x{classes}",
            cells.len()
        )));
    }
    let mut records = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let mut logits = Matrix::zeros(passes, classes);
        for &(c, (t, k)) in &cells {
            logits[(t, k)] = parse_real(&rec[c], line, &header[c])?;
        }
        records.push(LogitRecord {
            sample_id: id_col.map_or_else(|| row.to_string(), |c| rec[c].to_string()),
            label: match label_col {
                Some(c) => parse_label(&rec[c], line)?,
                None => None,
            },
            domain: parse_cell(&rec[domain_col], line, "domain")?,
            logits,
        });
    }
    LogitDump::new(records)
}

pub fn write_features_csv<W: Write>(ds: &LabeledDataset, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    wtr.write_record(&header).map_err(csv_err)?;
    for i in 0..ds.len() {
        let (x, y) = ds.sample(i);
        let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        row.push(y.to_string());
        wtr.write_record(&row).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads unlabeled points in schema A; a `label` column, if present, is
/// ignored.
pub fn read_points<R: Read>(reader: R) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    let d = header.iter().filter_map(|h| parse_feature_index(h)).count();
    if d == 0 {
        return Err(Error::Schema {
            column: "x0".into(),
        });
    }
    let mut feature_cols = Vec::with_capacity(d);
    for j in 0..d {
        feature_cols.push(column_index(&header, &format!("x{j}"))?);
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        for (j, &c) in feature_cols.iter().enumerate() {
            data.push(parse_real(&rec[c], line, &format!("x{j}"))?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::InvalidArgument("point file has no rows".into()));
    }
    Matrix::new(rows, d, data)
}

pub fn load_points(path: impl AsRef<Path>) -> Result<Matrix> {
    read_points(std::fs::File::open(path.as_ref())?)
}

/// Writes unlabeled points with header `x0,..,x{d-1}`.
pub fn write_points_csv<W: Write>(points: &Matrix, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let header: Vec<String> = (0..points.cols()).map(|j| format!("x{j}")).collect();
    wtr.write_record(&header).map_err(csv_err)?;
    for row in points.iter_rows() {
        wtr.write_record(row.iter().map(|v| v.to_string()))
            .map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes the long form of schema B.
pub fn write_logits_csv<W: Write>(dump: &LogitDump, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["sample_id", "label", "domain", "t", "k", "value"])
        .map_err(csv_err)?;
    for r in dump.records() {
        let label = r.label.map(|l| l.to_string()).unwrap_or_default();
        for t in 0..dump.passes() {
            for k in 0..dump.classes() {
                wtr.write_record([
                    r.sample_id.as_str(),
                    label.as_str(),
                    r.domain.as_str(),
                    &t.to_string(),
                    &k.to_string(),
                    &r.logits[(t, k)].to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}
