//! End-to-end pipelines shared by the command line, the acceptance suite and
//! the Python bindings: toy data, training, MC scoring and reporting.
//!
//! Random streams for a run with seed `s` and data seed `ds`:
//!
//! | stream        | use                              |
//! |---------------|----------------------------------|
//! | `(ds, 10)`    | cluster samples                  |
//! | `(ds, 11)`    | train/test split                 |
//! | `(ds, 12)`    | background OOD points            |
//! | `(s, 0)`      | weight initialization            |
//! | `(s, 1..=2)`  | training (see [`crate::mlp::train`]) |
//! | `(s, 3)`      | MC passes on ID inputs           |
//! | `(s, 4)`      | MC passes on OOD inputs          |
//! | `(s, 5)`      | MC passes on map grid points     |
//!
//! Input `j` of a population uses substream `j` of its stream and MC pass
//! `i` uses substream `i` of that, so the first pass of a `T = 10` run is the
//! `T = 1` run.

use std::fmt;
use std::io::{Read, Write};

use rayon::prelude::*;

use crate::config::{RunConfig, ScoreKind};
use crate::dataset::{
    make_clusters, split, uniform_background, ClusterSpec, Domain, LabeledDataset, LogitDump,
};
use crate::error::{Error, Result};
use crate::mcdropout::{
    combined_scores, mc_infer, summarize, McSamples, McSummary, ScoreComponent,
};
use crate::metrics::{
    aupr, auroc, calibration_error, fpr_at_tpr, mi_ratio_report, MetricReport, MiRatios, Positive,
    ScoredPopulations,
};
use crate::mlp::{train, EpochLog, MlpModel};
use crate::numerics::{Matrix, RngStream};
use crate::vos::VosState;

pub const STREAM_ID_EVAL: u64 = 3;
pub const STREAM_OOD_EVAL: u64 = 4;
pub const STREAM_MAP: u64 = 5;

#[derive(Clone, Debug)]
pub struct ToyData {
    pub spec: ClusterSpec,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub ood: Matrix,
}

pub fn toy_data(cfg: &RunConfig) -> Result<ToyData> {
    let spec = ClusterSpec::toy(cfg.per_class);
    let all = make_clusters(&spec, &mut RngStream::new(cfg.data_seed, 10))?;
    let parts = split(&all, cfg.split, &mut RngStream::new(cfg.data_seed, 11))?;
    let ood = uniform_background(
        &spec,
        cfg.ood_count,
        cfg.ood_half_width,
        cfg.ood_exclusion,
        &mut RngStream::new(cfg.data_seed, 12),
    )?;
    Ok(ToyData {
        train: all.subset(&parts.train)?,
        test: all.subset(&parts.test)?,
        spec,
        ood,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model: MlpModel,
    pub vos: Option<VosState>,
    pub logs: Vec<EpochLog>,
}

pub fn init_model(cfg: &RunConfig, input_dim: usize, classes: usize) -> Result<MlpModel> {
    MlpModel::init(
        input_dim,
        &cfg.hidden,
        classes,
        cfg.dropout,
        &mut RngStream::new(cfg.seed, 0),
    )
}

pub fn train_model(cfg: &RunConfig, data: &LabeledDataset) -> Result<TrainedModel> {
    cfg.validate()?;
    let model = init_model(cfg, data.dim(), data.num_classes())?;
    let mut vos = cfg
        .vos_config()
        .map(|v| VosState::new(v, data.num_classes(), model.penultimate_dim()));
    let (model, logs) = train(model, data, &cfg.train_config(), vos.as_mut())?;
    Ok(TrainedModel { model, vos, logs })
}

/// MC summaries for every row of `inputs`; row `j` draws from
/// `stream.substream(j)`.
pub fn mc_summaries(
    model: &MlpModel,
    inputs: &Matrix,
    passes: usize,
    stream: &RngStream,
    parallel: bool,
) -> Result<Vec<McSummary>> {
    if inputs.cols() != model.input_dim() {
        return Err(Error::dims(model.input_dim(), inputs.cols()));
    }
    let one = |j: usize| -> Result<McSummary> {
        let s = mc_infer(
            model,
            inputs.row(j),
            passes,
            &stream.substream(j as u64),
            false,
        )?;
        Ok(summarize(&s))
    };
    if parallel {
        (0..inputs.rows()).into_par_iter().map(one).collect()
    } else {
        (0..inputs.rows()).map(one).collect()
    }
}

/// One evaluated input, the row format of the scored-sample CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredRow {
    pub sample_id: String,
    pub label: Option<usize>,
    pub pred: usize,
    pub domain: Domain,
    pub mi: f64,
    pub ekl: f64,
    pub var: f64,
    pub entropy: f64,
    pub energy_mean: f64,
    pub energy_var: f64,
    pub combined: f64,
    /// Max mean probability; used for calibration, not written out.
    pub confidence: f64,
}

impl ScoredRow {
    pub const CSV_HEADER: &'static str =
        "sample_id,label,pred,domain,mi,ekl,var,entropy,energy_mean,energy_var,combined";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.sample_id,
            self.label.map_or_else(String::new, |l| l.to_string()),
            self.pred,
            self.domain.as_str(),
            self.mi,
            self.ekl,
            self.var,
            self.entropy,
            self.energy_mean,
            self.energy_var,
            self.combined
        )
    }

    /// ID-likeness under `kind`; higher is more ID-like.
    pub fn score(&self, kind: ScoreKind) -> f64 {
        match kind {
            ScoreKind::Energy => -self.energy_mean.abs(),
            ScoreKind::MutualInfo => -self.mi,
            ScoreKind::Combined => self.combined,
        }
    }

    pub fn is_correct(&self) -> Option<bool> {
        self.label.map(|l| l == self.pred)
    }
}

/// A scored input before the batch-level combined score is known.
#[derive(Clone, Debug)]
pub struct Scored {
    pub sample_id: String,
    pub label: Option<usize>,
    pub domain: Domain,
    pub summary: McSummary,
}

/// Attaches the combined score, min-max scaled over the whole batch.
pub fn finish_rows(
    scored: Vec<Scored>,
    cfg: &RunConfig,
) -> Result<(Vec<ScoredRow>, Vec<ScoreComponent>)> {
    let summaries: Vec<McSummary> = scored.iter().map(|s| s.summary.clone()).collect();
    let combined = combined_scores(&summaries, cfg.score_weights())?;
    let rows = scored
        .into_iter()
        .zip(combined.scores)
        .map(|(s, c)| ScoredRow {
            sample_id: s.sample_id,
            label: s.label,
            pred: s.summary.predicted,
            domain: s.domain,
            mi: s.summary.mutual_info,
            ekl: s.summary.ekl,
            var: s.summary.variance,
            entropy: s.summary.entropy,
            energy_mean: s.summary.energy_mean,
            energy_var: s.summary.energy_var,
            combined: c,
            confidence: s.summary.mean_probs.iter().copied().fold(0.0, f64::max),
        })
        .collect();
    Ok((rows, combined.degenerate))
}

/// Scores an ID population and an OOD population with a model.
pub fn score_model(
    model: &MlpModel,
    id: &Matrix,
    id_labels: Option<&[usize]>,
    ood: &Matrix,
    cfg: &RunConfig,
) -> Result<(Vec<ScoredRow>, Vec<ScoreComponent>)> {
    let id_sum = mc_summaries(
        model,
        id,
        cfg.mc_samples,
        &RngStream::new(cfg.seed, STREAM_ID_EVAL),
        cfg.parallel,
    )?;
    let ood_sum = mc_summaries(
        model,
        ood,
        cfg.mc_samples,
        &RngStream::new(cfg.seed, STREAM_OOD_EVAL),
        cfg.parallel,
    )?;
    let mut scored = Vec::with_capacity(id_sum.len() + ood_sum.len());
    for (j, summary) in id_sum.into_iter().enumerate() {
        scored.push(Scored {
            sample_id: format!("id-{j}"),
            label: id_labels.map(|l| l[j]),
            domain: Domain::Id,
            summary,
        });
    }
    for (j, summary) in ood_sum.into_iter().enumerate() {
        scored.push(Scored {
            sample_id: format!("ood-{j}"),
            label: None,
            domain: Domain::Ood,
            summary,
        });
    }
    finish_rows(scored, cfg)
}

/// Aggregates a logit dump row by row; each record's `T` passes form one
/// [`McSamples`].
pub fn score_dump(
    dump: &LogitDump,
    cfg: &RunConfig,
) -> Result<(Vec<ScoredRow>, Vec<ScoreComponent>)> {
    let scored = dump
        .records()
        .iter()
        .map(|r| {
            Ok(Scored {
                sample_id: r.sample_id.clone(),
                label: r.label,
                domain: r.domain,
                summary: summarize(&McSamples::from_logits(&r.logits)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    finish_rows(scored, cfg)
}

/// Detection and MI-ratio summary of one set of scored rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: MetricReport,
    /// `None` when a group (correct, misclassified or OOD) is empty or the
    /// ID rows carry no labels.
    pub mi_ratios: Option<MiRatios>,
}

pub fn evaluate_rows(
    name: &str,
    rows: &[ScoredRow],
    kind: ScoreKind,
    bins: usize,
    ece_bins: usize,
) -> Result<Evaluation> {
    let id: Vec<&ScoredRow> = rows.iter().filter(|r| r.domain == Domain::Id).collect();
    let ood: Vec<&ScoredRow> = rows.iter().filter(|r| r.domain == Domain::Ood).collect();
    let populations = ScopedRows::populations(&id, &ood, kind)?;
    let labelled: Vec<(&ScoredRow, bool)> = id
        .iter()
        .filter_map(|r| r.is_correct().map(|c| (*r, c)))
        .collect();
    let accuracy = if labelled.is_empty() {
        f64::NAN
    } else {
        labelled.iter().filter(|(_, c)| *c).count() as f64 / labelled.len() as f64
    };
    let ece = if labelled.is_empty() {
        f64::NAN
    } else {
        let pairs: Vec<(f64, bool)> = labelled.iter().map(|(r, c)| (r.confidence, *c)).collect();
        calibration_error(&pairs, ece_bins)?
    };
    let metrics = MetricReport::evaluate(name, kind.as_str(), &populations, accuracy, ece, bins)?;
    let correct: Vec<f64> = labelled
        .iter()
        .filter(|(_, c)| *c)
        .map(|(r, _)| r.mi)
        .collect();
    let wrong: Vec<f64> = labelled
        .iter()
        .filter(|(_, c)| !*c)
        .map(|(r, _)| r.mi)
        .collect();
    let ood_mi: Vec<f64> = ood.iter().map(|r| r.mi).collect();
    let mi_ratios = mi_ratio_report(&correct, &wrong, &ood_mi).ok();
    Ok(Evaluation { metrics, mi_ratios })
}

impl fmt::Display for Evaluation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.metrics)?;
        match &self.mi_ratios {
            Some(r) => write!(
                f,
                "  MI ratio misclassified/correct {:.4}, OOD/ID {:.4}",
                r.false_over_true, r.ood_over_id
            ),
            None => write!(f, "  MI ratios n/a (a group is empty)"),
        }
    }
}

/// Reads a scored-sample CSV. The header must match
/// [`ScoredRow::CSV_HEADER`] exactly; `confidence` is not stored and reads
/// back as NaN.
pub fn read_scored_csv<R: Read>(reader: R) -> Result<Vec<ScoredRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            column: "*".into(),
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let expected: Vec<&str> = ScoredRow::CSV_HEADER.split(',').collect();
    if header != expected {
        return Err(Error::InconsistentShape(format!(
            "scored CSV columns [{}] differ from [{}]",
            header.join(","),
            ScoredRow::CSV_HEADER
        )));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            column: "*".into(),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let real = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|e| Error::Parse {
                line,
                column: expected[i].to_string(),
                message: format!("cannot parse `{}`: {e}", &rec[i]),
            })
        };
        let count = |i: usize| -> Result<usize> {
            rec[i].parse::<usize>().map_err(|e| Error::Parse {
                line,
                column: expected[i].to_string(),
                message: format!("cannot parse `{}`: {e}", &rec[i]),
            })
        };
        rows.push(ScoredRow {
            sample_id: rec[0].to_string(),
            label: if rec[1].is_empty() {
                None
            } else {
                Some(count(1)?)
            },
            pred: count(2)?,
            domain: rec[3].parse().map_err(|e: String| Error::Parse {
                line,
                column: "domain".into(),
                message: e.to_string(),
            })?,
            mi: real(4)?,
            ekl: real(5)?,
            var: real(6)?,
            entropy: real(7)?,
            energy_mean: real(8)?,
            energy_var: real(9)?,
            combined: real(10)?,
            confidence: f64::NAN,
        });
    }
    Ok(rows)
}

pub fn write_scored_csv<W: Write>(rows: &[ScoredRow], mut w: W) -> Result<()> {
    writeln!(w, "{}", ScoredRow::CSV_HEADER)?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

/// One model's line in the side-by-side comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub model: String,
    pub score: ScoreKind,
    pub id_accuracy: f64,
    pub fpr95_id: f64,
    pub fpr95_ood: f64,
    pub auroc: f64,
    pub aupr_id: f64,
    pub aupr_ood: f64,
    /// NaN when a group is empty.
    pub mi_false_over_true: f64,
    pub mi_ood_over_id: f64,
}

impl ComparisonRow {
    pub const CSV_HEADER: &'static str =
        "model,score,id_acc,fpr95_id,fpr95_ood,auroc,aupr_id,aupr_ood,mi_ratio_ft,mi_ratio_ood_id";

    pub fn from_rows(model: &str, rows: &[ScoredRow], kind: ScoreKind) -> Result<Self> {
        let id: Vec<&ScoredRow> = rows.iter().filter(|r| r.domain == Domain::Id).collect();
        let ood: Vec<&ScoredRow> = rows.iter().filter(|r| r.domain == Domain::Ood).collect();
        let p = ScopedRows::populations(&id, &ood, kind)?;
        let correct: Vec<f64> = id
            .iter()
            .filter(|r| r.is_correct() == Some(true))
            .map(|r| r.mi)
            .collect();
        let wrong: Vec<f64> = id
            .iter()
            .filter(|r| r.is_correct() == Some(false))
            .map(|r| r.mi)
            .collect();
        let labelled = correct.len() + wrong.len();
        let ood_mi: Vec<f64> = ood.iter().map(|r| r.mi).collect();
        let ratios = mi_ratio_report(&correct, &wrong, &ood_mi).ok();
        Ok(ComparisonRow {
            model: model.to_string(),
            score: kind,
            id_accuracy: if labelled == 0 {
                f64::NAN
            } else {
                correct.len() as f64 / labelled as f64
            },
            fpr95_id: fpr_at_tpr(&p, Positive::Id, 0.95)?,
            fpr95_ood: fpr_at_tpr(&p, Positive::Ood, 0.95)?,
            auroc: auroc(&p),
            aupr_id: aupr(&p, Positive::Id),
            aupr_ood: aupr(&p, Positive::Ood),
            mi_false_over_true: ratios.as_ref().map_or(f64::NAN, |r| r.false_over_true),
            mi_ood_over_id: ratios.as_ref().map_or(f64::NAN, |r| r.ood_over_id),
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.model,
            self.score.as_str(),
            self.id_accuracy,
            self.fpr95_id,
            self.fpr95_ood,
            self.auroc,
            self.aupr_id,
            self.aupr_ood,
            self.mi_false_over_true,
            self.mi_ood_over_id
        )
    }
}

struct ScopedRows;

impl ScopedRows {
    fn populations(
        id: &[&ScoredRow],
        ood: &[&ScoredRow],
        kind: ScoreKind,
    ) -> Result<ScoredPopulations> {
        ScoredPopulations::new(
            id.iter().map(|r| r.score(kind)).collect(),
            ood.iter().map(|r| r.score(kind)).collect(),
        )
    }
}

/// Fixed-width text table of comparison rows; rates in percent.
pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<width$}  {:>8}  {:>7}  {:>9}  {:>10}  {:>7}  {:>8}  {:>9}  {:>8}  {:>9}\n",
        "model",
        "score",
        "ID acc",
        "FPR95 ID",
        "FPR95 OOD",
        "AUROC",
        "AUPR ID",
        "AUPR OOD",
        "MI F/T",
        "MI OOD/ID"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<width$}  {:>8}  {:>7.2}  {:>9.2}  {:>10.2}  {:>7.2}  {:>8.2}  {:>9.2}  {:>8.3}  {:>9.3}\n",
            r.model,
            r.score.as_str(),
            100.0 * r.id_accuracy,
            100.0 * r.fpr95_id,
            100.0 * r.fpr95_ood,
            100.0 * r.auroc,
            100.0 * r.aupr_id,
            100.0 * r.aupr_ood,
            r.mi_false_over_true,
            r.mi_ood_over_id
        ));
    }
    out
}

/// Cell centres of a `resolution × resolution` grid, row-major from the top
/// row (`y` near `y_max`) down, so rows line up with image rows.
pub fn map_grid(cfg: &RunConfig) -> Result<Matrix> {
    let n = cfg.resolution;
    let dx = (cfg.x_max - cfg.x_min) / n as f64;
    let dy = (cfg.y_max - cfg.y_min) / n as f64;
    let mut data = Vec::with_capacity(2 * n * n);
    for r in 0..n {
        let y = cfg.y_max - (r as f64 + 0.5) * dy;
        for c in 0..n {
            data.push(cfg.x_min + (c as f64 + 0.5) * dx);
            data.push(y);
        }
    }
    Matrix::new(n * n, 2, data)
}

/// Uncertainty maps over a planar grid; larger values mean more uncertain.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMaps {
    pub points: Matrix,
    /// Mutual information.
    pub aleatoric: Vec<f64>,
    /// `|mean energy|`.
    pub epistemic: Vec<f64>,
    /// `Σ w − combined score`, the combined score mirrored into uncertainty.
    pub combined: Vec<f64>,
    pub summaries: Vec<McSummary>,
}

pub fn uncertainty_maps(model: &MlpModel, cfg: &RunConfig) -> Result<UncertaintyMaps> {
    if model.input_dim() != 2 {
        return Err(Error::NonPlanarModel {
            dim: model.input_dim(),
        });
    }
    let points = map_grid(cfg)?;
    let summaries = mc_summaries(
        model,
        &points,
        cfg.mc_samples,
        &RngStream::new(cfg.seed, STREAM_MAP),
        cfg.parallel,
    )?;
    let weights = cfg.score_weights();
    let combined = combined_scores(&summaries, weights)?;
    let mut total = 0.0;
    if !combined.degenerate.contains(&ScoreComponent::Energy) {
        total += weights.energy;
    }
    if !combined.degenerate.contains(&ScoreComponent::MutualInfo) {
        total += weights.mutual_info;
    }
    Ok(UncertaintyMaps {
        aleatoric: summaries.iter().map(|s| s.mutual_info).collect(),
        epistemic: summaries.iter().map(|s| s.energy_mean.abs()).collect(),
        combined: combined.scores.iter().map(|c| total - c).collect(),
        points,
        summaries,
    })
}
