//! The `mcvos` command line.
//!
//! Exit codes: 0 on success, 2 for usage and configuration errors, 3 for
//! data, shape and file errors.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{read_config_file, RunConfig, ScoreKind};
use crate::dataset::{
    load_csv, load_points, split, write_features_csv, write_points_csv, CsvData, LabeledDataset,
};
use crate::error::Error;
use crate::experiment::{
    comparison_table, evaluate_rows, read_scored_csv, score_dump, score_model, toy_data,
    train_model, uncertainty_maps, write_scored_csv, ComparisonRow,
};
use crate::mcdropout::ScoreComponent;
use crate::metrics::MetricReport;
use crate::mlp::EpochLog;
use crate::numerics::{Matrix, RngStream};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "mcvos",
    version,
    about = "MC-Dropout and virtual-outlier uncertainty: train, evaluate, map and compare"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes model.ckpt, train_log.csv and config.resolved.
    Train(TrainArgs),
    /// Score ID and OOD inputs with a checkpoint or a logit dump.
    Eval(EvalArgs),
    /// Aleatoric, epistemic and combined uncertainty over a planar grid.
    Map(MapArgs),
    /// Side-by-side comparison of scored-sample CSVs.
    Report(ReportArgs),
    /// Print the resolved configuration, or every key with `--keys`.
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Key-value config file (`key = value`, `#` comments).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Named preset applied before all other keys.
    #[arg(long)]
    preset: Option<String>,
    /// Override any config key; repeatable, later wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    epochs: Option<usize>,
    /// Labeled feature CSV to split and train on instead of the toy clusters.
    #[arg(long, value_name = "PATH")]
    train_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Labeled ID feature CSV (default: regenerated toy test split).
    #[arg(long, value_name = "PATH")]
    id_data: Option<PathBuf>,
    /// OOD point CSV (default: regenerated toy background).
    #[arg(long, value_name = "PATH")]
    ood_data: Option<PathBuf>,
    /// Logit dump to aggregate instead of running a model.
    #[arg(long, value_name = "PATH")]
    logits: Option<PathBuf>,
    #[arg(long, value_name = "T")]
    mc_samples: Option<usize>,
    /// energy, mi or combined.
    #[arg(long)]
    score: Option<String>,
}

#[derive(Debug, Args)]
struct MapArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Grid bounds as `x_min,x_max,y_min,y_max`.
    #[arg(long, value_name = "X0,X1,Y0,Y1", allow_hyphen_values = true)]
    bounds: Option<String>,
    #[arg(long, value_name = "T")]
    mc_samples: Option<usize>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Scored-sample CSVs written by `eval`.
    #[arg(required = true, num_args = 1.., value_name = "SCORED_CSV")]
    files: Vec<PathBuf>,
    /// Row names, one per file in order (default: file paths).
    #[arg(long = "name")]
    names: Vec<String>,
    /// energy, mi or combined.
    #[arg(long, default_value = "energy")]
    score: String,
    #[arg(long, value_name = "DIR", default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    #[command(flatten)]
    common: Common,
    /// List every key with its description and default.
    #[arg(long)]
    keys: bool,
}

/// A failed command: an exit code plus the message printed to stderr.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

/// Tags an error with the file it came from.
fn at(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| Failure {
        code: exit_code(&e),
        message: format!("{}: {e}", path.display()),
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Map(a) => cmd_map(a),
        Command::Report(a) => cmd_report(a),
        Command::Config(a) => cmd_config(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn path_value(p: &Path) -> String {
    p.display().to_string()
}

/// Resolves the config: file, then dedicated flags in `extra`, then `--set`.
fn resolve(common: &Common, extra: Vec<(&str, String)>) -> Result<RunConfig, Failure> {
    let text = match &common.config {
        Some(p) => Some(read_config_file(p)?),
        None => None,
    };
    let mut overrides: Vec<(String, String)> = Vec::new();
    if let Some(p) = &common.preset {
        overrides.push(("preset".into(), p.clone()));
    }
    if let Some(s) = common.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(d) = &common.out_dir {
        overrides.push(("out_dir".into(), path_value(d)));
    }
    overrides.extend(extra.into_iter().map(|(k, v)| (k.to_string(), v)));
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(RunConfig::resolve(text.as_deref(), &overrides)?)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, Failure> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| at(dir)(Error::Io(e)))?;
        }
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| at(path)(Error::Io(e)))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|()| w.flush())
        .map_err(|e| at(path)(Error::Io(e)))
}

fn write_with(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<fs::File>) -> crate::Result<()>,
) -> Outcome {
    let mut w = create(path)?;
    f(&mut w).map_err(at(path))?;
    w.flush().map_err(|e| at(path)(Error::Io(e)))
}

fn load_labeled(path: &Path) -> Result<LabeledDataset, Failure> {
    match load_csv(path).map_err(at(path))? {
        CsvData::Features(ds) => Ok(ds),
        CsvData::Logits(_) => Err(at(path)(Error::InconsistentShape(
            "expected a labeled feature CSV, found a logit dump".into(),
        ))),
    }
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let mut extra = Vec::new();
    if let Some(e) = a.epochs {
        extra.push(("epochs", e.to_string()));
    }
    if let Some(p) = &a.train_data {
        extra.push(("train_data", path_value(p)));
    }
    let cfg = resolve(&a.common, extra)?;
    let out = cfg.out_dir.clone();
    let train = match &cfg.train_data {
        Some(path) => {
            let all = load_labeled(path)?;
            let parts =
                split(&all, cfg.split, &mut RngStream::new(cfg.data_seed, 11)).map_err(at(path))?;
            let test = all.subset(&parts.test)?;
            write_with(&out.join("test.csv"), |w| write_features_csv(&test, w))?;
            all.subset(&parts.train)?
        }
        None => {
            let toy = toy_data(&cfg)?;
            write_with(&out.join("train.csv"), |w| {
                write_features_csv(&toy.train, w)
            })?;
            write_with(&out.join("test.csv"), |w| write_features_csv(&toy.test, w))?;
            write_with(&out.join("ood.csv"), |w| write_points_csv(&toy.ood, w))?;
            toy.train
        }
    };
    let trained = train_model(&cfg, &train)?;
    let tc = cfg.train_config();
    let ckpt = Checkpoint {
        model: trained.model,
        loss: tc.loss,
        tau: cfg.tau,
        beta: tc.beta,
        seed: cfg.seed,
        vos: trained.vos,
    };
    let ckpt_path = cfg.checkpoint_path();
    write_with(&ckpt_path, |w| ckpt.write(w))?;
    write_with(&out.join("train_log.csv"), |w| {
        writeln!(w, "{}", EpochLog::CSV_HEADER)?;
        for log in &trained.logs {
            writeln!(w, "{}", log.csv_row())?;
        }
        Ok(())
    })?;
    write_text(&out.join("config.resolved"), &cfg.to_text())?;
    match trained.logs.last() {
        Some(l) => println!(
            "trained {} epochs: loss {:.4}, accuracy {:.4}; checkpoint {}",
            trained.logs.len(),
            l.total_loss,
            l.accuracy,
            ckpt_path.display()
        ),
        None => println!(
            "0 epochs: checkpoint {} holds the initialization",
            ckpt_path.display()
        ),
    }
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint, Failure> {
    let path = cfg.checkpoint_path();
    Checkpoint::load(&path).map_err(at(&path))
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    let mut extra = Vec::new();
    for (key, p) in [
        ("checkpoint", &a.checkpoint),
        ("id_data", &a.id_data),
        ("ood_data", &a.ood_data),
        ("logits", &a.logits),
    ] {
        if let Some(p) = p {
            extra.push((key, path_value(p)));
        }
    }
    if let Some(t) = a.mc_samples {
        extra.push(("mc_samples", t.to_string()));
    }
    if let Some(s) = &a.score {
        extra.push(("score", s.clone()));
    }
    let cfg = resolve(&a.common, extra)?;
    let (name, (rows, degenerate)) = match &cfg.logits {
        Some(path) => {
            let dump = match load_csv(path).map_err(at(path))? {
                CsvData::Logits(d) => d,
                CsvData::Features(_) => {
                    return Err(at(path)(Error::InconsistentShape(
                        "expected a logit dump, found a feature CSV".into(),
                    )))
                }
            };
            let name = path.file_stem().map_or_else(
                || "logits".to_string(),
                |s| s.to_string_lossy().into_owned(),
            );
            (name, score_dump(&dump, &cfg).map_err(at(path))?)
        }
        None => {
            let ckpt = load_checkpoint(&cfg)?;
            let toy = if cfg.id_data.is_none() || cfg.ood_data.is_none() {
                Some(toy_data(&cfg)?)
            } else {
                None
            };
            let id = match (&cfg.id_data, &toy) {
                (Some(p), _) => load_labeled(p)?,
                (None, Some(t)) => t.test.clone(),
                (None, None) => unreachable!("toy data exists when id_data is unset"),
            };
            let ood: Matrix = match (&cfg.ood_data, &toy) {
                (Some(p), _) => load_points(p).map_err(at(p))?,
                (None, Some(t)) => t.ood.clone(),
                (None, None) => unreachable!("toy data exists when ood_data is unset"),
            };
            let classes = ckpt.model.num_classes();
            if let Some(&label) = id.labels().iter().find(|&&l| l >= classes) {
                return Err(Error::LabelOutOfRange { label, classes }.into());
            }
            let name = cfg
                .id_data
                .as_ref()
                .and_then(|p| p.file_stem())
                .map_or_else(|| "toy".to_string(), |s| s.to_string_lossy().into_owned());
            let ckpt_path = cfg.checkpoint_path();
            let scored = score_model(&ckpt.model, id.features(), Some(id.labels()), &ood, &cfg)
                .map_err(|e| {
                    at(&ckpt_path)(match e {
                        Error::DimensionMismatch { expected, found } => Error::InconsistentShape(
                            format!("model expects {expected} input features, data has {found}"),
                        ),
                        other => other,
                    })
                })?;
            (name, scored)
        }
    };
    let eval = evaluate_rows(&name, &rows, cfg.score, cfg.bins, cfg.ece_bins)?;
    let out = &cfg.out_dir;
    write_with(&out.join("scored.csv"), |w| write_scored_csv(&rows, w))?;
    write_text(
        &out.join("report.csv"),
        &format!("{}\n{}\n", MetricReport::CSV_HEADER, eval.metrics.csv_row()),
    )?;
    let mut text = format!("{eval}\n");
    for c in &degenerate {
        let which = match c {
            ScoreComponent::MutualInfo => "mutual information",
            ScoreComponent::Energy => "energy",
        };
        text.push_str(&format!(
            "  note: {which} is constant over the batch and dropped from the combined score\n"
        ));
    }
    write_text(&out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn parse_bounds(s: &str) -> Result<[f64; 4], Failure> {
    let bad = || {
        usage(format!(
            "--bounds expects x_min,x_max,y_min,y_max, got `{s}`"
        ))
    };
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    v.try_into().map_err(|_| bad())
}

/// Grayscale binary PGM; row 0 is the top of the image. Intensity is
/// `round(255·(v − min)/(max − min))`, and 0 everywhere for a constant map.
pub fn render_pgm(values: &[f64], width: usize, height: usize) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if span > 0.0 && span.is_finite() {
            (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

fn cmd_map(a: MapArgs) -> Outcome {
    let mut extra = Vec::new();
    if let Some(p) = &a.checkpoint {
        extra.push(("checkpoint", path_value(p)));
    }
    if let Some(r) = a.resolution {
        extra.push(("resolution", r.to_string()));
    }
    if let Some(t) = a.mc_samples {
        extra.push(("mc_samples", t.to_string()));
    }
    if let Some(b) = &a.bounds {
        let [x0, x1, y0, y1] = parse_bounds(b)?;
        extra.push(("x_min", x0.to_string()));
        extra.push(("x_max", x1.to_string()));
        extra.push(("y_min", y0.to_string()));
        extra.push(("y_max", y1.to_string()));
    }
    let cfg = resolve(&a.common, extra)?;
    let ckpt = load_checkpoint(&cfg)?;
    let maps = uncertainty_maps(&ckpt.model, &cfg).map_err(at(&cfg.checkpoint_path()))?;
    let n = cfg.resolution;
    for (name, values) in [
        ("aleatoric", &maps.aleatoric),
        ("epistemic", &maps.epistemic),
        ("combined", &maps.combined),
    ] {
        let csv_path = cfg.out_dir.join(format!("map_{name}.csv"));
        write_with(&csv_path, |w| {
            writeln!(w, "x,y,value")?;
            for (p, v) in maps.points.iter_rows().zip(values.iter()) {
                writeln!(w, "{},{},{}", p[0], p[1], v)?;
            }
            Ok(())
        })?;
        let pgm_path = cfg.out_dir.join(format!("map_{name}.pgm"));
        let bytes = render_pgm(values, n, n);
        write_with(&pgm_path, |w| Ok(w.write_all(&bytes)?))?;
        println!("wrote {} and {}", csv_path.display(), pgm_path.display());
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Outcome {
    if a.files.is_empty() {
        return Err(usage("report needs at least one scored CSV"));
    }
    if !a.names.is_empty() && a.names.len() != a.files.len() {
        return Err(usage(format!(
            "{} names given for {} files",
            a.names.len(),
            a.files.len()
        )));
    }
    let kind: ScoreKind = a
        .score
        .parse()
        .map_err(|e| usage(format!("--score: {e}")))?;
    let mut table = Vec::with_capacity(a.files.len());
    for (i, path) in a.files.iter().enumerate() {
        let file = fs::File::open(path).map_err(|e| at(path)(Error::Io(e)))?;
        let rows = read_scored_csv(file).map_err(at(path))?;
        let name = a.names.get(i).cloned().unwrap_or_else(|| path_value(path));
        table.push(ComparisonRow::from_rows(&name, &rows, kind).map_err(at(path))?);
    }
    let mut csv = format!("{}\n", ComparisonRow::CSV_HEADER);
    for r in &table {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    let text = comparison_table(&table);
    write_text(&a.out_dir.join("comparison.csv"), &csv)?;
    write_text(&a.out_dir.join("comparison.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_config(a: ConfigArgs) -> Outcome {
    if a.keys {
        for (k, d) in RunConfig::KEYS {
            println!("{k:<18} {d}");
        }
        return Ok(());
    }
    print!("{}", resolve(&a.common, Vec::new())?.to_text());
    Ok(())
}
