//! Run configuration: a flat `key = value` file with `#` comments, named
//! presets, and command-line overrides. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mcdropout::ScoreWeights;
use crate::mlp::{ClassLoss, Schedule, TrainConfig};
use crate::vos::{EnergyConvention, VosConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreKind {
    /// `−|mean energy|`
    Energy,
    /// `−MI`
    MutualInfo,
    /// Min-max combination of the two.
    Combined,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Energy => "energy",
            ScoreKind::MutualInfo => "mi",
            ScoreKind::Combined => "combined",
        }
    }
}

impl FromStr for ScoreKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "energy" => Ok(ScoreKind::Energy),
            "mi" => Ok(ScoreKind::MutualInfo),
            "combined" => Ok(ScoreKind::Combined),
            _ => Err("expected energy, mi or combined".into()),
        }
    }
}

pub const PRESETS: [&str; 4] = ["toy-baseline", "toy-vos", "toy-ln-vos", "toy-mc10-ln-vos"];

/// Every setting a command can use. Field defaults are listed in
/// [`RunConfig::KEYS`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub data_seed: u64,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: String,
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: String,
    pub tau: f64,
    pub beta: f64,

    pub hidden: Vec<usize>,
    pub dropout: f64,

    pub vos: bool,
    pub n_candidates: usize,
    pub bank_capacity: usize,
    pub energy_momentum: f64,
    pub energy_floor: f64,
    pub warmup_epochs: usize,
    pub energy_convention: EnergyConvention,

    pub per_class: usize,
    pub split: f64,
    pub ood_count: usize,
    pub ood_half_width: f64,
    pub ood_exclusion: f64,
    pub train_data: Option<PathBuf>,
    pub id_data: Option<PathBuf>,
    pub ood_data: Option<PathBuf>,
    pub logits: Option<PathBuf>,

    pub mc_samples: usize,
    pub parallel: bool,
    pub score: ScoreKind,
    pub w_mi: f64,
    pub w_energy: f64,
    pub bins: usize,
    pub ece_bins: usize,

    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: usize,

    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: "none".into(),
            seed: 0,
            data_seed: 0,
            epochs: 100,
            batch_size: 128,
            lr: 0.1,
            schedule: "cosine".into(),
            milestones: vec![80, 140],
            lr_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            loss: "ce".into(),
            tau: 0.04,
            beta: 0.1,
            hidden: vec![64, 64],
            dropout: 0.1,
            vos: false,
            n_candidates: 10_000,
            bank_capacity: 1000,
            energy_momentum: 0.99,
            energy_floor: 1e-6,
            warmup_epochs: 10,
            energy_convention: EnergyConvention::default(),
            per_class: 500,
            split: 0.8,
            ood_count: 1000,
            ood_half_width: 10.0,
            ood_exclusion: 3.0,
            train_data: None,
            id_data: None,
            ood_data: None,
            logits: None,
            mc_samples: 10,
            parallel: true,
            score: ScoreKind::Energy,
            w_mi: 0.5,
            w_energy: 0.5,
            bins: 30,
            ece_bins: 15,
            x_min: -10.0,
            x_max: 10.0,
            y_min: -10.0,
            y_max: 10.0,
            resolution: 100,
            out_dir: PathBuf::from("out"),
            checkpoint: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::Config {
        key: key.to_string(),
        message: format!("cannot parse `{value}`: {e}"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config {
            key: key.into(),
            message: format!("expected a boolean, got `{value}`"),
        }),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
            key: format!("line {}", n + 1),
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn read_config_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config {
        key: "config".into(),
        message: format!("cannot read {}: {e}", path.display()),
    })
}

fn list_str(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    /// Recognized keys with a one-line description, in file order.
    pub const KEYS: &'static [(&'static str, &'static str)] = &[
        ("preset", "named preset applied before other keys (none)"),
        ("seed", "training and inference seed (0)"),
        (
            "data_seed",
            "seed for toy data generation and splitting (0)",
        ),
        ("epochs", "training epochs (100)"),
        ("batch_size", "mini-batch size (128)"),
        ("lr", "initial learning rate (0.1)"),
        ("schedule", "cosine | step (cosine)"),
        ("milestones", "step-schedule epochs (80,140)"),
        ("lr_factor", "step-schedule factor (0.1)"),
        ("momentum", "SGD momentum (0.9)"),
        ("weight_decay", "SGD weight decay (5e-4)"),
        ("loss", "ce | logit-norm (ce)"),
        ("tau", "logit-norm temperature (0.04)"),
        ("beta", "uncertainty loss weight (0.1)"),
        ("hidden", "hidden layer widths (64,64)"),
        ("dropout", "dropout rate on hidden layers (0.1)"),
        ("vos", "enable virtual outlier synthesis (false)"),
        ("n_candidates", "candidates per class per draw (10000)"),
        ("bank_capacity", "features banked per class (1000)"),
        ("energy_momentum", "running energy mean momentum (0.99)"),
        ("energy_floor", "floor on |E| in the scaled energy (1e-6)"),
        ("warmup_epochs", "epochs before VOS activates (10)"),
        (
            "energy_convention",
            "inverse: log(|E|/|mu|) | ratio: log(|mu|/|E|) (inverse)",
        ),
        ("per_class", "toy samples per class (500)"),
        ("split", "training fraction (0.8)"),
        ("ood_count", "toy background OOD points (1000)"),
        ("ood_half_width", "half width of the OOD box (10)"),
        (
            "ood_exclusion",
            "OOD points stay outside this many sigmas (3)",
        ),
        (
            "train_data",
            "feature CSV for training, toy data if none (none)",
        ),
        ("id_data", "feature CSV of ID evaluation inputs (none)"),
        ("ood_data", "feature CSV of OOD evaluation inputs (none)"),
        (
            "logits",
            "logit dump CSV evaluated instead of a model (none)",
        ),
        ("mc_samples", "MC dropout passes T (10)"),
        ("parallel", "run MC passes on the thread pool (true)"),
        ("score", "energy | mi | combined (energy)"),
        ("w_mi", "combined score MI weight (0.5)"),
        ("w_energy", "combined score energy weight (0.5)"),
        ("bins", "histogram bins (30)"),
        ("ece_bins", "calibration bins (15)"),
        ("x_min", "map lower x bound (-10)"),
        ("x_max", "map upper x bound (10)"),
        ("y_min", "map lower y bound (-10)"),
        ("y_max", "map upper y bound (10)"),
        ("resolution", "map cells per axis (100)"),
        ("out_dir", "output directory (out)"),
        (
            "checkpoint",
            "model checkpoint, <out_dir>/model.ckpt if none (none)",
        ),
    ];

    pub fn preset(name: &str) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        c.apply_preset(name)?;
        Ok(c)
    }

    fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "none" => {}
            "toy-baseline" => {
                self.loss = "ce".into();
                self.vos = false;
                self.schedule = "cosine".into();
                self.epochs = 100;
                self.mc_samples = 1;
            }
            "toy-vos" => {
                self.loss = "ce".into();
                self.vos = true;
                self.schedule = "cosine".into();
                self.epochs = 100;
                self.mc_samples = 1;
            }
            "toy-ln-vos" | "toy-mc10-ln-vos" => {
                self.loss = "logit-norm".into();
                self.vos = true;
                self.schedule = "step".into();
                self.milestones = vec![80, 140];
                self.lr_factor = 0.1;
                self.epochs = 200;
                self.mc_samples = if name == "toy-ln-vos" { 1 } else { 10 };
            }
            other => {
                return Err(Error::Config {
                    key: "preset".into(),
                    message: format!("unknown preset `{other}`, expected one of {PRESETS:?}"),
                })
            }
        }
        self.preset = name.to_string();
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "preset" => self.apply_preset(v)?,
            "seed" => self.seed = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "schedule" => self.schedule = v.to_string(),
            "milestones" => self.milestones = parse_list(key, v)?,
            "lr_factor" => self.lr_factor = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "loss" => self.loss = v.to_string(),
            "tau" => self.tau = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "hidden" => self.hidden = parse_list(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "vos" => self.vos = parse_bool(key, v)?,
            "n_candidates" => self.n_candidates = parse(key, v)?,
            "bank_capacity" => self.bank_capacity = parse(key, v)?,
            "energy_momentum" => self.energy_momentum = parse(key, v)?,
            "energy_floor" => self.energy_floor = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "energy_convention" => self.energy_convention = parse(key, v)?,
            "per_class" => self.per_class = parse(key, v)?,
            "split" => self.split = parse(key, v)?,
            "ood_count" => self.ood_count = parse(key, v)?,
            "ood_half_width" => self.ood_half_width = parse(key, v)?,
            "ood_exclusion" => self.ood_exclusion = parse(key, v)?,
            "train_data" => self.train_data = parse_path(v),
            "id_data" => self.id_data = parse_path(v),
            "ood_data" => self.ood_data = parse_path(v),
            "logits" => self.logits = parse_path(v),
            "mc_samples" => self.mc_samples = parse(key, v)?,
            "parallel" => self.parallel = parse_bool(key, v)?,
            "score" => self.score = parse(key, v)?,
            "w_mi" => self.w_mi = parse(key, v)?,
            "w_energy" => self.w_energy = parse(key, v)?,
            "bins" => self.bins = parse(key, v)?,
            "ece_bins" => self.ece_bins = parse(key, v)?,
            "x_min" => self.x_min = parse(key, v)?,
            "x_max" => self.x_max = parse(key, v)?,
            "y_min" => self.y_min = parse(key, v)?,
            "y_max" => self.y_max = parse(key, v)?,
            "resolution" => self.resolution = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = parse_path(v),
            _ => {
                return Err(Error::Config {
                    key: key.to_string(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines. A `preset` key is applied first wherever
    /// it appears so later keys override it.
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        RunConfig::resolve(Some(text), &[])
    }

    /// Builds a config from an optional file body plus overrides. The last
    /// preset named (overrides win over the file) is applied first, then
    /// file keys, then overrides.
    pub fn resolve(file: Option<&str>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let file_pairs = match file {
            Some(text) => parse_pairs(text)?,
            None => Vec::new(),
        };
        let mut cfg = RunConfig::default();
        let preset = file_pairs
            .iter()
            .chain(overrides)
            .rfind(|(k, _)| k == "preset");
        if let Some((k, v)) = preset {
            cfg.set(k, v)?;
        }
        for (k, v) in file_pairs.iter().chain(overrides) {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::parse_str(&read_config_file(path)?)
    }

    /// Every key with its resolved value; parsing the output gives back an
    /// equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in Self::KEYS {
            let value = match *key {
                "preset" => self.preset.clone(),
                "seed" => self.seed.to_string(),
                "data_seed" => self.data_seed.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "lr" => self.lr.to_string(),
                "schedule" => self.schedule.clone(),
                "milestones" => list_str(&self.milestones),
                "lr_factor" => self.lr_factor.to_string(),
                "momentum" => self.momentum.to_string(),
                "weight_decay" => self.weight_decay.to_string(),
                "loss" => self.loss.clone(),
                "tau" => self.tau.to_string(),
                "beta" => self.beta.to_string(),
                "hidden" => list_str(&self.hidden),
                "dropout" => self.dropout.to_string(),
                "vos" => self.vos.to_string(),
                "n_candidates" => self.n_candidates.to_string(),
                "bank_capacity" => self.bank_capacity.to_string(),
                "energy_momentum" => self.energy_momentum.to_string(),
                "energy_floor" => self.energy_floor.to_string(),
                "warmup_epochs" => self.warmup_epochs.to_string(),
                "energy_convention" => self.energy_convention.as_str().to_string(),
                "per_class" => self.per_class.to_string(),
                "split" => self.split.to_string(),
                "ood_count" => self.ood_count.to_string(),
                "ood_half_width" => self.ood_half_width.to_string(),
                "ood_exclusion" => self.ood_exclusion.to_string(),
                "train_data" => path_str(&self.train_data),
                "id_data" => path_str(&self.id_data),
                "ood_data" => path_str(&self.ood_data),
                "logits" => path_str(&self.logits),
                "mc_samples" => self.mc_samples.to_string(),
                "parallel" => self.parallel.to_string(),
                "score" => self.score.as_str().to_string(),
                "w_mi" => self.w_mi.to_string(),
                "w_energy" => self.w_energy.to_string(),
                "bins" => self.bins.to_string(),
                "ece_bins" => self.ece_bins.to_string(),
                "x_min" => self.x_min.to_string(),
                "x_max" => self.x_max.to_string(),
                "y_min" => self.y_min.to_string(),
                "y_max" => self.y_max.to_string(),
                "resolution" => self.resolution.to_string(),
                "out_dir" => self.out_dir.display().to_string(),
                "checkpoint" => path_str(&self.checkpoint),
                _ => unreachable!("every key is listed"),
            };
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if !(self.tau > 0.0) {
            return bad("tau", "must be positive");
        }
        if !(self.beta >= 0.0) {
            return bad("beta", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.energy_momentum) {
            return bad("energy_momentum", "must be in [0, 1)");
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return bad("split", "must be in (0, 1)");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples", "must be at least 1");
        }
        if self.n_candidates == 0 {
            return bad("n_candidates", "must be positive");
        }
        if !matches!(self.schedule.as_str(), "cosine" | "step") {
            return bad("schedule", "expected cosine or step");
        }
        if !matches!(self.loss.as_str(), "ce" | "logit-norm") {
            return bad("loss", "expected ce or logit-norm");
        }
        if self.hidden.is_empty() {
            return bad("hidden", "need at least one hidden layer");
        }
        if self.resolution == 0 {
            return bad("resolution", "must be positive");
        }
        if !(self.x_max >= self.x_min && self.y_max >= self.y_min) {
            return bad("x_max", "map bounds are inverted");
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            schedule: match self.schedule.as_str() {
                "step" => Schedule::Step {
                    milestones: self.milestones.clone(),
                    factor: self.lr_factor,
                },
                _ => Schedule::Cosine,
            },
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            loss: match self.loss.as_str() {
                "logit-norm" => ClassLoss::LogitNorm { tau: self.tau },
                _ => ClassLoss::CrossEntropy,
            },
            beta: if self.vos { self.beta } else { 0.0 },
            seed: self.seed,
        }
    }

    pub fn vos_config(&self) -> Option<VosConfig> {
        self.vos.then_some(VosConfig {
            n_candidates: self.n_candidates,
            bank_capacity: self.bank_capacity,
            energy_momentum: self.energy_momentum,
            energy_floor: self.energy_floor,
            warmup_epochs: self.warmup_epochs,
            convention: self.energy_convention,
        })
    }

    pub fn score_weights(&self) -> ScoreWeights {
        ScoreWeights {
            mutual_info: self.w_mi,
            energy: self.w_energy,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides_preset() {
        let cfg =
            RunConfig::parse_str("# toy run\nepochs = 5   # short\npreset = toy-ln-vos\nseed=7\n")
                .unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.loss, "logit-norm");
        assert_eq!(cfg.seed, 7);
        assert!(cfg.vos);
    }

    #[test]
    fn overrides_beat_file_and_presets_apply_first() {
        let file = "preset = toy-vos\nepochs = 7\nlr = 0.2\n";
        let over = vec![
            ("lr".to_string(), "0.3".to_string()),
            ("preset".to_string(), "toy-ln-vos".to_string()),
        ];
        let cfg = RunConfig::resolve(Some(file), &over).unwrap();
        assert_eq!(cfg.preset, "toy-ln-vos");
        assert_eq!(cfg.loss, "logit-norm");
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.lr, 0.3);
    }

    #[test]
    fn unknown_key_is_an_error() {
        match RunConfig::parse_str("learning_rate = 0.1\n") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "learning_rate"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(RunConfig::parse_str("just text\n").is_err());
        assert!(RunConfig::parse_str("preset = toy-huge\n").is_err());
    }

    #[test]
    fn resolved_text_round_trips() {
        for preset in PRESETS {
            let mut cfg = RunConfig::preset(preset).unwrap();
            cfg.seed = 11;
            cfg.ood_data = Some(PathBuf::from("dir/ood.csv"));
            cfg.lr = 0.037;
            let again = RunConfig::parse_str(&cfg.to_text()).unwrap();
            assert_eq!(cfg, again);
        }
    }

    #[test]
    fn keys_table_covers_every_setter() {
        let mut cfg = RunConfig::default();
        let text = cfg.to_text();
        for line in text.lines() {
            let (k, v) = line.split_once(" = ").unwrap();
            cfg.set(k, v).unwrap();
        }
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
    }

    #[test]
    fn presets_map_onto_training_settings() {
        let ln = RunConfig::preset("toy-mc10-ln-vos").unwrap();
        let t = ln.train_config();
        assert_eq!(t.epochs, 200);
        assert_eq!(t.loss, ClassLoss::LogitNorm { tau: 0.04 });
        assert_eq!(ln.mc_samples, 10);
        assert!(ln.vos_config().is_some());
        let base = RunConfig::preset("toy-baseline").unwrap();
        assert_eq!(base.train_config().beta, 0.0);
        assert!(base.vos_config().is_none());
    }
}
