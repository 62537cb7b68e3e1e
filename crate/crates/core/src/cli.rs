//! Config-driven commands: teacher pre-training, distillation, report
//! generation, and the numeric self-check suite. All randomness flows from
//! one seed through named sub-streams, so any stage can be reproduced in
//! isolation and identical configs give byte-identical outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bilevel::{
    alpha_dump_to_tsv, alpha_records, hypergrad_oracle_check, train_distill, train_plain_ce,
    triplet_dump_to_tsv, AlphaDumpRow, DistillSettings, HypergradMode, ScalarBilevelToy,
    TrainSettings, TripletDumpRow,
};
use crate::data::{
    inject_gaussian_outliers, load_delimited, min_max_normalize, oversample_minority, split,
    synth_gaussian_clusters, Dataset, DatasetSplits,
};
use crate::error::{Error, Result};
use crate::eval::{
    discrepancy_grouping, fusion_ratio_report, macro_auc, metric_report, ratio_histogram,
    MetricReport, PARTITIONS,
};
use crate::fusion::RatioPolicy;
use crate::geometry::{FeatureMode, PredictionTriplet};
use crate::numcore::grad_check;
use crate::numcore::io::{load_params, save_params};
use crate::numcore::loss::{ce_loss_class, kd_loss, softmax_temp};
use crate::numcore::net::{forward, init_params, Activation, ModelParams, OptimizerKind};
use crate::numcore::tensor::Tensor;

/// Derives the named sub-stream generator from the run seed.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in name.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Csv,
}

impl DataSource {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "synth" => Ok(DataSource::Synth),
            "csv" => Ok(DataSource::Csv),
            other => Err(Error::Config(format!(
                "unknown data_source {other:?} (expected synth or csv)"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            DataSource::Synth => "synth",
            DataSource::Csv => "csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommonCfg {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data_source: DataSource,
    pub csv_path: Option<PathBuf>,
    pub label_column: String,
    pub normalize: bool,
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub label_noise: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub oversample: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherCfg {
    pub hidden: Vec<usize>,
    pub epochs: u64,
    pub batch_size: usize,
    pub optimizer: String,
    pub momentum: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillCfg {
    pub teacher_file: Option<PathBuf>,
    pub student_hidden: Vec<usize>,
    pub epochs: u64,
    pub batch_size: usize,
    pub optimizer: String,
    pub momentum: f64,
    pub inner_lr: f64,
    pub outer_optimizer: String,
    pub outer_momentum: f64,
    pub outer_lr: f64,
    pub tau: f64,
    pub policy: String,
    pub alpha0: f64,
    pub anneal_horizon: u64,
    pub wls_gain: f64,
    pub fusion_hidden: usize,
    pub fusion_depth: usize,
    pub feature_mode: String,
    pub hypergrad: String,
    pub stop_grad_delta: bool,
    pub patience: usize,
    pub early_stopping: bool,
    pub alpha_dump_every: u64,
    pub snapshot_epoch: u64,
    pub outlier_frac: f64,
    pub omega_init: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeCfg {
    pub alpha_dump: Option<PathBuf>,
    pub triplet_dump: Option<PathBuf>,
}

/// Every knob of every command, resolvable from a config file plus
/// command-line overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub common: CommonCfg,
    pub teacher: TeacherCfg,
    pub distill: DistillCfg,
    pub analyze: AnalyzeCfg,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            common: CommonCfg {
                seed: 42,
                out_dir: PathBuf::from("runs/default"),
                data_source: DataSource::Synth,
                csv_path: None,
                label_column: "label".into(),
                normalize: true,
                classes: 3,
                dim: 16,
                per_class: 300,
                spread: 1.0,
                label_noise: 0.0,
                train_frac: 2.0 / 3.0,
                val_frac: 1.0 / 6.0,
                oversample: false,
            },
            teacher: TeacherCfg {
                hidden: vec![32, 32],
                epochs: 200,
                batch_size: 32,
                optimizer: "sgd".into(),
                momentum: 0.0,
                lr: 0.1,
            },
            distill: DistillCfg {
                teacher_file: None,
                student_hidden: vec![16],
                epochs: 150,
                batch_size: 32,
                optimizer: "sgd".into(),
                momentum: 0.0,
                inner_lr: 0.1,
                outer_optimizer: "sgd".into(),
                outer_momentum: 0.0,
                outer_lr: 0.05,
                tau: 2.0,
                policy: "tgeo".into(),
                alpha0: 0.5,
                anneal_horizon: 0,
                wls_gain: 1.0,
                fusion_hidden: 32,
                fusion_depth: 2,
                feature_mode: "r3".into(),
                hypergrad: "unrolled_fd".into(),
                stop_grad_delta: true,
                patience: 10,
                early_stopping: true,
                alpha_dump_every: 10,
                snapshot_epoch: 0,
                outlier_frac: 0.1,
                omega_init: "glorot".into(),
            },
            analyze: AnalyzeCfg {
                alpha_dump: None,
                triplet_dump: None,
            },
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")))
}

/// Plain float or an exact a/b fraction.
fn parse_f64(key: &str, v: &str) -> Result<f64> {
    if let Some((num, den)) = v.split_once('/') {
        let n: f64 = num
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{key}: bad fraction {v:?}")))?;
        let d: f64 = den
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{key}: bad fraction {v:?}")))?;
        if d == 0.0 {
            return Err(Error::Config(format!("{key}: zero denominator in {v:?}")));
        }
        return Ok(n / d);
    }
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got {v:?}")))
}

fn parse_hidden(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: bad layer width {s:?}")))
        })
        .collect()
}

fn fmt_hidden(h: &[usize]) -> String {
    if h.is_empty() {
        "none".into()
    } else {
        h.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn fmt_opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn parse_opt_path(v: &str) -> Option<PathBuf> {
    if v.is_empty() {
        None
    } else {
        Some(PathBuf::from(v))
    }
}

impl RunConfig {
    /// Applies one `section.key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (section, name) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("key {key:?} must look like section.name")))?;
        match (section, name) {
            ("common", "seed") => self.common.seed = parse_u64(key, v)?,
            ("common", "out_dir") => self.common.out_dir = PathBuf::from(v),
            ("common", "data_source") => self.common.data_source = DataSource::parse(v)?,
            ("common", "csv_path") => self.common.csv_path = parse_opt_path(v),
            ("common", "label_column") => self.common.label_column = v.to_string(),
            ("common", "normalize") => self.common.normalize = parse_bool(key, v)?,
            ("common", "classes") => self.common.classes = parse_usize(key, v)?,
            ("common", "dim") => self.common.dim = parse_usize(key, v)?,
            ("common", "per_class") => self.common.per_class = parse_usize(key, v)?,
            ("common", "spread") => self.common.spread = parse_f64(key, v)?,
            ("common", "label_noise") => self.common.label_noise = parse_f64(key, v)?,
            ("common", "train_frac") => self.common.train_frac = parse_f64(key, v)?,
            ("common", "val_frac") => self.common.val_frac = parse_f64(key, v)?,
            ("common", "oversample") => self.common.oversample = parse_bool(key, v)?,
            ("train-teacher", "hidden") => self.teacher.hidden = parse_hidden(key, v)?,
            ("train-teacher", "epochs") => self.teacher.epochs = parse_u64(key, v)?,
            ("train-teacher", "batch_size") => self.teacher.batch_size = parse_usize(key, v)?,
            ("train-teacher", "optimizer") => self.teacher.optimizer = v.to_string(),
            ("train-teacher", "momentum") => self.teacher.momentum = parse_f64(key, v)?,
            ("train-teacher", "lr") => self.teacher.lr = parse_f64(key, v)?,
            ("distill", "teacher_file") => self.distill.teacher_file = parse_opt_path(v),
            ("distill", "student_hidden") => self.distill.student_hidden = parse_hidden(key, v)?,
            ("distill", "epochs") => self.distill.epochs = parse_u64(key, v)?,
            ("distill", "batch_size") => self.distill.batch_size = parse_usize(key, v)?,
            ("distill", "optimizer") => self.distill.optimizer = v.to_string(),
            ("distill", "momentum") => self.distill.momentum = parse_f64(key, v)?,
            ("distill", "inner_lr") => self.distill.inner_lr = parse_f64(key, v)?,
            ("distill", "outer_optimizer") => self.distill.outer_optimizer = v.to_string(),
            ("distill", "outer_momentum") => self.distill.outer_momentum = parse_f64(key, v)?,
            ("distill", "outer_lr") => self.distill.outer_lr = parse_f64(key, v)?,
            ("distill", "tau") => self.distill.tau = parse_f64(key, v)?,
            ("distill", "policy") => self.distill.policy = v.to_string(),
            ("distill", "alpha0") => self.distill.alpha0 = parse_f64(key, v)?,
            ("distill", "anneal_horizon") => self.distill.anneal_horizon = parse_u64(key, v)?,
            ("distill", "wls_gain") => self.distill.wls_gain = parse_f64(key, v)?,
            ("distill", "fusion_hidden") => self.distill.fusion_hidden = parse_usize(key, v)?,
            ("distill", "fusion_depth") => self.distill.fusion_depth = parse_usize(key, v)?,
            ("distill", "feature_mode") => self.distill.feature_mode = v.to_string(),
            ("distill", "hypergrad") => self.distill.hypergrad = v.to_string(),
            ("distill", "stop_grad_delta") => self.distill.stop_grad_delta = parse_bool(key, v)?,
            ("distill", "patience") => self.distill.patience = parse_usize(key, v)?,
            ("distill", "early_stopping") => self.distill.early_stopping = parse_bool(key, v)?,
            ("distill", "alpha_dump_every") => self.distill.alpha_dump_every = parse_u64(key, v)?,
            ("distill", "snapshot_epoch") => self.distill.snapshot_epoch = parse_u64(key, v)?,
            ("distill", "outlier_frac") => self.distill.outlier_frac = parse_f64(key, v)?,
            ("distill", "omega_init") => self.distill.omega_init = v.to_string(),
            ("analyze", "alpha_dump") => self.analyze.alpha_dump = parse_opt_path(v),
            ("analyze", "triplet_dump") => self.analyze.triplet_dump = parse_opt_path(v),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses the sectioned key = value format; later assignments win.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                if !matches!(section.as_str(), "common" | "train-teacher" | "distill" | "analyze") {
                    return Err(Error::Config(format!(
                        "line {}: unknown section [{section}]",
                        ln + 1
                    )));
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {line:?}", ln + 1))
            })?;
            if section.is_empty() {
                return Err(Error::Config(format!(
                    "line {}: key before any [section]",
                    ln + 1
                )));
            }
            self.set(&format!("{section}.{}", key.trim()), value)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Fully-resolved text form; feeding it back reproduces this config.
    pub fn to_text(&self) -> String {
        let c = &self.common;
        let t = &self.teacher;
        let d = &self.distill;
        let a = &self.analyze;
        let mut s = String::new();
        let _ = write!(
            s,
            "[common]\n\
             seed = {}\n\
             out_dir = {}\n\
             data_source = {}\n\
             csv_path = {}\n\
             label_column = {}\n\
             normalize = {}\n\
             classes = {}\n\
             dim = {}\n\
             per_class = {}\n\
             spread = {}\n\
             label_noise = {}\n\
             train_frac = {}\n\
             val_frac = {}\n\
             oversample = {}\n\
             \n[train-teacher]\n\
             hidden = {}\n\
             epochs = {}\n\
             batch_size = {}\n\
             optimizer = {}\n\
             momentum = {}\n\
             lr = {}\n\
             \n[distill]\n\
             teacher_file = {}\n\
             student_hidden = {}\n\
             epochs = {}\n\
             batch_size = {}\n\
             optimizer = {}\n\
             momentum = {}\n\
             inner_lr = {}\n\
             outer_optimizer = {}\n\
             outer_momentum = {}\n\
             outer_lr = {}\n\
             tau = {}\n\
             policy = {}\n\
             alpha0 = {}\n\
             anneal_horizon = {}\n\
             wls_gain = {}\n\
             fusion_hidden = {}\n\
             fusion_depth = {}\n\
             feature_mode = {}\n\
             hypergrad = {}\n\
             stop_grad_delta = {}\n\
             patience = {}\n\
             early_stopping = {}\n\
             alpha_dump_every = {}\n\
             snapshot_epoch = {}\n\
             outlier_frac = {}\n\
             omega_init = {}\n\
             \n[analyze]\n\
             alpha_dump = {}\n\
             triplet_dump = {}\n",
            c.seed,
            c.out_dir.display(),
            c.data_source.name(),
            fmt_opt_path(&c.csv_path),
            c.label_column,
            c.normalize,
            c.classes,
            c.dim,
            c.per_class,
            c.spread,
            c.label_noise,
            c.train_frac,
            c.val_frac,
            c.oversample,
            fmt_hidden(&t.hidden),
            t.epochs,
            t.batch_size,
            t.optimizer,
            t.momentum,
            t.lr,
            fmt_opt_path(&d.teacher_file),
            fmt_hidden(&d.student_hidden),
            d.epochs,
            d.batch_size,
            d.optimizer,
            d.momentum,
            d.inner_lr,
            d.outer_optimizer,
            d.outer_momentum,
            d.outer_lr,
            d.tau,
            d.policy,
            d.alpha0,
            d.anneal_horizon,
            d.wls_gain,
            d.fusion_hidden,
            d.fusion_depth,
            d.feature_mode,
            d.hypergrad,
            d.stop_grad_delta,
            d.patience,
            d.early_stopping,
            d.alpha_dump_every,
            d.snapshot_epoch,
            d.outlier_frac,
            d.omega_init,
            fmt_opt_path(&a.alpha_dump),
            fmt_opt_path(&a.triplet_dump),
        );
        s
    }
}

fn optimizer_kind(name: &str, momentum: f64) -> Result<OptimizerKind> {
    match name {
        "sgd" => Ok(OptimizerKind::Sgd { momentum }),
        "adam" => Ok(OptimizerKind::adam_default()),
        other => Err(Error::Config(format!(
            "unknown optimizer {other:?} (expected sgd or adam)"
        ))),
    }
}

/// Builds the train/val/test splits a run uses, deterministically from the
/// config. Outlier injection is a distillation-stage concern and happens in
/// `cmd_distill`, not here.
pub fn build_splits(cfg: &RunConfig) -> Result<DatasetSplits> {
    let c = &cfg.common;
    let base = match c.data_source {
        DataSource::Synth => {
            let ds = synth_gaussian_clusters(
                c.classes,
                c.per_class,
                c.dim,
                c.spread,
                c.label_noise,
                &mut substream(c.seed, "data.synth"),
            )?;
            if c.normalize {
                min_max_normalize(&ds)
            } else {
                ds
            }
        }
        DataSource::Csv => {
            let path = c
                .csv_path
                .as_ref()
                .ok_or_else(|| Error::Config("csv data source needs common.csv_path".into()))?;
            load_delimited(path, &c.label_column, c.normalize)?
        }
    };
    let mut splits = split(&base, c.train_frac, c.val_frac, &mut substream(c.seed, "data.split"))?;
    if c.oversample {
        splits.train = oversample_minority(&splits.train, &mut substream(c.seed, "data.oversample"))?;
    }
    Ok(splits)
}

fn classifier_dims(input: usize, hidden: &[usize], classes: usize) -> (Vec<usize>, Vec<Activation>) {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(classes);
    let mut acts = vec![Activation::Relu; hidden.len()];
    acts.push(Activation::Identity);
    (dims, acts)
}

fn fusion_dims(input: usize, hidden: usize, depth: usize) -> Result<(Vec<usize>, Vec<Activation>)> {
    if !(1..=3).contains(&depth) {
        return Err(Error::Config(format!(
            "fusion_depth must be 1, 2, or 3, got {depth}"
        )));
    }
    let mut dims = vec![input];
    for _ in 0..depth - 1 {
        dims.push(hidden);
    }
    dims.push(1);
    let mut acts = vec![Activation::Relu; depth - 1];
    acts.push(Activation::Sigmoid);
    Ok((dims, acts))
}

fn write_metrics(path: &Path, rows: &[(&str, MetricReport)]) -> Result<()> {
    let mut out = String::from("split\tacc\tmacro_auc\tnll\tn\n");
    for (name, m) in rows {
        let _ = writeln!(out, "{name}\t{}\t{}\t{}\t{}", m.acc, m.macro_auc, m.nll, m.n);
    }
    fs::write(path, out)?;
    Ok(())
}

fn model_probs(model: &ModelParams, data: &Dataset) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(data.len() * data.classes);
    for i in 0..data.len() {
        let z = forward(model, data.sample(i))?;
        rows.extend(softmax_temp(&z, 1.0)?);
    }
    Tensor::from_vec(vec![data.len(), data.classes], rows)
}

#[derive(Debug)]
pub struct TeacherArtifacts {
    pub params_path: PathBuf,
    pub metrics: Vec<(String, MetricReport)>,
}

/// Trains the teacher on cross-entropy only and writes its parameters plus a
/// metric report per split.
pub fn cmd_train_teacher(cfg: &RunConfig) -> Result<TeacherArtifacts> {
    let splits = build_splits(cfg)?;
    let t = &cfg.teacher;
    let (dims, acts) = classifier_dims(splits.train.dim(), &t.hidden, splits.train.classes);
    let init = init_params(&dims, &acts, &mut substream(cfg.common.seed, "teacher.init"));
    let settings = TrainSettings {
        epochs: t.epochs,
        batch_size: t.batch_size,
        optimizer: optimizer_kind(&t.optimizer, t.momentum)?,
        lr: t.lr,
        patience: 10,
        early_stopping: false,
    };
    let (teacher, log) = train_plain_ce(
        init,
        &splits.train,
        &splits.val,
        &settings,
        &mut substream(cfg.common.seed, "teacher.batch"),
    )?;
    fs::create_dir_all(&cfg.common.out_dir)?;
    let params_path = cfg.common.out_dir.join("teacher.tgkd");
    save_params(&teacher, &params_path)?;
    fs::write(cfg.common.out_dir.join("teacher_log.tsv"), log.to_tsv())?;
    let mut metrics = Vec::new();
    for (name, ds) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        let probs = model_probs(&teacher, ds)?;
        metrics.push((name.to_string(), metric_report(&probs, &ds.labels)?));
    }
    let rows: Vec<(&str, MetricReport)> = metrics.iter().map(|(n, m)| (n.as_str(), *m)).collect();
    write_metrics(&cfg.common.out_dir.join("teacher_metrics.tsv"), &rows)?;
    Ok(TeacherArtifacts {
        params_path,
        metrics,
    })
}

fn build_policy(cfg: &RunConfig, classes: usize) -> Result<RatioPolicy> {
    let d = &cfg.distill;
    match d.policy.as_str() {
        "fixed" => crate::fusion::fixed_ratio(d.alpha0),
        "annealed" => Ok(RatioPolicy::Annealed {
            horizon: d.anneal_horizon,
        }),
        "class_wise" => Ok(RatioPolicy::ClassWise {
            class_accuracy: Vec::new(),
        }),
        "wls" => Ok(RatioPolicy::Wls { gain: d.wls_gain }),
        "tgeo" => {
            let mode = FeatureMode::parse(&d.feature_mode)?;
            let input = mode.feature_len(classes);
            let (dims, acts) = fusion_dims(input, d.fusion_hidden, d.fusion_depth)?;
            let mut omega = init_params(
                &dims,
                &acts,
                &mut substream(cfg.common.seed, "distill.fusion_init"),
            );
            match d.omega_init.as_str() {
                "glorot" => {}
                "zero" => {
                    for l in omega.layers.iter_mut() {
                        l.weight.as_mut_slice().fill(0.0);
                        l.bias.as_mut_slice().fill(0.0);
                    }
                }
                other => {
                    return Err(Error::Config(format!(
                        "unknown omega_init {other:?} (expected glorot or zero)"
                    )))
                }
            }
            Ok(RatioPolicy::Tgeo { omega, mode })
        }
        other => Err(Error::Config(format!(
            "unknown policy {other:?} (expected fixed, annealed, class_wise, wls, or tgeo)"
        ))),
    }
}

#[derive(Debug)]
pub struct DistillArtifacts {
    pub student_path: PathBuf,
    pub metrics: Vec<(String, MetricReport)>,
    pub best_epoch: Option<u64>,
    pub stopped_early: bool,
}

/// Runs the distillation loop against a pre-trained teacher and writes the
/// student, the training log, the per-sample ratio dump, and the triplet
/// snapshot.
pub fn cmd_distill(cfg: &RunConfig, teacher_file: Option<&Path>) -> Result<DistillArtifacts> {
    let splits = build_splits(cfg)?;
    let d = &cfg.distill;
    let teacher_path = teacher_file
        .map(Path::to_path_buf)
        .or_else(|| d.teacher_file.clone())
        .unwrap_or_else(|| cfg.common.out_dir.join("teacher.tgkd"));
    let teacher = load_params(&teacher_path)?;

    let mut train = splits.train;
    if d.outlier_frac > 0.0 {
        let count = (d.outlier_frac * train.len() as f64).round() as usize;
        train = inject_gaussian_outliers(
            &train,
            count,
            &mut substream(cfg.common.seed, "data.outliers"),
        )?;
    }

    let policy = build_policy(cfg, train.classes)?;
    let (dims, acts) = classifier_dims(train.dim(), &d.student_hidden, train.classes);
    let init = init_params(
        &dims,
        &acts,
        &mut substream(cfg.common.seed, "distill.student_init"),
    );
    let settings = DistillSettings {
        student: TrainSettings {
            epochs: d.epochs,
            batch_size: d.batch_size,
            optimizer: optimizer_kind(&d.optimizer, d.momentum)?,
            lr: d.inner_lr,
            patience: d.patience,
            early_stopping: d.early_stopping,
        },
        tau: d.tau,
        outer_optimizer: optimizer_kind(&d.outer_optimizer, d.outer_momentum)?,
        outer_lr: d.outer_lr,
        hypergrad: HypergradMode::parse(&d.hypergrad)?,
        stop_grad_delta: d.stop_grad_delta,
        alpha_dump_every: d.alpha_dump_every,
        snapshot_epoch: d.snapshot_epoch,
    };
    let out = train_distill(
        init,
        &policy,
        &teacher,
        &train,
        &splits.val,
        &settings,
        &mut substream(cfg.common.seed, "distill.batch"),
        &mut substream(cfg.common.seed, "distill.valbatch"),
    )?;

    let dir = &cfg.common.out_dir;
    fs::create_dir_all(dir)?;
    let student_path = dir.join("student.tgkd");
    save_params(&out.student, &student_path)?;
    save_params(&out.final_student, &dir.join("student_final.tgkd"))?;
    if let Some(omega) = &out.omega {
        save_params(omega, &dir.join("fusion_net.tgkd"))?;
    }
    fs::write(dir.join("train_log.tsv"), out.log.to_tsv())?;
    fs::write(dir.join("alpha_dump.tsv"), alpha_dump_to_tsv(&out.alpha_dump))?;
    fs::write(
        dir.join("triplet_dump.tsv"),
        triplet_dump_to_tsv(&out.triplet_dump),
    )?;
    let ctx = crate::bilevel::DistillContext::new(&teacher, &train, d.tau)?;
    if let Some(table) = &ctx.class_averages {
        table.save(&dir.join("class_averages.csv"))?;
    }

    let mut metrics = Vec::new();
    for (name, ds) in [("val", &splits.val), ("test", &splits.test)] {
        let probs = model_probs(&out.student, ds)?;
        metrics.push((name.to_string(), metric_report(&probs, &ds.labels)?));
    }
    let rows: Vec<(&str, MetricReport)> = metrics.iter().map(|(n, m)| (n.as_str(), *m)).collect();
    write_metrics(&dir.join("student_metrics.tsv"), &rows)?;
    Ok(DistillArtifacts {
        student_path,
        metrics,
        best_epoch: out.log.best_epoch,
        stopped_early: out.log.stopped_early,
    })
}

fn parse_alpha_dump(text: &str) -> Result<Vec<AlphaDumpRow>> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(Error::Data(format!(
                "alpha dump line {}: expected 6 fields, got {}",
                ln + 1,
                f.len()
            )));
        }
        let bad = |what: &str| Error::Data(format!("alpha dump line {}: bad {what}", ln + 1));
        rows.push(AlphaDumpRow {
            sample: f[0].parse().map_err(|_| bad("sample id"))?,
            epoch: f[1].parse().map_err(|_| bad("epoch"))?,
            alpha: f[2].parse().map_err(|_| bad("alpha"))?,
            teacher_correct: f[3] == "1",
            st: f[4].parse().map_err(|_| bad("st"))?,
            is_outlier: f[5] == "1",
        });
    }
    if rows.is_empty() {
        return Err(Error::Data("alpha dump has no rows".into()));
    }
    Ok(rows)
}

fn parse_triplet_dump(text: &str) -> Result<Vec<TripletDumpRow>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Data("empty triplet dump".into()))?;
    let cols: Vec<&str> = header.split('\t').collect();
    let c = cols.iter().filter(|h| h.starts_with('s') && h[1..].parse::<usize>().is_ok()).count();
    if c == 0 || cols.len() != 3 + 2 * c {
        return Err(Error::Data("triplet dump header is malformed".into()));
    }
    let mut rows = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 + 2 * c {
            return Err(Error::Data(format!(
                "triplet dump line {}: expected {} fields, got {}",
                ln + 1,
                3 + 2 * c,
                f.len()
            )));
        }
        let bad = |what: &str| Error::Data(format!("triplet dump line {}: bad {what}", ln + 1));
        let parse_probs = |fields: &[&str], what: &str| -> Result<Vec<f64>> {
            fields
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| bad(what)))
                .collect()
        };
        rows.push(TripletDumpRow {
            sample: f[0].parse().map_err(|_| bad("sample id"))?,
            class: f[1].parse().map_err(|_| bad("class"))?,
            is_outlier: f[2] == "1",
            student_probs: parse_probs(&f[3..3 + c], "student probability")?,
            teacher_probs: parse_probs(&f[3 + c..3 + 2 * c], "teacher probability")?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Data("triplet dump has no rows".into()));
    }
    Ok(rows)
}

fn write_histogram(path: &Path, values: &[f64]) -> Result<()> {
    let mut out = String::new();
    for (center, density) in ratio_histogram(values) {
        let _ = writeln!(out, "{center} {density}");
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug)]
pub struct AnalyzeArtifacts {
    pub files: Vec<PathBuf>,
}

/// Joins the per-sample ratio dump with the triplet snapshot and writes the
/// discrepancy-group table, the mean-ratio grid over epochs, and the
/// histogram data files.
pub fn cmd_analyze(cfg: &RunConfig) -> Result<AnalyzeArtifacts> {
    let dir = &cfg.common.out_dir;
    let alpha_path = cfg
        .analyze
        .alpha_dump
        .clone()
        .unwrap_or_else(|| dir.join("alpha_dump.tsv"));
    let triplet_path = cfg
        .analyze
        .triplet_dump
        .clone()
        .unwrap_or_else(|| dir.join("triplet_dump.tsv"));
    let alpha_rows = parse_alpha_dump(&fs::read_to_string(&alpha_path)?)?;
    let triplet_rows = parse_triplet_dump(&fs::read_to_string(&triplet_path)?)?;

    // alignment: every alpha row must name a sample the snapshot has
    for (i, r) in triplet_rows.iter().enumerate() {
        if r.sample != i {
            return Err(Error::Data(format!(
                "triplet dump ids are not dense: first offending id {} at row {}",
                r.sample, i
            )));
        }
    }
    if let Some(bad) = alpha_rows.iter().find(|r| r.sample >= triplet_rows.len()) {
        return Err(Error::Data(format!(
            "alpha dump names sample {} missing from the triplet dump",
            bad.sample
        )));
    }

    let triplets: Vec<PredictionTriplet> = triplet_rows
        .iter()
        .map(|r| {
            PredictionTriplet::new(r.student_probs.clone(), r.teacher_probs.clone(), r.class)
        })
        .collect::<Result<_>>()?;
    let grouping = discrepancy_grouping(&triplets)?;

    let mut epochs: Vec<u64> = alpha_rows.iter().map(|r| r.epoch).collect();
    epochs.sort_unstable();
    epochs.dedup();
    let table = fusion_ratio_report(&alpha_records(&alpha_rows), &grouping, &epochs)?;

    fs::create_dir_all(dir)?;
    let mut files = Vec::new();

    // mean-ratio grid over epochs x partitions
    let grid_path = dir.join("fusion_grid.tsv");
    let mut grid = String::from("epoch");
    for p in PARTITIONS {
        let _ = write!(grid, "\t{}", p.name());
    }
    grid.push('\n');
    for (e, cells) in table.epochs.iter().zip(&table.cells) {
        let _ = write!(grid, "{e}");
        for cell in cells {
            match cell {
                Some(v) => {
                    let _ = write!(grid, "\t{v}");
                }
                None => grid.push_str("\tNA"),
            }
        }
        grid.push('\n');
    }
    fs::write(&grid_path, grid)?;
    files.push(grid_path);

    // per-group means at the final epoch
    let final_epoch = *epochs.last().unwrap();
    let final_alpha: Vec<&AlphaDumpRow> =
        alpha_rows.iter().filter(|r| r.epoch == final_epoch).collect();
    let groups_path = dir.join("discrepancy_groups.tsv");
    let mut gtxt = String::from("subset\tgroup\tsize\tmean_st\tmean_alpha\n");
    for correct in [true, false] {
        let subset = if correct { "teacher_correct" } else { "teacher_incorrect" };
        let degenerate = if correct {
            grouping.degenerate_correct
        } else {
            grouping.degenerate_incorrect
        };
        let count = if correct {
            grouping.correct_count
        } else {
            grouping.incorrect_count
        };
        if count == 0 {
            let _ = writeln!(gtxt, "{subset}\tabsent\t0\tNA\tNA");
            continue;
        }
        let max_group = if degenerate { 1 } else { crate::eval::GROUPS };
        for g in 0..max_group {
            let members: Vec<usize> = grouping
                .assignments
                .iter()
                .enumerate()
                .filter(|(_, a)| a.teacher_correct == correct && a.group == g)
                .map(|(i, _)| i)
                .collect();
            let sts: Vec<f64> = members.iter().map(|&i| grouping.assignments[i].st).collect();
            let alphas: Vec<f64> = final_alpha
                .iter()
                .filter(|r| members.contains(&r.sample))
                .map(|r| r.alpha)
                .collect();
            let _ = writeln!(
                gtxt,
                "{subset}\tg{}\t{}\t{}\t{}",
                g + 1,
                members.len(),
                crate::eval::mean(&sts).map_or("NA".into(), |v| v.to_string()),
                crate::eval::mean(&alphas).map_or("NA".into(), |v| v.to_string()),
            );
        }
    }
    fs::write(&groups_path, gtxt)?;
    files.push(groups_path);

    // final-epoch ratio histograms
    let normal: Vec<f64> = final_alpha.iter().filter(|r| !r.is_outlier).map(|r| r.alpha).collect();
    let outlier: Vec<f64> = final_alpha.iter().filter(|r| r.is_outlier).map(|r| r.alpha).collect();
    for (name, values) in [
        ("hist_alpha_normal.dat", &normal),
        ("hist_alpha_outliers.dat", &outlier),
    ] {
        let p = dir.join(name);
        write_histogram(&p, values)?;
        files.push(p);
    }
    for (p, part) in PARTITIONS.iter().enumerate() {
        let values: Vec<f64> = final_alpha
            .iter()
            .filter(|r| {
                grouping
                    .assignments
                    .get(r.sample)
                    .is_some_and(|a| PARTITIONS[p].contains(a, &grouping))
            })
            .map(|r| r.alpha)
            .collect();
        let path = dir.join(format!("hist_alpha_{}.dat", part.name()));
        write_histogram(&path, &values)?;
        files.push(path);
    }
    Ok(AnalyzeArtifacts { files })
}

/// One self-check line: name plus pass/fail.
#[derive(Debug)]
pub struct CheckLine {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Runs the gradient, hypergradient, and metric oracle suites.
pub fn cmd_selfcheck() -> Vec<CheckLine> {
    let mut lines = Vec::new();

    // gradient checks across losses and temperatures
    let mut rng = substream(7, "selfcheck.grad");
    let mut worst: f64 = 0.0;
    let mut grad_ok = true;
    for trial in 0..20 {
        let c = 2 + (trial % 4);
        let params = init_params(
            &[c + 1, 6, c],
            &[Activation::Relu, Activation::Identity],
            &mut rng,
        );
        let x: Vec<f64> = (0..c + 1).map(|j| 0.1 * (j as f64 - 1.0) + 0.05 * trial as f64).collect();
        let teacher: Vec<f64> = (0..c).map(|j| (j as f64 * 0.7).sin()).collect();
        for tau in [1.0, 1.5, 4.0] {
            let err = grad_check(
                &params,
                &x,
                |out| {
                    let kd = kd_loss(out, &teacher, tau).unwrap();
                    let gt = ce_loss_class(out, 0).unwrap();
                    let alpha = 0.3;
                    let grad: Vec<f64> = kd
                        .grad_logits
                        .as_slice()
                        .iter()
                        .zip(gt.grad_logits.as_slice())
                        .map(|(k, g)| alpha * k + (1.0 - alpha) * g)
                        .collect();
                    (alpha * kd.value + (1.0 - alpha) * gt.value, grad)
                },
                1e-5,
            )
            .unwrap_or(f64::INFINITY);
            worst = worst.max(err);
            grad_ok &= err < 1e-5;
        }
    }
    lines.push(CheckLine {
        name: "gradients: ce/kd/combined vs central differences",
        passed: grad_ok,
        detail: format!("max relative error {worst:.3e}"),
    });

    // hypergradient oracle
    let fd_err = hypergrad_oracle_check(HypergradMode::UnrolledFd);
    let toy = ScalarBilevelToy::default();
    let coarse = toy.relative_error(HypergradMode::UnrolledFd, 1e-2);
    let fine = toy.relative_error(HypergradMode::UnrolledFd, 1e-3);
    lines.push(CheckLine {
        name: "hypergradient: unrolled_fd vs closed form",
        passed: fd_err < 1e-4 && fine < coarse,
        detail: format!("error {fd_err:.3e}, eps sweep {coarse:.3e} -> {fine:.3e}"),
    });
    let fo = hypergrad_oracle_check(HypergradMode::FirstOrder);
    lines.push(CheckLine {
        name: "hypergradient: first_order error (reported only)",
        passed: true,
        detail: format!("error {fo:.3e}"),
    });

    // macro AUC vs brute-force pair counting
    let mut rng = substream(11, "selfcheck.auc");
    let mut auc_ok = true;
    let mut worst_gap: f64 = 0.0;
    for _ in 0..10 {
        use rand::Rng;
        let n = 30 + rng.gen_range(0..40);
        let c = 2 + rng.gen_range(0..3usize);
        let mut probs = Vec::with_capacity(n * c);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let raw: Vec<f64> = (0..c).map(|_| rng.gen::<f64>() + 0.01).collect();
            let s: f64 = raw.iter().sum();
            probs.extend(raw.iter().map(|v| v / s));
            labels.push(rng.gen_range(0..c));
        }
        for class in 0..c {
            if !labels.contains(&class) {
                labels[class % n] = class;
            }
        }
        let t = Tensor::from_vec(vec![n, c], probs.clone()).unwrap();
        let fast = match macro_auc(&t, &labels) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let mut total_auc = 0.0;
        let mut used = 0;
        for class in 0..c {
            let pos: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
            let neg: Vec<usize> = (0..n).filter(|&i| labels[i] != class).collect();
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            let mut wins = 0.0;
            for &i in &pos {
                for &j in &neg {
                    let si = probs[i * c + class];
                    let sj = probs[j * c + class];
                    wins += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
            total_auc += wins / (pos.len() * neg.len()) as f64;
            used += 1;
        }
        let brute = total_auc / used as f64;
        worst_gap = worst_gap.max((fast - brute).abs());
        auc_ok &= (fast - brute).abs() < 1e-12;
    }
    lines.push(CheckLine {
        name: "macro auc vs brute-force pair counting",
        passed: auc_ok,
        detail: format!("max gap {worst_gap:.3e}"),
    });

    // softmax sanity
    let p = softmax_temp(&[1.0, 0.0], 1.0).unwrap();
    let softmax_ok = (p[0] - 0.7310585786300049).abs() < 1e-12
        && (p.iter().sum::<f64>() - 1.0).abs() < 1e-12;
    lines.push(CheckLine {
        name: "softmax closed-form value and normalization",
        passed: softmax_ok,
        detail: format!("p = [{}, {}]", p[0], p[1]),
    });

    lines
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("common.seed", "7").unwrap();
        cfg.set("common.train_frac", "2/3").unwrap();
        cfg.set("distill.policy", "wls").unwrap();
        cfg.set("distill.teacher_file", "runs/x/teacher.tgkd").unwrap();
        cfg.set("train-teacher.hidden", "8,4").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("common.nope", "1").is_err());
        assert!(cfg.set("mystery.seed", "1").is_err());
        assert!(cfg.apply_text("[mystery]\nseed = 1\n").is_err());
        assert!(cfg.apply_text("seed = 1\n").is_err());
        assert!(cfg.apply_text("[common]\nbroken line\n").is_err());
    }

    #[test]
    fn later_assignments_win() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("[common]\nseed = 1\nseed = 9\n").unwrap();
        assert_eq!(cfg.common.seed, 9);
        cfg.set("common.seed", "33").unwrap();
        assert_eq!(cfg.common.seed, 33);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# a comment\n\n[common]\n# another\nseed = 5\n\n")
            .unwrap();
        assert_eq!(cfg.common.seed, 5);
    }

    #[test]
    fn fraction_values_parse_exactly() {
        let mut cfg = RunConfig::default();
        cfg.set("common.val_frac", "1/6").unwrap();
        assert_eq!(cfg.common.val_frac, 1.0 / 6.0);
        assert!(cfg.set("common.val_frac", "1/0").is_err());
        assert!(cfg.set("common.val_frac", "x/2").is_err());
    }

    #[test]
    fn substreams_are_deterministic_and_distinct() {
        let mut a = substream(42, "data.synth");
        let mut b = substream(42, "data.synth");
        let mut c = substream(42, "data.split");
        let mut d = substream(43, "data.synth");
        let (xa, xb, xc, xd) = (a.next_u64(), b.next_u64(), c.next_u64(), d.next_u64());
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
        assert_ne!(xa, xd);
    }

    #[test]
    fn zero_epoch_teacher_writes_initialized_params() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.set("common.out_dir", dir.path().to_str().unwrap()).unwrap();
        cfg.set("common.per_class", "30").unwrap();
        cfg.set("train-teacher.epochs", "0").unwrap();
        let art = cmd_train_teacher(&cfg).unwrap();
        assert!(art.params_path.exists());
        // an untrained net sits near chance on a 3-class task
        let acc = art.metrics.iter().find(|(n, _)| n == "test").unwrap().1.acc;
        assert!(acc < 0.7, "untrained accuracy {acc}");
        // rerun is byte-identical
        let bytes1 = std::fs::read(&art.params_path).unwrap();
        cmd_train_teacher(&cfg).unwrap();
        assert_eq!(bytes1, std::fs::read(&art.params_path).unwrap());
    }

    #[test]
    fn teacher_learns_separable_clusters() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.set("common.out_dir", dir.path().to_str().unwrap()).unwrap();
        cfg.set("common.per_class", "40").unwrap();
        cfg.set("common.spread", "0.1").unwrap();
        cfg.set("train-teacher.epochs", "40").unwrap();
        let art = cmd_train_teacher(&cfg).unwrap();
        let train_acc = art.metrics.iter().find(|(n, _)| n == "train").unwrap().1.acc;
        assert!(train_acc > 0.95, "train accuracy {train_acc}");
    }

    #[test]
    fn distill_errors_without_teacher_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.set("common.out_dir", dir.path().to_str().unwrap()).unwrap();
        cfg.set("common.per_class", "30").unwrap();
        let err = cmd_distill(&cfg, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn analyze_reports_missing_sample_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let alpha = dir.path().join("alpha.tsv");
        let triplet = dir.path().join("triplet.tsv");
        std::fs::write(
            &alpha,
            "sample\tepoch\talpha\tteacher_correct\tst_discrepancy\tis_outlier\n\
             5\t1\t0.5\t1\t0.1\t0\n",
        )
        .unwrap();
        std::fs::write(
            &triplet,
            "sample\tclass\tis_outlier\ts0\ts1\tt0\tt1\n0\t0\t0\t0.6\t0.4\t0.7\t0.3\n",
        )
        .unwrap();
        let mut cfg = RunConfig::default();
        cfg.set("common.out_dir", dir.path().to_str().unwrap()).unwrap();
        cfg.set("analyze.alpha_dump", alpha.to_str().unwrap()).unwrap();
        cfg.set("analyze.triplet_dump", triplet.to_str().unwrap()).unwrap();
        let err = cmd_analyze(&cfg).unwrap_err();
        assert!(err.to_string().contains("sample 5"), "{err}");
    }

    #[test]
    fn shipped_presets_parse() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
        let mut seen = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "cfg") {
                RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                seen += 1;
            }
        }
        assert!(seen >= 4);
    }

    #[test]
    fn selfcheck_suites_pass() {
        let lines = cmd_selfcheck();
        assert!(lines.iter().all(|l| l.passed), "{:?}", lines
            .iter()
            .filter(|l| !l.passed)
            .map(|l| l.name)
            .collect::<Vec<_>>());
    }
}
