//! INI-style experiment configuration.
//!
//! ```text
//! seed = 0
//! phases = pretrain,distill,eval
//!
//! [distill]
//! tau_t = 0.01
//! ```
//!
//! Top-level keys come before the first section header. Unknown sections
//! and keys are rejected. [`ExperimentConfig::to_text`] writes every key, and
//! parsing that text yields an equal config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::{ViewConfig, ViewMode};
use crate::dataset::BlobSpec;
use crate::distill::{DistillConfig, Strategy};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::optim::SgdConfig;
use crate::pretrain::PretrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Momentum-contrast pre-training of the teacher.
    Pretrain,
    /// Distillation of the student from the teacher.
    Distill,
    /// Momentum-contrast training of the student alone, for comparison.
    Baseline,
    /// KNN and linear-probe evaluation of the student.
    Eval,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Distill => "distill",
            Phase::Baseline => "baseline",
            Phase::Eval => "eval",
        }
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "distill" => Ok(Phase::Distill),
            "baseline" => Ok(Phase::Baseline),
            "eval" => Ok(Phase::Eval),
            _ => Err(Error::Config(format!("unknown phase {s:?} (pretrain|distill|baseline|eval)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Blobs,
    Idx {
        images: PathBuf,
        labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSection {
    pub source: DataSource,
    pub blobs: BlobSpec,
    /// Held-out blob samples per class.
    pub test_per_class: usize,
    /// Held-out fraction of an IDX set without its own test files.
    pub test_fraction: f64,
    /// Augmentation; `view_mode` lives in `[distill]`.
    pub views: ViewConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSection {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub head_depth: usize,
    pub head_width: Option<usize>,
    /// Load this checkpoint instead of initializing or training.
    pub checkpoint: Option<PathBuf>,
}

impl EncoderSection {
    pub fn encoder_config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden_widths: self.hidden.clone(),
            embed_dim: self.embed_dim,
            head_depth: self.head_depth,
            head_width: self.head_width,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub tau: f64,
    pub momentum: f64,
    pub queue_size: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillSection {
    pub epochs: usize,
    pub lr: f64,
    pub tau_t: f64,
    pub tau_s: f64,
    pub strategy: Strategy,
    pub queue_size: usize,
    pub batch_size: usize,
    pub view_mode: ViewMode,
    pub enqueue_before_loss: bool,
    pub moco_weight: f64,
    pub moco_tau: f64,
    pub clusters: Option<usize>,
    pub kmeans_iters: usize,
    pub cluster_momentum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub knn_k: usize,
    /// KNN accuracy is recorded every this many epochs (and at the last);
    /// 0 records it only at the last epoch.
    pub knn_every: usize,
    /// Linear-probe epochs; 0 skips the probe.
    pub probe_epochs: usize,
    pub probe_lr: f64,
    /// Fraction of training labels the probe sees.
    pub label_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSection {
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_bias: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub phases: Vec<Phase>,
    /// Record wall-clock milliseconds per epoch; off keeps metrics files
    /// byte-reproducible.
    pub timing: bool,
    pub dataset: DatasetSection,
    pub teacher: EncoderSection,
    pub student: EncoderSection,
    pub pretrain: PretrainSection,
    pub distill: DistillSection,
    pub eval: EvalSection,
    pub schedule: ScheduleSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        // Mirror flips can move a bump into another class's cell.
        let views = ViewConfig {
            crop_scale: (0.4, 1.0),
            flip_p: 0.0,
            ..ViewConfig::default()
        };
        let dc = DistillConfig::default();
        let pc = PretrainConfig::default();
        let sgd = SgdConfig::default();
        Self {
            seed: 0,
            phases: vec![Phase::Pretrain, Phase::Distill, Phase::Eval],
            timing: false,
            dataset: DatasetSection {
                source: DataSource::Blobs,
                blobs: BlobSpec {
                    bump_width: 1.0,
                    amplitude: 0.07,
                    ..BlobSpec::new(8, 64, 16, 0.05)
                },
                test_per_class: 64,
                test_fraction: 0.2,
                views,
            },
            teacher: EncoderSection {
                hidden: vec![256, 128],
                embed_dim: 16,
                head_depth: 2,
                head_width: None,
                checkpoint: None,
            },
            student: EncoderSection {
                hidden: vec![32],
                embed_dim: 16,
                head_depth: 2,
                head_width: None,
                checkpoint: None,
            },
            pretrain: PretrainSection {
                epochs: 100,
                lr: 0.05,
                tau: pc.tau,
                momentum: pc.momentum,
                queue_size: 512,
                batch_size: pc.batch_size,
            },
            distill: DistillSection {
                epochs: 30,
                lr: 0.05,
                tau_t: dc.tau_t,
                tau_s: dc.tau_s,
                strategy: dc.strategy,
                queue_size: 512,
                batch_size: dc.batch_size,
                view_mode: ViewMode::Identical,
                enqueue_before_loss: dc.enqueue_before_loss,
                moco_weight: dc.moco_weight,
                moco_tau: dc.moco_tau,
                clusters: dc.clusters,
                kmeans_iters: dc.kmeans_iters,
                cluster_momentum: dc.cluster_momentum,
            },
            eval: EvalSection {
                knn_k: 10,
                knn_every: 0,
                probe_epochs: 0,
                probe_lr: 0.3,
                label_fraction: 1.0,
            },
            schedule: ScheduleSection {
                warmup_epochs: 5,
                momentum: sgd.momentum,
                weight_decay: sgd.weight_decay,
                decay_bias: sgd.decay_bias,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key} must be true or false, got {v:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    match parse_list::<f64>(key, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::Config(format!("{key} needs two comma-separated numbers"))),
    }
}

fn parse_opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (v != "none").then(|| PathBuf::from(v))
}

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), |x| x.to_string())
}

fn fmt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |x| x.display().to_string())
}

fn fmt_list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        let mut idx = IdxKeys::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(&section, key, value, &mut idx)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        match (idx.source.as_deref(), idx.images, idx.labels) {
            (Some("idx") | None, Some(images), Some(labels)) => {
                cfg.dataset.source = DataSource::Idx {
                    images,
                    labels,
                    test_images: idx.test_images,
                    test_labels: idx.test_labels,
                };
            }
            (Some("blobs") | None, None, None) => {}
            _ => return Err(Error::Config("source = idx needs both images and labels, and only then".into())),
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(
        &mut self,
        section: &str,
        key: &str,
        v: &str,
        idx: &mut IdxKeys,
    ) -> Result<()> {
        let k = key;
        match (section, key) {
            ("", "seed") => self.seed = parse(k, v)?,
            ("", "phases") => self.phases = parse_list(k, v)?,
            ("", "timing") => self.timing = parse_bool(k, v)?,

            ("dataset", "source") => match v {
                "blobs" | "idx" => idx.source = Some(v.to_string()),
                _ => return Err(Error::Config(format!("source must be blobs or idx, got {v:?}"))),
            },
            ("dataset", "images") => idx.images = parse_path(v),
            ("dataset", "labels") => idx.labels = parse_path(v),
            ("dataset", "test_images") => idx.test_images = parse_path(v),
            ("dataset", "test_labels") => idx.test_labels = parse_path(v),
            ("dataset", "classes") => self.dataset.blobs.classes = parse(k, v)?,
            ("dataset", "per_class") => self.dataset.blobs.per_class = parse(k, v)?,
            ("dataset", "size") => self.dataset.blobs.size = parse(k, v)?,
            ("dataset", "noise") => self.dataset.blobs.noise = parse(k, v)?,
            ("dataset", "bump_width") => self.dataset.blobs.bump_width = parse(k, v)?,
            ("dataset", "amplitude") => self.dataset.blobs.amplitude = parse(k, v)?,
            ("dataset", "test_per_class") => self.dataset.test_per_class = parse(k, v)?,
            ("dataset", "test_fraction") => self.dataset.test_fraction = parse(k, v)?,
            ("dataset", "out_size") => self.dataset.views.out_size = parse(k, v)?,
            ("dataset", "crop_scale") => self.dataset.views.crop_scale = parse_pair(k, v)?,
            ("dataset", "crop_ratio") => self.dataset.views.crop_ratio = parse_pair(k, v)?,
            ("dataset", "jitter") => {
                let j: Vec<f64> = parse_list(k, v)?;
                self.dataset.views.jitter = j
                    .try_into()
                    .map_err(|_| Error::Config("jitter needs four numbers".into()))?;
            }
            ("dataset", "jitter_p") => self.dataset.views.jitter_p = parse(k, v)?,
            ("dataset", "gray_p") => self.dataset.views.gray_p = parse(k, v)?,
            ("dataset", "blur_sigma") => self.dataset.views.blur_sigma = parse_pair(k, v)?,
            ("dataset", "blur_p") => self.dataset.views.blur_p = parse(k, v)?,
            ("dataset", "flip_p") => self.dataset.views.flip_p = parse(k, v)?,

            ("teacher" | "student", _) => {
                let enc = if section == "teacher" { &mut self.teacher } else { &mut self.student };
                match key {
                    "hidden" => enc.hidden = parse_list(k, v)?,
                    "embed_dim" => enc.embed_dim = parse(k, v)?,
                    "head_depth" => enc.head_depth = parse(k, v)?,
                    "head_width" => enc.head_width = parse_opt(k, v)?,
                    "checkpoint" => enc.checkpoint = parse_path(v),
                    _ => return Err(unknown(section, key)),
                }
            }

            ("pretrain", "epochs") => self.pretrain.epochs = parse(k, v)?,
            ("pretrain", "lr") => self.pretrain.lr = parse(k, v)?,
            ("pretrain", "tau") => self.pretrain.tau = parse(k, v)?,
            ("pretrain", "momentum") => self.pretrain.momentum = parse(k, v)?,
            ("pretrain", "queue_size") => self.pretrain.queue_size = parse(k, v)?,
            ("pretrain", "batch_size") => self.pretrain.batch_size = parse(k, v)?,

            ("distill", "epochs") => self.distill.epochs = parse(k, v)?,
            ("distill", "lr") => self.distill.lr = parse(k, v)?,
            ("distill", "tau_t") => self.distill.tau_t = parse(k, v)?,
            ("distill", "tau_s") => self.distill.tau_s = parse(k, v)?,
            ("distill", "strategy") => self.distill.strategy = v.parse()?,
            ("distill", "queue_size") => self.distill.queue_size = parse(k, v)?,
            ("distill", "batch_size") => self.distill.batch_size = parse(k, v)?,
            ("distill", "view_mode") => self.distill.view_mode = v.parse()?,
            ("distill", "enqueue_before_loss") => self.distill.enqueue_before_loss = parse_bool(k, v)?,
            ("distill", "moco_weight") => self.distill.moco_weight = parse(k, v)?,
            ("distill", "moco_tau") => self.distill.moco_tau = parse(k, v)?,
            ("distill", "clusters") => self.distill.clusters = parse_opt(k, v)?,
            ("distill", "kmeans_iters") => self.distill.kmeans_iters = parse(k, v)?,
            ("distill", "cluster_momentum") => self.distill.cluster_momentum = parse(k, v)?,

            ("eval", "knn_k") => self.eval.knn_k = parse(k, v)?,
            ("eval", "knn_every") => self.eval.knn_every = parse(k, v)?,
            ("eval", "probe_epochs") => self.eval.probe_epochs = parse(k, v)?,
            ("eval", "probe_lr") => self.eval.probe_lr = parse(k, v)?,
            ("eval", "label_fraction") => self.eval.label_fraction = parse(k, v)?,

            ("schedule", "warmup_epochs") => self.schedule.warmup_epochs = parse(k, v)?,
            ("schedule", "momentum") => self.schedule.momentum = parse(k, v)?,
            ("schedule", "weight_decay") => self.schedule.weight_decay = parse(k, v)?,
            ("schedule", "decay_bias") => self.schedule.decay_bias = parse_bool(k, v)?,

            (s, _) if !SECTIONS.contains(&s) => {
                return Err(Error::Config(format!("unknown section [{s}]")));
            }
            _ => return Err(unknown(section, key)),
        }
        Ok(())
    }

    /// Every key with its current value, in a form [`Self::parse`] accepts.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let d = &self.dataset;
        let v = &d.views;
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "phases = {}", self.phases.iter().map(|p| p.name()).collect::<Vec<_>>().join(","));
        let _ = writeln!(s, "timing = {}", self.timing);
        let _ = writeln!(s, "\n[dataset]");
        match &d.source {
            DataSource::Blobs => {
                let _ = writeln!(s, "source = blobs");
            }
            DataSource::Idx {
                images,
                labels,
                test_images,
                test_labels,
            } => {
                let _ = writeln!(s, "source = idx");
                let _ = writeln!(s, "images = {}", images.display());
                let _ = writeln!(s, "labels = {}", labels.display());
                let _ = writeln!(s, "test_images = {}", fmt_path(test_images));
                let _ = writeln!(s, "test_labels = {}", fmt_path(test_labels));
            }
        }
        let b = &d.blobs;
        let _ = writeln!(s, "classes = {}", b.classes);
        let _ = writeln!(s, "per_class = {}", b.per_class);
        let _ = writeln!(s, "size = {}", b.size);
        let _ = writeln!(s, "noise = {:?}", b.noise);
        let _ = writeln!(s, "bump_width = {:?}", b.bump_width);
        let _ = writeln!(s, "amplitude = {:?}", b.amplitude);
        let _ = writeln!(s, "test_per_class = {}", d.test_per_class);
        let _ = writeln!(s, "test_fraction = {:?}", d.test_fraction);
        let _ = writeln!(s, "out_size = {}", v.out_size);
        let _ = writeln!(s, "crop_scale = {:?},{:?}", v.crop_scale.0, v.crop_scale.1);
        let _ = writeln!(s, "crop_ratio = {:?},{:?}", v.crop_ratio.0, v.crop_ratio.1);
        let _ = writeln!(s, "jitter = {}", v.jitter.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(","));
        let _ = writeln!(s, "jitter_p = {:?}", v.jitter_p);
        let _ = writeln!(s, "gray_p = {:?}", v.gray_p);
        let _ = writeln!(s, "blur_sigma = {:?},{:?}", v.blur_sigma.0, v.blur_sigma.1);
        let _ = writeln!(s, "blur_p = {:?}", v.blur_p);
        let _ = writeln!(s, "flip_p = {:?}", v.flip_p);
        for (name, e) in [("teacher", &self.teacher), ("student", &self.student)] {
            let _ = writeln!(s, "\n[{name}]");
            let _ = writeln!(s, "hidden = {}", fmt_list(&e.hidden));
            let _ = writeln!(s, "embed_dim = {}", e.embed_dim);
            let _ = writeln!(s, "head_depth = {}", e.head_depth);
            let _ = writeln!(s, "head_width = {}", fmt_opt(&e.head_width));
            let _ = writeln!(s, "checkpoint = {}", fmt_path(&e.checkpoint));
        }
        let p = &self.pretrain;
        let _ = writeln!(s, "\n[pretrain]");
        let _ = writeln!(s, "epochs = {}", p.epochs);
        let _ = writeln!(s, "lr = {:?}", p.lr);
        let _ = writeln!(s, "tau = {:?}", p.tau);
        let _ = writeln!(s, "momentum = {:?}", p.momentum);
        let _ = writeln!(s, "queue_size = {}", p.queue_size);
        let _ = writeln!(s, "batch_size = {}", p.batch_size);
        let t = &self.distill;
        let _ = writeln!(s, "\n[distill]");
        let _ = writeln!(s, "epochs = {}", t.epochs);
        let _ = writeln!(s, "lr = {:?}", t.lr);
        let _ = writeln!(s, "tau_t = {:?}", t.tau_t);
        let _ = writeln!(s, "tau_s = {:?}", t.tau_s);
        let _ = writeln!(s, "strategy = {}", t.strategy);
        let _ = writeln!(s, "queue_size = {}", t.queue_size);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "view_mode = {}", t.view_mode);
        let _ = writeln!(s, "enqueue_before_loss = {}", t.enqueue_before_loss);
        let _ = writeln!(s, "moco_weight = {:?}", t.moco_weight);
        let _ = writeln!(s, "moco_tau = {:?}", t.moco_tau);
        let _ = writeln!(s, "clusters = {}", fmt_opt(&t.clusters));
        let _ = writeln!(s, "kmeans_iters = {}", t.kmeans_iters);
        let _ = writeln!(s, "cluster_momentum = {:?}", t.cluster_momentum);
        let e = &self.eval;
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(s, "knn_k = {}", e.knn_k);
        let _ = writeln!(s, "knn_every = {}", e.knn_every);
        let _ = writeln!(s, "probe_epochs = {}", e.probe_epochs);
        let _ = writeln!(s, "probe_lr = {:?}", e.probe_lr);
        let _ = writeln!(s, "label_fraction = {:?}", e.label_fraction);
        let c = &self.schedule;
        let _ = writeln!(s, "\n[schedule]");
        let _ = writeln!(s, "warmup_epochs = {}", c.warmup_epochs);
        let _ = writeln!(s, "momentum = {:?}", c.momentum);
        let _ = writeln!(s, "weight_decay = {:?}", c.weight_decay);
        let _ = writeln!(s, "decay_bias = {}", c.decay_bias);
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.views.validate()?;
        if let DataSource::Idx {
            images,
            labels,
            test_images,
            test_labels,
        } = &self.dataset.source
        {
            let paths = [Some(images), Some(labels), test_images.as_ref(), test_labels.as_ref()];
            for p in paths.into_iter().flatten() {
                if !p.exists() {
                    return Err(Error::Config(format!("file not found: {}", p.display())));
                }
            }
            if test_images.is_some() != test_labels.is_some() {
                return Err(Error::Config("test_images and test_labels go together".into()));
            }
        }
        for p in [&self.teacher.checkpoint, &self.student.checkpoint].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("checkpoint not found: {}", p.display())));
            }
        }
        if !(0.0..1.0).contains(&self.dataset.test_fraction) {
            return Err(Error::Config("test_fraction must be in [0,1)".into()));
        }
        if self.eval.knn_k == 0 {
            return Err(Error::Config("knn_k must be >= 1".into()));
        }
        if !(self.eval.label_fraction > 0.0 && self.eval.label_fraction <= 1.0) {
            return Err(Error::Config("label_fraction must be in (0,1]".into()));
        }
        for (name, lr) in [("pretrain.lr", self.pretrain.lr), ("distill.lr", self.distill.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.pretrain.momentum) || !(self.pretrain.tau > 0.0) {
            return Err(Error::Config("pretrain momentum must be in [0,1] and tau > 0".into()));
        }
        if self.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain batch_size must be >= 1".into()));
        }
        self.sgd().validate(0.0)?;
        self.distill_config().validate()?;
        let input = self.input_dim();
        self.teacher.encoder_config(input).validate()?;
        self.student.encoder_config(input).validate()?;
        if self.teacher.embed_dim != self.student.embed_dim {
            return Err(Error::Config("teacher and student embed_dim differ".into()));
        }
        Ok(())
    }

    /// Flattened view length; IDX sets are assumed grayscale.
    pub fn input_dim(&self) -> usize {
        self.dataset.views.out_size * self.dataset.views.out_size
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.schedule.momentum,
            weight_decay: self.schedule.weight_decay,
            decay_bias: self.schedule.decay_bias,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        let t = &self.distill;
        DistillConfig {
            tau_t: t.tau_t,
            tau_s: t.tau_s,
            strategy: t.strategy,
            queue_size: t.queue_size,
            batch_size: t.batch_size,
            views: ViewConfig {
                view_mode: t.view_mode,
                ..self.dataset.views.clone()
            },
            enqueue_before_loss: t.enqueue_before_loss,
            moco_weight: t.moco_weight,
            moco_tau: t.moco_tau,
            clusters: t.clusters,
            kmeans_iters: t.kmeans_iters,
            cluster_momentum: t.cluster_momentum,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            tau: p.tau,
            momentum: p.momentum,
            queue_size: p.queue_size,
            batch_size: p.batch_size,
            views: ViewConfig {
                view_mode: ViewMode::Cross,
                ..self.dataset.views.clone()
            },
        }
    }
}

#[derive(Default)]
struct IdxKeys {
    source: Option<String>,
    images: Option<PathBuf>,
    labels: Option<PathBuf>,
    test_images: Option<PathBuf>,
    test_labels: Option<PathBuf>,
}

const SECTIONS: [&str; 8] = ["", "dataset", "teacher", "student", "pretrain", "distill", "eval", "schedule"];

fn unknown(section: &str, key: &str) -> Error {
    if section.is_empty() {
        Error::Config(format!("unknown top-level key {key:?}"))
    } else {
        Error::Config(format!("unknown key {key:?} in [{section}]"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn edited_values_round_trip() {
        let text = "seed = 7\nphases = distill,eval\n[distill]\ntau_t = 1e-8\nstrategy = kmeans\nclusters = 12\nview_mode = cross\n[student]\nhidden = 16,8\nhead_width = 5\n[dataset]\ncrop_scale = 0.5,1.0\n[schedule]\ndecay_bias = false\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.phases, vec![Phase::Distill, Phase::Eval]);
        assert_eq!(c.distill.tau_t, 1e-8);
        assert_eq!(c.distill.strategy, Strategy::KMeans);
        assert_eq!(c.distill.clusters, Some(12));
        assert_eq!(c.student.hidden, vec![16, 8]);
        assert_eq!(c.student.head_width, Some(5));
        assert!(!c.schedule.decay_bias);
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        for bad in ["bogus = 1", "[distill]\ntau = 0.1", "[extra]\nx = 1", "[eval]\nknn_k = ten", "seed"] {
            let e = ExperimentConfig::parse(bad).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{bad}: {e}");
        }
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = ExperimentConfig::parse("# header\n\nseed = 3 # trailing\n").unwrap();
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn missing_files_rejected() {
        let e = ExperimentConfig::parse("[dataset]\nimages = /no/such/file\nlabels = /no/such/file\n").unwrap_err();
        assert!(e.to_string().contains("not found"));
        assert!(ExperimentConfig::parse("[teacher]\ncheckpoint = /no/such.ckpt\n").is_err());
    }
}
