use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use super::config::{DataSource, ExperimentConfig, Phase};
use crate::dataset::{generate_blobs, load_idx, BlobSpec, Dataset};
use crate::distill::{epoch_order, Distiller};
use crate::encoder::{init_encoder, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{knn_accuracy, linear_probe, semi_supervised_subset, LabeledEmbeddings, ProbeConfig};
use crate::metrics::{write_metrics, MetricsRecord};
use crate::optim::LrSchedule;
use crate::pretrain::Pretrainer;

/// Seed offsets that keep the run's random streams apart.
const TEST_DATA: u64 = 0x7E57_DA7A;
const TEACHER_INIT: u64 = 0x7EAC_0000;
const STUDENT_INIT: u64 = 0x57D0_0000;
const SPLIT: u64 = 0x5B11_7000;

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const BASELINE_CKPT: &str = "baseline.ckpt";
pub const RESOLVED_CONFIG: &str = "config.resolved.ini";
pub const EVAL_JSON: &str = "eval.json";

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Training and held-out sets described by the config.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Splits> {
    match &cfg.dataset.source {
        DataSource::Blobs => {
            let spec = cfg.dataset.blobs;
            let test_spec = BlobSpec {
                per_class: cfg.dataset.test_per_class,
                ..spec
            };
            Ok(Splits {
                train: generate_blobs(&spec, cfg.seed)?,
                test: generate_blobs(&test_spec, cfg.seed ^ TEST_DATA)?,
            })
        }
        DataSource::Idx {
            images,
            labels,
            test_images,
            test_labels,
        } => {
            let all = load_idx(images, labels)?;
            if let (Some(ti), Some(tl)) = (test_images, test_labels) {
                let mut test = load_idx(ti, tl)?;
                test.num_classes = test.num_classes.max(all.num_classes);
                return Ok(Splits { train: all, test });
            }
            let order = epoch_order(all.len(), cfg.seed ^ SPLIT, 0);
            let n_test = (all.len() as f64 * cfg.dataset.test_fraction).round() as usize;
            let (te, tr) = order.split_at(n_test);
            let mut tr = tr.to_vec();
            let mut te = te.to_vec();
            tr.sort_unstable();
            te.sort_unstable();
            Ok(Splits {
                train: all.subset(&tr),
                test: all.subset(&te),
            })
        }
    }
}

pub fn init_teacher(cfg: &ExperimentConfig) -> Result<EncoderParams> {
    init_encoder(&cfg.teacher.encoder_config(cfg.input_dim()), cfg.seed ^ TEACHER_INIT)
}

pub fn init_student(cfg: &ExperimentConfig) -> Result<EncoderParams> {
    init_encoder(&cfg.student.encoder_config(cfg.input_dim()), cfg.seed ^ STUDENT_INIT)
}

/// Cosine-KNN top-1 of `enc` embeddings, test set against training set.
pub fn knn_eval(enc: &EncoderParams, data: &Splits, cfg: &ExperimentConfig) -> Result<f64> {
    let size = cfg.dataset.views.out_size;
    let train = LabeledEmbeddings::new(enc.encode(&data.train.features(size))?, data.train.labels.clone())?;
    let test = LabeledEmbeddings::new(enc.encode(&data.test.features(size))?, data.test.labels.clone())?;
    knn_accuracy(&train, &test, cfg.eval.knn_k.min(data.train.len()))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub knn_top1: f64,
    pub probe_top1: Option<f64>,
    pub probe_top5: Option<f64>,
    pub label_fraction: f64,
}

/// KNN on the projection-head output and, when enabled, a linear probe on
/// trunk features trained with a class-balanced label subset.
pub fn evaluate(enc: &EncoderParams, data: &Splits, cfg: &ExperimentConfig) -> Result<EvalReport> {
    let knn_top1 = knn_eval(enc, data, cfg)?;
    let mut report = EvalReport {
        knn_top1,
        label_fraction: cfg.eval.label_fraction,
        ..EvalReport::default()
    };
    if cfg.eval.probe_epochs > 0 {
        let size = cfg.dataset.views.out_size;
        let idx = semi_supervised_subset(&data.train.labels, cfg.eval.label_fraction, cfg.seed)?;
        let sub = data.train.subset(&idx);
        let train = LabeledEmbeddings::new(enc.trunk_features(&sub.features(size))?, sub.labels.clone())?;
        let test = LabeledEmbeddings::new(enc.trunk_features(&data.test.features(size))?, data.test.labels.clone())?;
        let probe = ProbeConfig {
            epochs: cfg.eval.probe_epochs,
            lr: cfg.eval.probe_lr,
            seed: cfg.seed,
            ..ProbeConfig::default()
        };
        let r = linear_probe(&train, &test, &probe)?;
        report.probe_top1 = Some(r.top1);
        report.probe_top5 = Some(r.top5);
    }
    Ok(report)
}

/// What a run produced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub records: Vec<MetricsRecord>,
    pub teacher_knn: Option<f64>,
    pub student_knn: Option<f64>,
    pub baseline_knn: Option<f64>,
    /// Loss of the last distillation epoch.
    pub final_loss: Option<f64>,
    pub eval: Option<EvalReport>,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    data: Splits,
    summary: RunSummary,
}

impl Runner<'_> {
    fn knn_due(&self, epoch: usize, epochs: usize) -> bool {
        let every = self.cfg.eval.knn_every;
        epoch + 1 == epochs || (every > 0 && (epoch + 1).is_multiple_of(every))
    }

    fn schedule(&self, lr: f64, epochs: usize) -> Result<LrSchedule> {
        let warmup = self.cfg.schedule.warmup_epochs.min(epochs.saturating_sub(1));
        LrSchedule::new(lr, warmup, epochs.max(1))
    }

    fn push(&mut self, mut rec: MetricsRecord, started: Instant) -> Result<()> {
        if self.cfg.timing {
            rec.wall_ms = started.elapsed().as_millis() as u64;
        }
        self.summary.records.push(rec);
        write_metrics(self.out, &self.summary.records)
    }

    fn teacher(&self) -> Result<EncoderParams> {
        if let Some(p) = &self.cfg.teacher.checkpoint {
            return EncoderParams::load(p);
        }
        let own = self.out.join(TEACHER_CKPT);
        if own.exists() {
            return EncoderParams::load(&own);
        }
        Err(Error::Config(
            "distillation needs a teacher: run the pretrain phase or set [teacher] checkpoint".into(),
        ))
    }

    fn student(&self) -> Result<EncoderParams> {
        match &self.cfg.student.checkpoint {
            Some(p) => EncoderParams::load(p),
            None => init_student(self.cfg),
        }
    }

    /// Momentum-contrast training of `enc`; returns the final KNN accuracy.
    fn contrastive(&mut self, enc: EncoderParams, phase: &str, epochs: usize, ckpt: &str) -> Result<f64> {
        let cfg = self.cfg;
        let sched = self.schedule(cfg.pretrain.lr, epochs)?;
        let mut p = Pretrainer::new(enc, cfg.pretrain_config(), cfg.sgd(), sched, cfg.seed)?;
        let mut knn = knn_eval(&p.pair.query, &self.data, cfg)?;
        for epoch in 0..epochs {
            let t = Instant::now();
            let mut rec = p.pretrain_epoch(&self.data.train, epoch)?;
            rec.phase = phase.into();
            if self.knn_due(epoch, epochs) {
                knn = knn_eval(&p.pair.query, &self.data, cfg)?;
                rec.knn_top1 = Some(knn);
            }
            self.push(rec, t)?;
        }
        p.pair.query.save(&self.out.join(ckpt))?;
        Ok(knn)
    }

    fn pretrain(&mut self) -> Result<()> {
        let teacher = match &self.cfg.teacher.checkpoint {
            Some(p) => EncoderParams::load(p)?,
            None => init_teacher(self.cfg)?,
        };
        let knn = self.contrastive(teacher, "pretrain", self.cfg.pretrain.epochs, TEACHER_CKPT)?;
        self.summary.teacher_knn = Some(knn);
        Ok(())
    }

    fn baseline(&mut self) -> Result<()> {
        let student = self.student()?;
        let knn = self.contrastive(student, "baseline", self.cfg.distill.epochs, BASELINE_CKPT)?;
        self.summary.baseline_knn = Some(knn);
        Ok(())
    }

    fn distill(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let teacher = self.teacher()?;
        let student = self.student()?;
        let epochs = cfg.distill.epochs;
        let sched = self.schedule(cfg.distill.lr, epochs)?;
        let mut d = Distiller::new(teacher, student, &self.data.train, cfg.distill_config(), cfg.sgd(), sched, cfg.seed)?;
        for epoch in 0..epochs {
            let t = Instant::now();
            let mut rec = d.distill_epoch(&self.data.train, epoch)?;
            if self.knn_due(epoch, epochs) {
                let knn = knn_eval(&d.student, &self.data, cfg)?;
                rec.knn_top1 = Some(knn);
                self.summary.student_knn = Some(knn);
            }
            self.summary.final_loss = Some(rec.loss);
            self.push(rec, t)?;
        }
        d.student.save(&self.out.join(STUDENT_CKPT))?;
        Ok(())
    }

    fn eval(&mut self) -> Result<()> {
        let t = Instant::now();
        let own = self.out.join(STUDENT_CKPT);
        let student = if own.exists() { EncoderParams::load(&own)? } else { self.student()? };
        let report = evaluate(&student, &self.data, self.cfg)?;
        std::fs::write(
            self.out.join(EVAL_JSON),
            serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
        )?;
        self.summary.student_knn = Some(report.knn_top1);
        self.summary.eval = Some(report.clone());
        self.push(
            MetricsRecord {
                epoch: 0,
                phase: "eval".into(),
                loss: 0.0,
                knn_top1: Some(report.knn_top1),
                lr: 0.0,
                wall_ms: 0,
            },
            t,
        )
    }
}

/// Runs the configured phases in order, writing metrics, checkpoints, and the
/// resolved config into `out`. Metrics written before a failing phase stay
/// on disk.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(RESOLVED_CONFIG), cfg.to_text())?;
    // A checkpoint this run will produce must not be read from an earlier run.
    for (phase, name) in [(Phase::Pretrain, TEACHER_CKPT), (Phase::Distill, STUDENT_CKPT), (Phase::Baseline, BASELINE_CKPT)] {
        let p = out.join(name);
        if cfg.phases.contains(&phase) && p.exists() {
            std::fs::remove_file(p)?;
        }
    }
    let mut r = Runner {
        cfg,
        out,
        data: load_data(cfg)?,
        summary: RunSummary::default(),
    };
    write_metrics(out, &[])?;
    for phase in &cfg.phases {
        match phase {
            Phase::Pretrain => r.pretrain()?,
            Phase::Distill => r.distill()?,
            Phase::Baseline => r.baseline()?,
            Phase::Eval => r.eval()?,
        }
    }
    Ok(r.summary)
}
