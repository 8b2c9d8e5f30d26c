use std::fmt::Write as _;
use std::path::Path;

use super::config::{ExperimentConfig, Phase};
use super::run::{run, TEACHER_CKPT};
use crate::error::{Error, Result};

pub const SWEEP_PARAMS: [&str; 5] = ["tau_t", "tau_s", "K", "lr", "weight_decay"];
pub const SWEEP_HEADER: &str = "param,value,knn_top1,final_loss";

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub knn_top1: f64,
    pub final_loss: f64,
}

/// `cfg` with `param` set to `value`.
pub fn apply_param(cfg: &ExperimentConfig, param: &str, value: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    match param {
        "tau_t" => c.distill.tau_t = value,
        "tau_s" => c.distill.tau_s = value,
        "K" => {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(Error::Config(format!("K must be a non-negative integer, got {value}")));
            }
            c.distill.queue_size = value as usize;
        }
        "lr" => c.distill.lr = value,
        "weight_decay" => c.schedule.weight_decay = value,
        _ => {
            return Err(Error::Config(format!(
                "unknown sweep parameter {param:?}; valid: {}",
                SWEEP_PARAMS.join(", ")
            )))
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.param, r.value, r.knn_top1, r.final_loss);
    }
    s
}

/// One run per value, each in `out/<param>=<value>/`, then `out/sweep.csv`
/// sorted by value. When the parameter does not touch pre-training, the
/// teacher is trained once up front and shared by every run.
pub fn sweep(cfg: &ExperimentConfig, param: &str, values: &[f64], out: &Path) -> Result<Vec<SweepRow>> {
    for &v in values {
        apply_param(cfg, param, v)?;
    }
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut base = cfg.clone();
    if param != "weight_decay" && base.phases.contains(&Phase::Pretrain) {
        let mut pre = cfg.clone();
        pre.phases = vec![Phase::Pretrain];
        let dir = out.join("teacher");
        run(&pre, &dir)?;
        base.phases.retain(|p| *p != Phase::Pretrain);
        base.teacher.checkpoint = Some(dir.join(TEACHER_CKPT));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(values.len());
    for v in sorted {
        let c = apply_param(&base, param, v)?;
        let summary = run(&c, &out.join(format!("{param}={v}")))?;
        rows.push(SweepRow {
            param: param.to_string(),
            value: v,
            knn_top1: summary.student_knn.unwrap_or(f64::NAN),
            final_loss: summary.final_loss.unwrap_or(f64::NAN),
        });
    }
    std::fs::write(out.join("sweep.csv"), sweep_csv(&rows))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_map_to_fields() {
        let c = ExperimentConfig::default();
        assert_eq!(apply_param(&c, "tau_t", 0.3).unwrap().distill.tau_t, 0.3);
        assert_eq!(apply_param(&c, "tau_s", 0.3).unwrap().distill.tau_s, 0.3);
        assert_eq!(apply_param(&c, "K", 64.0).unwrap().distill.queue_size, 64);
        assert_eq!(apply_param(&c, "lr", 0.1).unwrap().distill.lr, 0.1);
        assert_eq!(apply_param(&c, "weight_decay", 0.0).unwrap().schedule.weight_decay, 0.0);
        assert!(apply_param(&c, "K", 2.5).is_err());
        assert!(apply_param(&c, "tau_t", -1.0).is_err());
        let e = apply_param(&c, "momentum", 0.5).unwrap_err().to_string();
        for p in SWEEP_PARAMS {
            assert!(e.contains(p));
        }
    }

    #[test]
    fn csv_layout() {
        let rows = [SweepRow {
            param: "tau_t".into(),
            value: 0.01,
            knn_top1: 0.5,
            final_loss: 1.25,
        }];
        assert_eq!(sweep_csv(&rows), "param,value,knn_top1,final_loss\ntau_t,0.01,0.5,1.25\n");
    }
}
