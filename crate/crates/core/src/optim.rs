//! SGD with momentum and weight decay, plus the warmup + cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply weight decay to rank-1 tensors (biases) too.
    pub decay_bias: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_bias: true,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    buffers: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
    step_count: u64,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (buffers, shapes) = params
            .into_iter()
            .map(|p| (vec![0.0; p.numel()], p.shape().to_vec()))
            .unzip();
        Self {
            buffers,
            shapes,
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }
}

/// One SGD step over every parameter that carries a gradient:
///
/// ```text
/// g'  = g + wd · p
/// buf = momentum · buf + g'
/// p  -= lr · buf
/// ```
///
/// Parameters without a gradient are skipped.
pub fn sgd_step(params: &mut [&mut Tensor], state: &mut OptimizerState, lr: f64, cfg: &SgdConfig) -> Result<()> {
    cfg.validate(lr)?;
    if params.len() != state.buffers.len() {
        return Err(Error::shape(
            "sgd_step",
            &[params.len()],
            &[state.buffers.len()],
        ));
    }
    for (p, shape) in params.iter().zip(&state.shapes) {
        if p.shape() != shape.as_slice() {
            return Err(Error::shape("sgd_step", p.shape(), shape));
        }
    }
    for (p, buf) in params.iter_mut().zip(state.buffers.iter_mut()) {
        let Some(grad) = p.grad().map(<[f64]>::to_vec) else { continue };
        let wd = if p.rank() >= 2 || cfg.decay_bias { cfg.weight_decay } else { 0.0 };
        for ((w, g), b) in p.data_mut().iter_mut().zip(&grad).zip(buf.iter_mut()) {
            let g = g + wd * *w;
            *b = cfg.momentum * *b + g;
            *w -= lr * *b;
        }
        if !p.is_finite() {
            return Err(Error::NonFinite {
                op: "sgd_step".into(),
            });
        }
    }
    state.step_count += 1;
    Ok(())
}

/// Linear warmup followed by cosine decay, evaluated per epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_epochs: usize, total_epochs: usize) -> Result<Self> {
        if !(base_lr > 0.0) {
            return Err(Error::invalid(format!("base lr must be > 0, got {base_lr}")));
        }
        if total_epochs <= warmup_epochs {
            return Err(Error::invalid(format!(
                "total epochs ({total_epochs}) must exceed warmup epochs ({warmup_epochs})"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_epochs,
            total_epochs,
        })
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch > self.total_epochs {
            return Err(Error::invalid(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        let w = self.warmup_epochs;
        if epoch < w {
            return Ok(self.base_lr * (epoch + 1) as f64 / w as f64);
        }
        let progress = (epoch - w) as f64 / (self.total_epochs - w) as f64;
        Ok((self.base_lr * 0.5 * (1.0 + (PI * progress).cos())).max(0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64) -> Tensor {
        Tensor::new(&[1, 1], vec![v]).unwrap().with_requires_grad(true)
    }

    fn step(p: &mut Tensor, state: &mut OptimizerState, g: f64, lr: f64, momentum: f64, wd: f64) {
        p.set_grad(vec![g]).unwrap();
        let cfg = SgdConfig {
            momentum,
            weight_decay: wd,
            decay_bias: true,
        };
        sgd_step(&mut [p], state, lr, &cfg).unwrap();
    }

    #[test]
    fn plain_step() {
        let mut p = param(1.0);
        let mut s = OptimizerState::new([&p]);
        step(&mut p, &mut s, 0.5, 0.1, 0.0, 0.0);
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_step() {
        let mut p = param(1.0);
        let mut s = OptimizerState::new([&p]);
        step(&mut p, &mut s, 0.5, 0.1, 0.0, 0.1);
        assert!((p.data()[0] - 0.94).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps() {
        let mut p = param(1.0);
        let mut s = OptimizerState::new([&p]);
        step(&mut p, &mut s, 0.5, 0.1, 0.9, 0.0);
        step(&mut p, &mut s, 0.5, 0.1, 0.9, 0.0);
        assert!((p.data()[0] - 0.855).abs() < 1e-12);
        assert_eq!(s.step_count(), 2);
    }

    #[test]
    fn bias_decay_flag() {
        let mut b = Tensor::new(&[1], vec![1.0]).unwrap().with_requires_grad(true);
        let mut s = OptimizerState::new([&b]);
        b.set_grad(vec![0.0]).unwrap();
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.5,
            decay_bias: false,
        };
        sgd_step(&mut [&mut b], &mut s, 1.0, &cfg).unwrap();
        assert_eq!(b.data()[0], 1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = param(1.0);
        let mut s = OptimizerState::new([&a]);
        let mut other = Tensor::zeros(&[2, 2]).with_requires_grad(true);
        assert!(sgd_step(&mut [&mut other], &mut s, 0.1, &SgdConfig::default()).is_err());
    }

    #[test]
    fn cosine_schedule_points() {
        let s = LrSchedule::new(0.03, 0, 10).unwrap();
        assert!((s.lr_at(0).unwrap() - 0.03).abs() < 1e-15);
        assert!((s.lr_at(5).unwrap() - 0.015).abs() < 1e-15);
        assert!(s.lr_at(10).unwrap().abs() < 1e-15);
        assert!(s.lr_at(11).is_err());
    }

    #[test]
    fn warmup_is_linear() {
        let s = LrSchedule::new(0.1, 5, 20).unwrap();
        assert!((s.lr_at(0).unwrap() - 0.02).abs() < 1e-15);
        assert!((s.lr_at(4).unwrap() - 0.1).abs() < 1e-15);
        assert!((s.lr_at(5).unwrap() - 0.1).abs() < 1e-15);
        assert!(LrSchedule::new(0.1, 5, 5).is_err());
    }
}
