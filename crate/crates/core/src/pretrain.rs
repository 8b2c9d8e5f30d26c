//! Momentum-contrast pre-training: a trainable query encoder, a slowly
//! following key encoder, and a FIFO queue of keys as negatives.

use crate::augment::{ViewConfig, ViewMode};
use crate::autograd::{Tape, Var};
use crate::dataset::Dataset;
use crate::distill::{epoch_order, infonce_distill_loss, Anchors};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::optim::{sgd_step, LrSchedule, OptimizerState, SgdConfig};
use crate::queue::{init_queue, FeatureQueue};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MomentumPair {
    pub query: EncoderParams,
    pub key: EncoderParams,
}

impl MomentumPair {
    /// The key encoder starts as a frozen copy of the query encoder.
    pub fn new(query: EncoderParams) -> Self {
        let key = query.clone().frozen();
        Self { query, key }
    }
}

/// `key ← m·key + (1 − m)·query`, elementwise.
pub fn momentum_update(pair: &mut MomentumPair, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("momentum must be in [0,1], got {m}")));
    }
    for (k, q) in pair.key.tensors_mut().into_iter().zip(pair.query.tensors()) {
        for (kv, qv) in k.data_mut().iter_mut().zip(q.data()) {
            *kv = m * *kv + (1.0 - m) * qv;
        }
    }
    Ok(())
}

/// `−(1/B) Σ_i log[exp(q_i·k_i/τ) / (exp(q_i·k_i/τ) + Σ_j exp(q_i·d_j/τ))]`.
pub fn moco_infonce_loss(tape: &mut Tape, q: Var, k_pos: &Tensor, key_queue: &Tensor, tau: f64) -> Result<Var> {
    let anchors = Anchors::QueueWithTargets {
        queue: key_queue,
        targets: k_pos,
    };
    infonce_distill_loss(tape, k_pos, q, anchors, tau)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub tau: f64,
    pub momentum: f64,
    pub queue_size: usize,
    pub batch_size: usize,
    /// Forced to cross-view mode.
    pub views: ViewConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            momentum: 0.999,
            queue_size: 4096,
            batch_size: 64,
            views: ViewConfig {
                view_mode: ViewMode::Cross,
                ..ViewConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Pretrainer {
    pub pair: MomentumPair,
    pub queue: FeatureQueue,
    pub config: PretrainConfig,
    pub sgd: SgdConfig,
    pub schedule: LrSchedule,
    pub optimizer: OptimizerState,
    seed: u64,
}

impl Pretrainer {
    pub fn new(query: EncoderParams, mut config: PretrainConfig, sgd: SgdConfig, schedule: LrSchedule, seed: u64) -> Result<Self> {
        config.views.view_mode = ViewMode::Cross;
        config.views.validate()?;
        if !(config.tau > 0.0) || config.batch_size == 0 {
            return Err(Error::Config(format!("bad pretrain config {config:?}")));
        }
        let pair = MomentumPair::new(query);
        let queue = init_queue(config.queue_size, pair.query.config().embed_dim, seed ^ 0x0A0C_0001)?;
        let optimizer = OptimizerState::new(pair.query.tensors());
        Ok(Self {
            pair,
            queue,
            config,
            sgd,
            schedule,
            optimizer,
            seed,
        })
    }

    /// Per batch: query embeddings of view one, key embeddings of view two
    /// (no gradient), Info-NCE against the key queue, an SGD step on the
    /// query, the momentum update, then the keys enter the queue.
    pub fn pretrain_epoch(&mut self, data: &Dataset, epoch: usize) -> Result<MetricsRecord> {
        let lr = self.schedule.lr_at(epoch)?;
        let order = epoch_order(data.len(), self.seed, epoch);
        let mut total = 0.0;
        for idx in order.chunks(self.config.batch_size) {
            let (x_q, x_k) = crate::distill::view_batch(data, idx, &self.config.views, self.seed, epoch)?;
            let k = self.pair.key.encode(&x_k)?;
            let mut tape = Tape::new();
            let x = tape.constant(&x_q);
            let out = self.pair.query.forward(&mut tape, x)?;
            let loss = moco_infonce_loss(&mut tape, out.embedding, &k, &self.queue.snapshot(), self.config.tau)?;
            let value = tape.scalar_value(loss)?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("pretrain loss at epoch {epoch}"),
                });
            }
            total += value * idx.len() as f64;
            let grads = tape.backward(loss)?;
            self.pair.query.collect_grads(&grads, &out)?;
            sgd_step(&mut self.pair.query.tensors_mut(), &mut self.optimizer, lr, &self.sgd)?;
            momentum_update(&mut self.pair, self.config.momentum)?;
            self.queue.enqueue_batch(&k)?;
        }
        Ok(MetricsRecord {
            epoch,
            phase: "pretrain".into(),
            loss: total / data.len().max(1) as f64,
            knn_top1: None,
            lr,
            wall_ms: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::RngStream;
    use crate::augment::view_pair;
    use crate::dataset::{generate_blobs, BlobSpec};
    use crate::encoder::{init_encoder, EncoderConfig};
    use crate::tensor::dot;

    fn pair() -> MomentumPair {
        MomentumPair::new(init_encoder(&EncoderConfig::new(4, &[3], 2), 0).unwrap())
    }

    #[test]
    fn momentum_extremes() {
        let mut p = pair();
        for t in p.query.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        let key0 = p.key.clone();
        momentum_update(&mut p, 1.0).unwrap();
        assert_eq!(p.key, key0);
        momentum_update(&mut p, 0.0).unwrap();
        for (k, q) in p.key.tensors().zip(p.query.tensors()) {
            assert_eq!(k.data(), q.data());
        }
    }

    #[test]
    fn momentum_small_step() {
        let mut p = pair();
        for t in p.key.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        for t in p.query.tensors_mut() {
            t.data_mut().fill(1.0);
        }
        momentum_update(&mut p, 0.999).unwrap();
        assert!(p.key.tensors().flat_map(|t| t.data()).all(|v| (v - 0.001).abs() < 1e-15));
    }

    fn loss_value(q: &Tensor, k: &Tensor, queue: &Tensor, tau: f64) -> f64 {
        let mut tape = Tape::new();
        let qv = tape.constant(q);
        let l = moco_infonce_loss(&mut tape, qv, k, queue, tau).unwrap();
        tape.scalar_value(l).unwrap()
    }

    #[test]
    fn hand_values() {
        let q = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        let neg = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!((loss_value(&q, &q, &neg, 1.0) - 0.31326).abs() < 1e-5);
        assert!(loss_value(&q, &q, &Tensor::zeros(&[0, 2]), 1.0).abs() < 1e-15);
    }

    #[test]
    fn decreasing_in_positive_similarity() {
        let neg = Tensor::from_rows(&[[0.0, 0.0, 1.0]]).unwrap();
        let q = Tensor::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let a = std::f64::consts::PI * (1.0 - step as f64 / 10.0);
            let k = Tensor::from_rows(&[[a.cos(), a.sin(), 0.0]]).unwrap();
            let l = loss_value(&q, &k, &neg, 0.5);
            assert!(l < prev);
            prev = l;
        }
    }

    fn trainer(lr: f64, m: f64) -> (Dataset, Pretrainer) {
        let data = generate_blobs(&BlobSpec::new(2, 3, 6, 0.05), 0).unwrap();
        let enc = init_encoder(&EncoderConfig::new(36, &[8], 3), 1).unwrap();
        let cfg = PretrainConfig {
            momentum: m,
            queue_size: 5,
            batch_size: 4,
            views: ViewConfig {
                out_size: 6,
                ..ViewConfig::default()
            },
            ..PretrainConfig::default()
        };
        let mut sched = LrSchedule::new(1.0, 0, 3).unwrap();
        sched.base_lr = lr;
        (data, Pretrainer::new(enc, cfg, SgdConfig::default(), sched, 2).unwrap())
    }

    #[test]
    fn key_frozen_and_loss_constant_without_updates() {
        let (data, mut t) = trainer(0.0, 1.0);
        t.config.queue_size = 0;
        t.queue = init_queue(0, 3, 0).unwrap();
        let key0 = t.pair.key.clone();
        let l0 = t.pretrain_epoch(&data, 0).unwrap().loss;
        let l1 = t.pretrain_epoch(&data, 0).unwrap().loss;
        assert_eq!(l0, l1);
        assert_eq!(t.pair.key, key0);
        assert!(t.pair.key.tensors().all(|x| x.grad().is_none()));
    }

    #[test]
    fn training_moves_query_and_key() {
        let (data, mut t) = trainer(0.1, 0.9);
        let key0 = t.pair.key.clone();
        t.pretrain_epoch(&data, 0).unwrap();
        assert_ne!(t.pair.key, key0);
        assert!(t.pair.key.tensors().all(|x| x.grad().is_none()));
        for r in t.queue.rows_in_order() {
            assert!((dot(r, r) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_batch_matches_hand_pipeline() {
        let (data, mut t) = trainer(0.1, 0.9);
        t.config.batch_size = data.len();
        let order = epoch_order(data.len(), 2, 0);
        let queue = t.queue.snapshot();
        let mut want = 0.0;
        for &i in &order {
            let (vq, vk) = view_pair(&data.images[i], &t.config.views, &RngStream::new(2, i as u64, 0));
            let q = t.pair.query.encode(&Tensor::new(&[1, 36], vq.into_data()).unwrap()).unwrap();
            let k = t.pair.key.encode(&Tensor::new(&[1, 36], vk.into_data()).unwrap()).unwrap();
            let pos = dot(q.data(), k.data()) / 0.2;
            let mut logits = vec![pos];
            logits.extend((0..queue.rows()).map(|j| dot(q.data(), queue.row(j)) / 0.2));
            want += crate::tensor::logsumexp(&logits) - pos;
        }
        want /= data.len() as f64;
        let got = t.pretrain_epoch(&data, 0).unwrap().loss;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}
