use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cluster::{kmeans_fit, online_cluster_step, ClusterState};
use super::losses::{
    binary_contrastive_loss, in_batch_infonce, infonce_distill_loss, l2_loss, pseudo_label_loss, seed_loss,
    student_log_distribution, teacher_distribution, Anchors,
};
use super::{DistillConfig, Strategy};
use crate::augment::{make_view, view_pair, RngStream, ViewConfig};
use crate::autograd::{Tape, Var};
use crate::dataset::Dataset;
use crate::encoder::{EncoderParams, Linear};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::optim::{sgd_step, LrSchedule, OptimizerState, SgdConfig};
use crate::queue::{init_queue, FeatureQueue};
use crate::tensor::Tensor;

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// A seeded shuffle of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut epoch_rng(seed, epoch));
    idx
}

/// Every index once, interleaved one label at a time so that each batch is
/// close to uniform over labels.
pub fn round_robin_order(labels: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let c = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = epoch_rng(seed, epoch);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in labels.iter().enumerate() {
        pools[l].push(i);
    }
    for p in &mut pools {
        p.shuffle(&mut rng);
    }
    let mut order = Vec::with_capacity(labels.len());
    let mut round = 0;
    while order.len() < labels.len() {
        for p in &pools {
            if let Some(&i) = p.get(round) {
                order.push(i);
            }
        }
        round += 1;
    }
    order
}

/// Teacher and student view matrices for the samples `idx`.
pub(crate) fn view_batch(data: &Dataset, idx: &[usize], views: &ViewConfig, seed: u64, epoch: usize) -> Result<(Tensor, Tensor)> {
    let mut a = Vec::with_capacity(idx.len());
    let mut b = Vec::with_capacity(idx.len());
    for &i in idx {
        let stream = RngStream::new(seed, i as u64, epoch as u64);
        let (t, s) = view_pair(&data.images[i], views, &stream);
        a.push(t.into_data());
        b.push(s.into_data());
    }
    Ok((Tensor::from_rows(&a)?, Tensor::from_rows(&b)?))
}

fn extra_view_batch(data: &Dataset, idx: &[usize], views: &ViewConfig, seed: u64, epoch: usize) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| {
            let stream = RngStream::new(seed, i as u64, epoch as u64);
            make_view(&data.images[i], views, &mut stream.branch(2)).into_data()
        })
        .collect();
    Tensor::from_rows(&rows)
}

fn init_classifier(classes: usize, dim: usize, seed: u64) -> Linear {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1A5_5F1E);
    let bound = (6.0 / dim as f64).sqrt();
    let w = (0..classes * dim).map(|_| rng.random_range(-bound..bound)).collect();
    Linear {
        weight: Tensor::new(&[classes, dim], w).expect("shape").with_requires_grad(true),
        bias: Tensor::zeros(&[classes]).with_requires_grad(true),
    }
}

fn trainable<'a>(student: &'a mut EncoderParams, head: &'a mut Option<Linear>) -> Vec<&'a mut Tensor> {
    let mut v = student.tensors_mut();
    if let Some(c) = head {
        v.push(&mut c.weight);
        v.push(&mut c.bias);
    }
    v
}

/// State of one distillation run: frozen teacher, trainable student, queue,
/// optimizer, and the extra state of clustering strategies.
#[derive(Clone, Debug)]
pub struct Distiller {
    pub teacher: EncoderParams,
    pub student: EncoderParams,
    pub queue: FeatureQueue,
    pub config: DistillConfig,
    pub sgd: SgdConfig,
    pub schedule: LrSchedule,
    pub optimizer: OptimizerState,
    /// Linear head on the student embedding, for the clustering strategies.
    pub classifier: Option<Linear>,
    /// Fixed k-means labels per sample.
    pub pseudo_labels: Option<Vec<usize>>,
    pub clusters: Option<ClusterState>,
    seed: u64,
}

impl Distiller {
    /// The teacher is frozen here. `data` is needed only by the clustering
    /// strategies (class count and teacher features).
    pub fn new(
        teacher: EncoderParams,
        student: EncoderParams,
        data: &Dataset,
        config: DistillConfig,
        sgd: SgdConfig,
        schedule: LrSchedule,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let dim = teacher.config().embed_dim;
        if student.config().embed_dim != dim {
            return Err(Error::Config(format!(
                "teacher embeds to {dim} dims but student to {}",
                student.config().embed_dim
            )));
        }
        let input = config.views.out_size * config.views.out_size * data.images.first().map_or(1, |i| i.channels);
        for (who, enc) in [("teacher", &teacher), ("student", &student)] {
            if enc.config().input_dim != input {
                return Err(Error::Config(format!(
                    "{who} input_dim {} does not match view size {input}",
                    enc.config().input_dim
                )));
            }
        }
        let teacher = teacher.frozen();
        let queue = init_queue(config.queue_size, dim, seed ^ 0x5EED_0001)?;

        let (mut classifier, mut pseudo_labels, mut clusters) = (None, None, None);
        if config.strategy.uses_clusters() {
            let c = config.clusters.unwrap_or(4 * data.num_classes.max(1)).min(data.len().max(1));
            classifier = Some(init_classifier(c, dim, seed));
            let feats = teacher.encode(&data.features(config.views.out_size))?;
            match config.strategy {
                Strategy::KMeans => {
                    let fit = kmeans_fit(&feats, c, config.kmeans_iters, seed)?;
                    pseudo_labels = Some(fit.labels);
                }
                _ => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0C1D);
                    let picks = rand::seq::index::sample(&mut rng, feats.rows(), c).into_vec();
                    let rows: Vec<&[f64]> = picks.iter().map(|&i| feats.row(i)).collect();
                    clusters = Some(ClusterState {
                        centroids: Tensor::from_rows(&rows)?,
                        ema_momentum: config.cluster_momentum,
                    });
                }
            }
        }

        let mut d = Self {
            teacher,
            student,
            queue,
            config,
            sgd,
            schedule,
            optimizer: OptimizerState::new(std::iter::empty()),
            classifier,
            pseudo_labels,
            clusters,
            seed,
        };
        d.optimizer = OptimizerState::new(trainable(&mut d.student, &mut d.classifier).into_iter().map(|t| &*t));
        Ok(d)
    }


    /// Sample order for `epoch`; the k-means strategy balances batches over
    /// pseudo-labels.
    pub fn order(&self, n: usize, epoch: usize) -> Vec<usize> {
        match &self.pseudo_labels {
            Some(l) => round_robin_order(l, self.seed, epoch),
            None => epoch_order(n, self.seed, epoch),
        }
    }

    /// Loss of one batch, recorded on `tape`, plus the classifier's weight
    /// and bias handles when the strategy has one. `z_t` is the teacher
    /// batch. Queue and cluster state are updated as the strategy requires.
    pub fn batch_loss(&mut self, tape: &mut Tape, z_t: &Tensor, z_s: Var, idx: &[usize]) -> Result<(Var, Option<(Var, Var)>)> {
        let cfg = &self.config;
        if cfg.enqueue_before_loss {
            self.queue.enqueue_batch(z_t)?;
        }
        let snapshot = self.queue.snapshot();
        let anchors = if cfg.enqueue_before_loss {
            Anchors::Shared(&snapshot)
        } else {
            Anchors::QueueWithTargets {
                queue: &snapshot,
                targets: z_t,
            }
        };
        let mut head_vars = None;
        let loss = match cfg.strategy {
            Strategy::Seed => {
                let p_t = teacher_distribution(z_t, anchors, cfg.tau_t)?;
                let log_p_s = student_log_distribution(tape, z_s, anchors, cfg.tau_s)?;
                seed_loss(tape, &p_t, log_p_s)?
            }
            Strategy::InfoNce => infonce_distill_loss(tape, z_t, z_s, anchors, cfg.tau_s)?,
            Strategy::L2 => l2_loss(tape, z_t, z_s)?,
            Strategy::Binary => binary_contrastive_loss(tape, z_t, z_s, &snapshot, cfg.tau_s)?,
            Strategy::KMeans | Strategy::OnlineCluster => {
                let labels: Vec<usize> = match (&self.pseudo_labels, &mut self.clusters) {
                    (Some(l), _) => idx.iter().map(|&i| l[i]).collect(),
                    (None, Some(state)) => online_cluster_step(state, z_t)?,
                    _ => return Err(Error::invalid("cluster strategy without cluster state")),
                };
                let head = self.classifier.as_ref().expect("cluster strategies carry a classifier");
                let w = tape.leaf(&head.weight);
                let b = tape.leaf(&head.bias);
                let lin = tape.matmul_nt(z_s, w)?;
                let logits = tape.add_bias(lin, b)?;
                head_vars = Some((w, b));
                pseudo_label_loss(tape, logits, &labels)?
            }
        };
        Ok((loss, head_vars))
    }

    /// One pass over `data`: views, frozen teacher embeddings, the configured
    /// loss, backward, an SGD step at the epoch's learning rate, then the
    /// queue update. Returns the sample-weighted mean loss.
    pub fn distill_epoch(&mut self, data: &Dataset, epoch: usize) -> Result<MetricsRecord> {
        let lr = self.schedule.lr_at(epoch)?;
        let order = self.order(data.len(), epoch);
        let mut total = 0.0;
        for idx in order.chunks(self.config.batch_size) {
            let (x_t, x_s) = view_batch(data, idx, &self.config.views, self.seed, epoch)?;
            let z_t = self.teacher.encode(&x_t)?;

            let mut tape = Tape::new();
            let x = tape.constant(&x_s);
            let out = self.student.forward(&mut tape, x)?;
            let (mut loss, head_vars) = self.batch_loss(&mut tape, &z_t, out.embedding, idx)?;
            if self.config.moco_weight > 0.0 {
                let x2 = extra_view_batch(data, idx, &self.config.views, self.seed, epoch)?;
                let keys = self.student.encode(&x2)?;
                let extra = in_batch_infonce(&mut tape, out.embedding, &keys, self.config.moco_tau)?;
                let extra = tape.scale(extra, self.config.moco_weight)?;
                loss = tape.add(loss, extra)?;
            }
            let value = tape.scalar_value(loss)?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("distill loss at epoch {epoch}"),
                });
            }
            total += value * idx.len() as f64;

            let grads = tape.backward(loss)?;
            self.student.collect_grads(&grads, &out)?;
            if let (Some(head), Some((w, b))) = (&mut self.classifier, head_vars) {
                grads.write_to(w, &mut head.weight)?;
                grads.write_to(b, &mut head.bias)?;
            }
            let mut params = trainable(&mut self.student, &mut self.classifier);
            sgd_step(&mut params, &mut self.optimizer, lr, &self.sgd)?;
            if !self.config.enqueue_before_loss {
                self.queue.enqueue_batch(&z_t)?;
            }
        }
        Ok(MetricsRecord {
            epoch,
            phase: "distill".into(),
            loss: total / data.len().max(1) as f64,
            knn_top1: None,
            lr,
            wall_ms: 0,
        })
    }
}
