//! Distilling a frozen teacher into a small student.
//!
//! The default objective matches the student's softmax over similarities to
//! `D⁺` (queue plus own teacher embedding) against the teacher's sharper
//! softmax over the same anchors. The other strategies are baselines.

mod cluster;
mod losses;
mod trainer;

pub use cluster::{kmeans_fit, nearest, online_cluster_step, ClusterState, KMeansFit};
pub use losses::{
    binary_contrastive_loss, in_batch_infonce, infonce_distill_loss, infonce_value, l2_loss, pseudo_label_loss,
    seed_loss, seed_loss_value, similarity_logits, student_log_distribution, teacher_distribution, Anchors,
};
pub(crate) use trainer::view_batch;
pub use trainer::{epoch_order, round_robin_order, Distiller};

use crate::augment::ViewConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Seed,
    L2,
    InfoNce,
    Binary,
    KMeans,
    OnlineCluster,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Seed,
        Strategy::L2,
        Strategy::InfoNce,
        Strategy::Binary,
        Strategy::KMeans,
        Strategy::OnlineCluster,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Seed => "seed",
            Strategy::L2 => "l2",
            Strategy::InfoNce => "infonce",
            Strategy::Binary => "binary",
            Strategy::KMeans => "kmeans",
            Strategy::OnlineCluster => "online_cluster",
        }
    }

    /// Whether the strategy trains a classifier on pseudo-labels.
    pub fn uses_clusters(self) -> bool {
        matches!(self, Strategy::KMeans | Strategy::OnlineCluster)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?} (seed|l2|infonce|binary|kmeans|online_cluster)")))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub tau_t: f64,
    /// Student temperature; also the temperature of `infonce` and `binary`.
    pub tau_s: f64,
    pub strategy: Strategy,
    /// Queue capacity `K`.
    pub queue_size: usize,
    pub batch_size: usize,
    pub views: ViewConfig,
    /// Push the batch into the queue before scoring and use the queue alone
    /// as anchors, instead of per-sample `D⁺` and a push afterwards.
    pub enqueue_before_loss: bool,
    /// Weight of an extra in-batch Info-NCE term between two student views.
    pub moco_weight: f64,
    pub moco_tau: f64,
    /// Cluster count; `None` means four times the class count.
    pub clusters: Option<usize>,
    pub kmeans_iters: usize,
    pub cluster_momentum: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau_t: 0.01,
            tau_s: 0.2,
            strategy: Strategy::Seed,
            queue_size: 4096,
            batch_size: 64,
            views: ViewConfig::default(),
            enqueue_before_loss: false,
            moco_weight: 0.0,
            moco_tau: 0.2,
            clusters: None,
            kmeans_iters: 50,
            cluster_momentum: 0.99,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau_t", self.tau_t), ("tau_s", self.tau_s), ("moco_tau", self.moco_tau)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {t}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.moco_weight >= 0.0) {
            return Err(Error::Config(format!("moco_weight must be >= 0, got {}", self.moco_weight)));
        }
        if !(0.0..=1.0).contains(&self.cluster_momentum) {
            return Err(Error::Config(format!(
                "cluster_momentum must be in [0,1], got {}",
                self.cluster_momentum
            )));
        }
        if self.clusters == Some(0) {
            return Err(Error::Config("clusters must be >= 1".into()));
        }
        self.views.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("soft".parse::<Strategy>().is_err());
    }

    #[test]
    fn defaults_valid() {
        let c = DistillConfig::default();
        c.validate().unwrap();
        assert_eq!((c.tau_t, c.tau_s), (0.01, 0.2));
        let bad = DistillConfig {
            tau_t: 0.0,
            ..c
        };
        assert!(bad.validate().is_err());
    }
}
