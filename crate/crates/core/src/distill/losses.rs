//! Distillation objectives.
//!
//! All similarity-based losses score an embedding against a support set of
//! anchors, written `D⁺` below. During training `D⁺` differs per sample: the
//! shared queue rows followed by the sample's own teacher embedding. The
//! [`Anchors`] enum covers both that case and a single shared matrix.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The support set each row is scored against.
#[derive(Clone, Copy, Debug)]
pub enum Anchors<'a> {
    /// One `(K+1) × D` matrix shared by every row.
    Shared(&'a Tensor),
    /// Row `i` is scored against `queue` (`K × D`) followed by `targets[i]`.
    QueueWithTargets { queue: &'a Tensor, targets: &'a Tensor },
}

impl Anchors<'_> {
    fn dim(&self) -> usize {
        match self {
            Anchors::Shared(d) => d.cols(),
            Anchors::QueueWithTargets { queue, .. } => queue.cols(),
        }
    }

    /// Number of anchors per row, `K+1`.
    pub fn len(&self) -> usize {
        match self {
            Anchors::Shared(d) => d.rows(),
            Anchors::QueueWithTargets { queue, .. } => queue.rows() + 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

/// `z · D⁺ᵀ / τ` as a `B × (K+1)` node. Anchors are constants.
pub fn similarity_logits(tape: &mut Tape, z: Var, anchors: Anchors<'_>, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 || shape[1] != anchors.dim() {
        return Err(Error::shape("similarity_logits", &shape, &[0, anchors.dim()]));
    }
    let scores = match anchors {
        Anchors::Shared(d) => {
            let d = tape.constant(d);
            tape.matmul_nt(z, d)?
        }
        Anchors::QueueWithTargets { queue, targets } => {
            if targets.shape() != shape.as_slice() {
                return Err(Error::shape("similarity_logits", targets.shape(), &shape));
            }
            let t = tape.constant(targets);
            let pos = tape.row_dot(z, t)?;
            if queue.rows() == 0 {
                pos
            } else {
                let q = tape.constant(queue);
                let neg = tape.matmul_nt(z, q)?;
                tape.concat_cols(neg, pos)?
            }
        }
    };
    tape.scale(scores, 1.0 / tau)
}

/// Teacher target distribution: row-wise softmax of `z_t · D⁺ᵀ / τ_T`.
/// Nothing is recorded for differentiation.
pub fn teacher_distribution(z_t: &Tensor, anchors: Anchors<'_>, tau_t: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let z = tape.constant(z_t);
    let logits = similarity_logits(&mut tape, z, anchors, tau_t)?;
    let p = tape.softmax_rows(logits)?;
    Ok(tape.to_tensor(p))
}

/// Student log-distribution: row-wise log-softmax of `z_s · D⁺ᵀ / τ_S`.
/// Gradients flow into `z_s` only.
pub fn student_log_distribution(tape: &mut Tape, z_s: Var, anchors: Anchors<'_>, tau_s: f64) -> Result<Var> {
    let logits = similarity_logits(tape, z_s, anchors, tau_s)?;
    tape.log_softmax_rows(logits)
}

/// Soft cross-entropy `−(1/B) Σ_i Σ_j p_t[i,j] · log_p_s[i,j]`.
pub fn seed_loss(tape: &mut Tape, p_t: &Tensor, log_p_s: Var) -> Result<Var> {
    if p_t.shape() != tape.shape(log_p_s) {
        return Err(Error::shape("seed_loss", p_t.shape(), tape.shape(log_p_s)));
    }
    let b = p_t.rows() as f64;
    let p = tape.constant(p_t);
    let prod = tape.mul(p, log_p_s)?;
    let total = tape.sum(prod)?;
    tape.scale(total, -1.0 / b)
}

/// Hard-target limit of [`seed_loss`]:
/// `−(1/B) Σ_i [z_t[i]·z_s[i]/τ − LSE_{d∈D⁺}(z_s[i]·d/τ)]`.
pub fn infonce_distill_loss(tape: &mut Tape, z_t: &Tensor, z_s: Var, anchors: Anchors<'_>, tau: f64) -> Result<Var> {
    if z_t.shape() != tape.shape(z_s) {
        return Err(Error::shape("infonce_distill_loss", z_t.shape(), tape.shape(z_s)));
    }
    let b = z_t.rows() as f64;
    let logits = similarity_logits(tape, z_s, anchors, tau)?;
    let lse = tape.logsumexp_rows(logits)?;
    let t = tape.constant(z_t);
    let pos = tape.row_dot(z_s, t)?;
    let pos = tape.scale(pos, 1.0 / tau)?;
    let per_row = tape.sub(lse, pos)?;
    let total = tape.sum(per_row)?;
    tape.scale(total, 1.0 / b)
}

/// `(1/B) Σ_i ‖z_t[i] − z_s[i]‖²`.
pub fn l2_loss(tape: &mut Tape, z_t: &Tensor, z_s: Var) -> Result<Var> {
    if z_t.shape() != tape.shape(z_s) {
        return Err(Error::shape("l2_loss", z_t.shape(), tape.shape(z_s)));
    }
    let b = z_t.rows() as f64;
    let t = tape.constant(z_t);
    let diff = tape.sub(t, z_s)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    tape.scale(total, 1.0 / b)
}

/// Logistic positive/negative objective with the queue as negatives:
/// `(1/B) Σ_i [−log σ(z_s·z_t/τ) − Σ_j log(1 − σ(z_s·d_j/τ))]`.
pub fn binary_contrastive_loss(tape: &mut Tape, z_t: &Tensor, z_s: Var, negatives: &Tensor, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    if z_t.shape() != tape.shape(z_s) {
        return Err(Error::shape("binary_contrastive_loss", z_t.shape(), tape.shape(z_s)));
    }
    if negatives.rows() > 0 && negatives.cols() != z_t.cols() {
        return Err(Error::shape("binary_contrastive_loss", negatives.shape(), z_t.shape()));
    }
    let b = z_t.rows() as f64;
    let t = tape.constant(z_t);
    let pos = tape.row_dot(z_s, t)?;
    // −log σ(x) = softplus(−x)
    let pos = tape.scale(pos, -1.0 / tau)?;
    let pos = tape.softplus(pos)?;
    let mut total = tape.sum(pos)?;
    if negatives.rows() > 0 {
        let q = tape.constant(negatives);
        let neg = tape.matmul_nt(z_s, q)?;
        // −log(1 − σ(x)) = softplus(x)
        let neg = tape.scale(neg, 1.0 / tau)?;
        let neg = tape.softplus(neg)?;
        let neg = tape.sum(neg)?;
        total = tape.add(total, neg)?;
    }
    tape.scale(total, 1.0 / b)
}

/// Mean cross-entropy of `logits` (`B × C`) against integer labels.
pub fn pseudo_label_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("pseudo_label_loss", &shape, &[labels.len()]));
    }
    let (b, c) = (shape[0], shape[1]);
    let mut onehot = Tensor::zeros(&[b, c]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid(format!("label {y} out of range for {c} classes")));
        }
        onehot.row_mut(i)[y] = 1.0;
    }
    let logp = tape.log_softmax_rows(logits)?;
    let mask = tape.constant(&onehot);
    let picked = tape.mul(mask, logp)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / b as f64)
}

/// Info-NCE between two views of the same batch with in-batch negatives;
/// `keys` is a constant (stop-gradient) `B × D` matrix.
pub fn in_batch_infonce(tape: &mut Tape, queries: Var, keys: &Tensor, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    if keys.shape() != tape.shape(queries) {
        return Err(Error::shape("in_batch_infonce", keys.shape(), tape.shape(queries)));
    }
    let b = keys.rows();
    let logits = similarity_logits(tape, queries, Anchors::Shared(keys), tau)?;
    pseudo_label_loss(tape, logits, &(0..b).collect::<Vec<_>>())
}

/// Convenience: the full SEED loss value for fixed embeddings.
pub fn seed_loss_value(z_t: &Tensor, z_s: &Tensor, anchors: Anchors<'_>, tau_t: f64, tau_s: f64) -> Result<f64> {
    let p_t = teacher_distribution(z_t, anchors, tau_t)?;
    let mut tape = Tape::new();
    let zs = tape.constant(z_s);
    let logp = student_log_distribution(&mut tape, zs, anchors, tau_s)?;
    let loss = seed_loss(&mut tape, &p_t, logp)?;
    tape.scalar_value(loss)
}

/// Convenience: [`infonce_distill_loss`] for fixed embeddings.
pub fn infonce_value(z_t: &Tensor, z_s: &Tensor, anchors: Anchors<'_>, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let zs = tape.constant(z_s);
    let loss = infonce_distill_loss(&mut tape, z_t, zs, anchors, tau)?;
    tape.scalar_value(loss)
}
