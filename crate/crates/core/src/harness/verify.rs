//! Randomized checks of the loss identities and of every differentiable op.
//!
//! Each suite draws fresh instances from a seeded stream, measures how far
//! the implementation strays from an independently computed reference, and
//! reports the worst case.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Tape, Var};
use crate::distill::{
    binary_contrastive_loss, in_batch_infonce, infonce_value, l2_loss, pseudo_label_loss, seed_loss,
    seed_loss_value, student_log_distribution, teacher_distribution, Anchors,
};
use crate::error::{Error, Result};
use crate::tensor::{dot, logsumexp, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    Normalization,
    EntropyBound,
    UpperBound,
    InfonceLimit,
    Decomposition,
    Argmax,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Gradients,
        Suite::Normalization,
        Suite::EntropyBound,
        Suite::UpperBound,
        Suite::InfonceLimit,
        Suite::Decomposition,
        Suite::Argmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradients => "gradients",
            Suite::Normalization => "normalization",
            Suite::EntropyBound => "entropy_bound",
            Suite::UpperBound => "upper_bound",
            Suite::InfonceLimit => "infonce_limit",
            Suite::Decomposition => "decomposition",
            Suite::Argmax => "argmax",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Suite::Gradients => 1e-5,
            Suite::Normalization => 1e-9,
            Suite::EntropyBound => 1e-9,
            Suite::UpperBound => 1e-9,
            Suite::InfonceLimit => 1e-6,
            Suite::Decomposition => 1e-10,
            Suite::Argmax => 0.0,
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            let names: Vec<_> = Suite::ALL.iter().map(|x| x.name()).collect();
            Error::Config(format!("unknown suite {s:?}; valid: {}, all", names.join(", ")))
        })
    }
}

/// `all` or a single suite name.
pub fn parse_suites(name: &str) -> Result<Vec<Suite>> {
    if name == "all" {
        Ok(Suite::ALL.to_vec())
    } else {
        Ok(vec![name.parse()?])
    }
}

/// A deliberate defect injected into the loss under test, used to confirm
/// the suites can fail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Scores the student with `−τ_S`.
    NegateStudentTau,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub trials: usize,
    pub max_violation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<14} trials={:<6} max_violation={:.3e} tolerance={:.0e} {}",
            self.suite.name(),
            self.trials,
            self.max_violation,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            writeln!(f, "{s}")?;
        }
        Ok(())
    }
}

pub fn verify(suites: &[Suite], trials: usize, seed: u64) -> Result<VerifyReport> {
    verify_with_fault(suites, trials, seed, Fault::None)
}

pub fn verify_with_fault(suites: &[Suite], trials: usize, seed: u64, fault: Fault) -> Result<VerifyReport> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let mut out = Vec::with_capacity(suites.len());
    for (i, &suite) in suites.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let mut v = Checker { rng, fault };
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..trials {
            let x = match suite {
                Suite::Gradients => v.gradients()?,
                Suite::Normalization => v.normalization()?,
                Suite::EntropyBound => v.entropy_bound()?,
                Suite::UpperBound => v.upper_bound()?,
                Suite::InfonceLimit => v.infonce_limit()?,
                Suite::Decomposition => v.decomposition()?,
                Suite::Argmax => v.argmax()?,
            };
            // NaN counts as the worst possible outcome.
            worst = if x.is_nan() { f64::INFINITY } else { worst.max(x) };
        }
        let tolerance = suite.tolerance();
        let passed = match suite {
            Suite::Argmax => worst < 0.0,
            _ => worst < tolerance,
        };
        out.push(SuiteReport {
            suite,
            trials,
            max_violation: worst,
            tolerance,
            passed,
        });
    }
    Ok(VerifyReport { suites: out })
}

/// A random instance: `B` teacher and student rows and a `K`-row queue, all
/// unit norm.
struct Instance {
    z_t: Tensor,
    z_s: Tensor,
    queue: Tensor,
}

impl Instance {
    fn anchors(&self) -> Anchors<'_> {
        Anchors::QueueWithTargets {
            queue: &self.queue,
            targets: &self.z_t,
        }
    }

    /// `D⁺` for row `i`.
    fn support(&self, i: usize) -> Vec<&[f64]> {
        (0..self.queue.rows())
            .map(|j| self.queue.row(j))
            .chain(std::iter::once(self.z_t.row(i)))
            .collect()
    }
}

struct Checker {
    rng: ChaCha8Rng,
    fault: Fault,
}

impl Checker {
    fn normal(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.sample(StandardNormal)).collect();
        Tensor::new(shape, data).expect("shape matches data")
    }

    fn unit_rows(&mut self, rows: usize, dim: usize) -> Tensor {
        self.normal(&[rows, dim]).l2_normalize_rows(1e-12).expect("matrix")
    }

    fn instance(&mut self, min_k: usize) -> Instance {
        let b = self.rng.random_range(1..=4);
        let k = self.rng.random_range(min_k..=min_k + 15);
        let d = self.rng.random_range(2..=8);
        Instance {
            z_t: self.unit_rows(b, d),
            z_s: self.unit_rows(b, d),
            queue: self.unit_rows(k, d),
        }
    }

    fn tau(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..=hi)
    }

    /// The SEED loss as implemented, with any injected fault applied.
    fn seed_under_test(&self, inst: &Instance, tau_t: f64, tau_s: f64) -> Result<f64> {
        match self.fault {
            Fault::None => seed_loss_value(&inst.z_t, &inst.z_s, inst.anchors(), tau_t, tau_s),
            Fault::NegateStudentTau => {
                // z_s·d/(−τ) equals (−z_s)·d/τ.
                let mut neg = inst.z_s.clone();
                neg.data_mut().iter_mut().for_each(|v| *v = -*v);
                seed_loss_value(&inst.z_t, &neg, inst.anchors(), tau_t, tau_s)
            }
        }
    }

    /// Reference soft cross-entropy terms: per row, the weights `w` and
    /// `(−z_s·d_j/τ_S + LSE)` for every anchor.
    fn reference_terms(inst: &Instance, i: usize, tau_t: f64, tau_s: f64) -> (Vec<f64>, Vec<f64>) {
        let support = inst.support(i);
        let (zt, zs) = (inst.z_t.row(i), inst.z_s.row(i));
        let t_logits: Vec<f64> = support.iter().map(|d| dot(zt, d) / tau_t).collect();
        let t_lse = logsumexp(&t_logits);
        let w = t_logits.iter().map(|l| (l - t_lse).exp()).collect();
        let s_logits: Vec<f64> = support.iter().map(|d| dot(zs, d) / tau_s).collect();
        let s_lse = logsumexp(&s_logits);
        let terms = s_logits.iter().map(|l| s_lse - l).collect();
        (w, terms)
    }

    fn gradients(&mut self) -> Result<f64> {
        let b = self.rng.random_range(1..=4);
        let k = self.rng.random_range(1..=6);
        let d = self.rng.random_range(2..=5);
        let tau = self.tau(0.1, 1.0);
        let mut worst: f64 = 0.0;
        let mut check = |this: &mut Self, inputs: Vec<Tensor>, f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>| {
            let e = finite_difference(&mut this.rng, &inputs, f)?;
            worst = worst.max(e);
            Ok::<_, Error>(())
        };

        let (x, y) = (self.normal(&[b, d]), self.normal(&[b, d]));
        let (w, wt, bias, extra, logits) = (
            self.normal(&[d, k]),
            self.normal(&[k, d]),
            self.normal(&[d]),
            self.normal(&[b, k]),
            self.normal(&[b, k]),
        );
        check(self, vec![x.clone(), w], &|t, v| t.matmul(v[0], v[1]))?;
        check(self, vec![x.clone(), wt], &|t, v| t.matmul_nt(v[0], v[1]))?;
        check(self, vec![x.clone(), y.clone()], &|t, v| t.add(v[0], v[1]))?;
        check(self, vec![x.clone(), y.clone()], &|t, v| t.sub(v[0], v[1]))?;
        check(self, vec![x.clone(), y.clone()], &|t, v| t.mul(v[0], v[1]))?;
        check(self, vec![x.clone()], &|t, v| t.mul(v[0], v[0]))?;
        check(self, vec![x.clone(), bias], &|t, v| t.add_bias(v[0], v[1]))?;
        check(self, vec![x.clone()], &move |t, v| t.scale(v[0], 1.0 / tau))?;
        let away_from_kink = {
            let mut r = self.normal(&[b, d]);
            r.data_mut().iter_mut().filter(|v| v.abs() < 1e-3).for_each(|v| *v = 0.5);
            r
        };
        check(self, vec![away_from_kink], &|t, v| t.relu(v[0]))?;
        check(self, vec![x.clone()], &|t, v| t.softplus(v[0]))?;
        check(self, vec![x.clone()], &|t, v| t.l2_normalize_rows(v[0], 1e-12))?;
        check(self, vec![x.clone()], &|t, v| t.softmax_rows(v[0]))?;
        check(self, vec![x.clone()], &|t, v| t.log_softmax_rows(v[0]))?;
        check(self, vec![x.clone(), y.clone()], &|t, v| t.row_dot(v[0], v[1]))?;
        check(self, vec![x.clone()], &|t, v| t.logsumexp_rows(v[0]))?;
        check(self, vec![x.clone(), extra], &|t, v| t.concat_cols(v[0], v[1]))?;
        check(self, vec![x.clone()], &|t, v| t.sum(v[0]))?;
        check(self, vec![x.clone()], &|t, v| t.mean(v[0]))?;

        // Composite objectives, differentiated through the normalization.
        let z_t = self.unit_rows(b, d);
        let queue = self.unit_rows(k, d);
        let tau_t = self.tau(0.1, 1.0);
        let labels: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..k)).collect();
        let (zt, q) = (z_t.clone(), queue.clone());
        check(self, vec![x.clone()], &move |t, v| {
            let anchors = Anchors::QueueWithTargets { queue: &q, targets: &zt };
            let p_t = teacher_distribution(&zt, anchors, tau_t)?;
            let zs = t.l2_normalize_rows(v[0], 1e-12)?;
            let logp = student_log_distribution(t, zs, anchors, tau)?;
            seed_loss(t, &p_t, logp)
        })?;
        let (zt, q) = (z_t.clone(), queue.clone());
        check(self, vec![x.clone()], &move |t, v| {
            let zs = t.l2_normalize_rows(v[0], 1e-12)?;
            crate::distill::infonce_distill_loss(t, &zt, zs, Anchors::QueueWithTargets { queue: &q, targets: &zt }, tau)
        })?;
        let zt = z_t.clone();
        check(self, vec![x.clone()], &move |t, v| {
            let zs = t.l2_normalize_rows(v[0], 1e-12)?;
            l2_loss(t, &zt, zs)
        })?;
        let (zt, q) = (z_t.clone(), queue.clone());
        check(self, vec![x.clone()], &move |t, v| {
            let zs = t.l2_normalize_rows(v[0], 1e-12)?;
            binary_contrastive_loss(t, &zt, zs, &q, tau)
        })?;
        check(self, vec![logits], &move |t, v| pseudo_label_loss(t, v[0], &labels))?;
        let zt = z_t;
        check(self, vec![x], &move |t, v| {
            let zs = t.l2_normalize_rows(v[0], 1e-12)?;
            in_batch_infonce(t, zs, &zt, tau)
        })?;
        Ok(worst)
    }

    fn normalization(&mut self) -> Result<f64> {
        let inst = self.instance(0);
        let (tau_t, tau_s) = (self.tau(0.005, 1.0), self.tau(0.005, 1.0));
        let p_t = teacher_distribution(&inst.z_t, inst.anchors(), tau_t)?;
        let mut tape = Tape::new();
        let zs = tape.constant(&inst.z_s);
        let logp = student_log_distribution(&mut tape, zs, inst.anchors(), tau_s)?;
        let logp = tape.to_tensor(logp);
        let mut worst: f64 = 0.0;
        for i in 0..p_t.rows() {
            worst = worst.max((p_t.row(i).iter().sum::<f64>() - 1.0).abs());
            worst = worst.max((logp.row(i).iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs());
        }
        Ok(worst)
    }

    /// Cross-entropy never falls below the teacher entropy, and meets it
    /// when the student reproduces the teacher.
    fn entropy_bound(&mut self) -> Result<f64> {
        let mut inst = self.instance(0);
        let (tau_t, tau_s) = (self.tau(0.01, 1.0), self.tau(0.01, 1.0));
        let p_t = teacher_distribution(&inst.z_t, inst.anchors(), tau_t)?;
        let entropy = (0..p_t.rows())
            .map(|i| -p_t.row(i).iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
            .sum::<f64>()
            / p_t.rows() as f64;
        let loss = self.seed_under_test(&inst, tau_t, tau_s)?;
        inst.z_s = inst.z_t.clone();
        let matched = self.seed_under_test(&inst, tau_t, tau_t)?;
        Ok((entropy - loss).max((matched - entropy).abs()))
    }

    /// The loss dominates the weakened bound that drops the positive's
    /// normalizer and shrinks the others to the queue-only LSE. Drawn from
    /// the regime `(K+1)·e^{−1/τ_S} > 1`, where the dropped term is positive.
    fn upper_bound(&mut self) -> Result<f64> {
        let inst = self.instance(8);
        let (tau_t, tau_s) = (self.tau(0.01, 1.0), self.tau(0.5, 1.0));
        let k = inst.queue.rows();
        let mut bound = 0.0;
        let mut lse_gap: f64 = f64::NEG_INFINITY;
        for i in 0..inst.z_t.rows() {
            let (w, _) = Self::reference_terms(&inst, i, tau_t, tau_s);
            let zs = inst.z_s.row(i);
            let support = inst.support(i);
            let s_logits: Vec<f64> = support.iter().map(|d| dot(zs, d) / tau_s).collect();
            let lse_queue = logsumexp(&s_logits[..k]);
            bound += w[k] * -s_logits[k];
            bound += (0..k).map(|j| w[j] * (lse_queue - s_logits[j])).sum::<f64>();
            let floor = ((k + 1) as f64).ln() - 1.0 / tau_s;
            lse_gap = lse_gap.max(floor - logsumexp(&s_logits));
        }
        bound /= inst.z_t.rows() as f64;
        let loss = self.seed_under_test(&inst, tau_t, tau_s)?;
        Ok((bound - loss).max(lse_gap))
    }

    fn infonce_limit(&mut self) -> Result<f64> {
        let inst = self.instance(1);
        let tau_s = self.tau(0.05, 1.0);
        let seed = self.seed_under_test(&inst, 1e-8, tau_s)?;
        let nce = infonce_value(&inst.z_t, &inst.z_s, inst.anchors(), tau_s)?;
        Ok((seed - nce).abs())
    }

    /// `L = (1/B) Σ_i Σ_j w_j (−z_s·d_j/τ_S + LSE(D⁺, z_s/τ_S))`.
    fn decomposition(&mut self) -> Result<f64> {
        let inst = self.instance(0);
        let (tau_t, tau_s) = (self.tau(0.01, 1.0), self.tau(0.05, 1.0));
        let b = inst.z_t.rows();
        let reference = (0..b)
            .map(|i| {
                let (w, terms) = Self::reference_terms(&inst, i, tau_t, tau_s);
                w.iter().zip(&terms).map(|(w, t)| w * t).sum::<f64>()
            })
            .sum::<f64>()
            / b as f64;
        let loss = self.seed_under_test(&inst, tau_t, tau_s)?;
        Ok((loss - reference).abs())
    }

    /// The sample's own slot carries the largest teacher weight. Returns
    /// `max_{j≤K} p_j − p_{K+1}`, negative when the property holds strictly.
    fn argmax(&mut self) -> Result<f64> {
        let b = self.rng.random_range(1..=4);
        let k = self.rng.random_range(1..=64);
        let d = self.rng.random_range(2..=16);
        let inst = Instance {
            z_t: self.unit_rows(b, d),
            z_s: self.unit_rows(b, d),
            queue: self.unit_rows(k, d),
        };
        let tau_t = self.tau(0.01, 1.0);
        let p = teacher_distribution(&inst.z_t, inst.anchors(), tau_t)?;
        let mut worst = f64::NEG_INFINITY;
        for i in 0..b {
            let row = p.row(i);
            let others = row[..k].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            worst = worst.max(others - row[k]);
        }
        Ok(worst)
    }
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of `f` with respect to every input element. Non-scalar outputs
/// are reduced with fixed random weights first.
fn finite_difference(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor],
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    const EPS: f64 = 1e-6;
    // Keeps the ratio meaningful for gradients near zero.
    const FLOOR: f64 = 1e-3;

    let inputs: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_requires_grad(true)).collect();
    let mut probe = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.leaf(t)).collect();
    let out = f(&mut probe, &vars)?;
    let shape = probe.shape(out).to_vec();
    let weights = (!shape.is_empty()).then(|| {
        let n = shape.iter().product();
        Tensor::new(&shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape")
    });

    let eval = |inputs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let mut out = f(&mut tape, &vars)?;
        if let Some(w) = &weights {
            let w = tape.constant(w);
            let prod = tape.mul(out, w)?;
            out = tape.sum(prod)?;
        }
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(&inputs)?;
    let grads = tape.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut perturbed = inputs.to_vec();
    for (n, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[n].numel()]);
        for (e, &a) in analytic.iter().enumerate() {
            let base = inputs[n].data()[e];
            perturbed[n].data_mut()[e] = base + EPS;
            let (t, _, o) = eval(&perturbed)?;
            let up = t.scalar_value(o)?;
            perturbed[n].data_mut()[e] = base - EPS;
            let (t, _, o) = eval(&perturbed)?;
            let down = t.scalar_value(o)?;
            perturbed[n].data_mut()[e] = base;
            let numeric = (up - down) / (2.0 * EPS);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let r = verify(&Suite::ALL, 20, 0).unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn negated_student_tau_is_caught() {
        let r = verify_with_fault(&Suite::ALL, 20, 0, Fault::NegateStudentTau).unwrap();
        assert!(!r.passed());
        for s in [Suite::EntropyBound, Suite::UpperBound, Suite::InfonceLimit, Suite::Decomposition] {
            assert!(!r.suites.iter().find(|x| x.suite == s).unwrap().passed, "{s:?}");
        }
    }

    #[test]
    fn suite_names() {
        assert_eq!(parse_suites("all").unwrap().len(), 7);
        assert_eq!(parse_suites("argmax").unwrap(), vec![Suite::Argmax]);
        let e = parse_suites("bogus").unwrap_err().to_string();
        assert!(e.contains("gradients") && e.contains("all"));
        assert!(verify(&[Suite::Argmax], 0, 0).is_err());
    }
}
