//! Loss invariants against straightforward reference computations.

use proptest::prelude::*;
use seed_core::autograd::Tape;
use seed_core::distill::{infonce_value, seed_loss_value, student_log_distribution, teacher_distribution, Anchors};
use seed_core::Tensor;

#[derive(Clone, Debug)]
struct Case {
    z_t: Tensor,
    z_s: Tensor,
    queue: Tensor,
}

impl Case {
    fn anchors(&self) -> Anchors<'_> {
        Anchors::QueueWithTargets {
            queue: &self.queue,
            targets: &self.z_t,
        }
    }

    fn support(&self, i: usize) -> Vec<Vec<f64>> {
        let mut d: Vec<Vec<f64>> = (0..self.queue.rows()).map(|j| self.queue.row(j).to_vec()).collect();
        d.push(self.z_t.row(i).to_vec());
        d
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lse(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let l = lse(x);
    x.iter().map(|v| (v - l).exp()).collect()
}

fn unit(rows: usize, dim: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, dim), rows).prop_filter_map("non-zero rows", move |rows| {
        rows.iter().all(|r| dot(r, r) > 1e-4).then(|| {
            let rows: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    let n = dot(r, r).sqrt();
                    r.iter().map(|v| v / n).collect()
                })
                .collect();
            if rows.is_empty() {
                Tensor::zeros(&[0, dim])
            } else {
                Tensor::from_rows(&rows).unwrap()
            }
        })
    })
}

fn case(min_k: usize) -> impl Strategy<Value = Case> {
    (1usize..4, min_k..min_k + 12, 2usize..7)
        .prop_flat_map(|(b, k, d)| (unit(b, d), unit(b, d), unit(k, d)))
        .prop_map(|(z_t, z_s, queue)| Case { z_t, z_s, queue })
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

proptest! {
    #[test]
    fn distributions_are_normalized(c in case(0), tt in 0.005f64..1.0, ts in 0.005f64..1.0) {
        let p = teacher_distribution(&c.z_t, c.anchors(), tt).unwrap();
        let mut tape = Tape::new();
        let zs = tape.constant(&c.z_s);
        let logq = student_log_distribution(&mut tape, zs, c.anchors(), ts).unwrap();
        let logq = tape.to_tensor(logq);
        for i in 0..p.rows() {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!((logq.row(i).iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn own_slot_has_the_largest_weight(c in case(1), tt in 0.01f64..1.0) {
        let p = teacher_distribution(&c.z_t, c.anchors(), tt).unwrap();
        let k = c.queue.rows();
        for i in 0..p.rows() {
            let row = p.row(i);
            prop_assert!(row[..k].iter().all(|&v| v < row[k]));
        }
    }

    #[test]
    fn cross_entropy_dominates_entropy(c in case(0), tt in 0.01f64..1.0, ts in 0.01f64..1.0) {
        let b = c.z_t.rows();
        let h = (0..b)
            .map(|i| {
                let logits: Vec<f64> = c.support(i).iter().map(|d| dot(c.z_t.row(i), d) / tt).collect();
                entropy(&softmax(&logits))
            })
            .sum::<f64>() / b as f64;
        let loss = seed_loss_value(&c.z_t, &c.z_s, c.anchors(), tt, ts).unwrap();
        prop_assert!(loss >= h - 1e-12);
        let matched = seed_loss_value(&c.z_t, &c.z_t, c.anchors(), tt, tt).unwrap();
        prop_assert!((matched - h).abs() < 1e-9);
    }

    #[test]
    fn cold_teacher_gives_infonce(c in case(1), ts in 0.05f64..1.0) {
        // The limit needs the own slot to lead every queue row by far more than tau_t.
        for i in 0..c.z_t.rows() {
            let own = dot(c.z_t.row(i), c.z_t.row(i));
            prop_assume!((0..c.queue.rows()).all(|j| dot(c.z_t.row(i), c.queue.row(j)) < own - 1e-6));
        }
        let seed = seed_loss_value(&c.z_t, &c.z_s, c.anchors(), 1e-8, ts).unwrap();
        let nce = infonce_value(&c.z_t, &c.z_s, c.anchors(), ts).unwrap();
        prop_assert!((seed - nce).abs() < 1e-6);
    }

    #[test]
    fn loss_dominates_weakened_bound(c in case(8), tt in 0.01f64..1.0, ts in 0.5f64..1.0) {
        let k = c.queue.rows();
        let b = c.z_t.rows();
        let mut bound = 0.0;
        for i in 0..b {
            let d = c.support(i);
            let w = softmax(&d.iter().map(|x| dot(c.z_t.row(i), x) / tt).collect::<Vec<_>>());
            let s: Vec<f64> = d.iter().map(|x| dot(c.z_s.row(i), x) / ts).collect();
            let lse_q = lse(&s[..k]);
            bound += w[k] * -s[k] + (0..k).map(|j| w[j] * (lse_q - s[j])).sum::<f64>();
            prop_assert!(lse(&s) >= ((k + 1) as f64).ln() - 1.0 / ts);
        }
        let loss = seed_loss_value(&c.z_t, &c.z_s, c.anchors(), tt, ts).unwrap();
        prop_assert!(loss >= bound / b as f64 - 1e-12);
    }

    #[test]
    fn loss_decomposes_into_weighted_infonce_terms(c in case(0), tt in 0.01f64..1.0, ts in 0.05f64..1.0) {
        let b = c.z_t.rows();
        let reference = (0..b)
            .map(|i| {
                let d = c.support(i);
                let w = softmax(&d.iter().map(|x| dot(c.z_t.row(i), x) / tt).collect::<Vec<_>>());
                let s: Vec<f64> = d.iter().map(|x| dot(c.z_s.row(i), x) / ts).collect();
                let l = lse(&s);
                w.iter().zip(&s).map(|(w, s)| w * (l - s)).sum::<f64>()
            })
            .sum::<f64>() / b as f64;
        let loss = seed_loss_value(&c.z_t, &c.z_s, c.anchors(), tt, ts).unwrap();
        prop_assert!((loss - reference).abs() < 1e-10);
    }

    #[test]
    fn loss_ignores_anchor_order(c in case(1), tt in 0.01f64..1.0, ts in 0.05f64..1.0, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        // One shared D⁺ so the same permutation applies to every row.
        let z_t = Tensor::from_rows(&[c.z_t.row(0)]).unwrap();
        let z_s = Tensor::from_rows(&[c.z_s.row(0)]).unwrap();
        let d = c.support(0);
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let shuffled: Vec<&Vec<f64>> = order.iter().map(|&i| &d[i]).collect();
        let a = Tensor::from_rows(&d).unwrap();
        let p = Tensor::from_rows(&shuffled).unwrap();
        let la = seed_loss_value(&z_t, &z_s, Anchors::Shared(&a), tt, ts).unwrap();
        let lp = seed_loss_value(&z_t, &z_s, Anchors::Shared(&p), tt, ts).unwrap();
        prop_assert!((la - lp).abs() < 1e-12);
    }
}

#[test]
fn hand_configuration() {
    let z = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
    let q = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
    let loss = seed_loss_value(&z, &z, Anchors::QueueWithTargets { queue: &q, targets: &z }, 1.0, 1.0).unwrap();
    assert!((loss - 0.58220).abs() < 1e-5, "{loss}");
}
