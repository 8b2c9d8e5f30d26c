//! Spherical k-means on unit-norm features, offline and online.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    /// `C × D`, unit-norm rows.
    pub centroids: Tensor,
    pub ema_momentum: f64,
}

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub state: ClusterState,
    pub labels: Vec<usize>,
    /// Inertia `Σ ‖x − c(x)‖²` after each assignment step.
    pub inertia: Vec<f64>,
}

impl KMeansFit {
    pub fn final_inertia(&self) -> f64 {
        self.inertia.last().copied().unwrap_or(0.0)
    }
}

fn normalize_in_place(v: &mut [f64]) -> bool {
    let n = norm(v);
    if n <= 1e-12 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Index of the most similar centroid (ties → lowest index) and that similarity.
pub fn nearest(centroids: &Tensor, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..centroids.rows() {
        let s = dot(centroids.row(c), x);
        if s > best.1 {
            best = (c, s);
        }
    }
    best
}

fn assign(features: &Tensor, centroids: &Tensor) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let labels = (0..features.rows())
        .map(|i| {
            let (c, s) = nearest(centroids, features.row(i));
            // ‖x − c‖² for unit vectors
            inertia += (2.0 - 2.0 * s).max(0.0);
            c
        })
        .collect();
    (labels, inertia)
}

fn plus_plus_seed(features: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = features.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| (2.0 - 2.0 * dot(features.row(i), features.row(chosen[0]))).max(0.0))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a chosen one.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            let nd = (2.0 - 2.0 * dot(features.row(i), features.row(next))).max(0.0);
            *d = d.min(nd);
        }
    }
    chosen
}

/// Lloyd iterations with k-means++ seeding and cosine assignment. Centroids
/// are re-normalized after every update, so inertia never increases. An
/// empty cluster is re-seeded at the point farthest from its centroid.
pub fn kmeans_fit(features: &Tensor, clusters: usize, iters: usize, seed: u64) -> Result<KMeansFit> {
    let n = features.rows();
    if clusters == 0 || clusters > n {
        return Err(Error::invalid(format!("need 1 <= C <= N, got C={clusters}, N={n}")));
    }
    let d = features.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = plus_plus_seed(features, clusters, &mut rng);
    let rows: Vec<&[f64]> = seeds.iter().map(|&i| features.row(i)).collect();
    let mut centroids = Tensor::from_rows(&rows)?;

    let (mut labels, inertia0) = assign(features, &centroids);
    let mut history = vec![inertia0];
    for _ in 0..iters {
        let mut sums = vec![0.0; clusters * d];
        let mut counts = vec![0usize; clusters];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c * d..(c + 1) * d].iter_mut().zip(features.row(i)) {
                *s += x;
            }
        }
        for c in 0..clusters {
            let slot = &mut sums[c * d..(c + 1) * d];
            if counts[c] == 0 {
                let far = (0..n)
                    .min_by(|&a, &b| {
                        let sa = dot(features.row(a), centroids.row(labels[a]));
                        let sb = dot(features.row(b), centroids.row(labels[b]));
                        sa.total_cmp(&sb)
                    })
                    .expect("n >= 1");
                slot.copy_from_slice(features.row(far));
            }
            if normalize_in_place(slot) {
                centroids.row_mut(c).copy_from_slice(slot);
            }
        }
        let (next, inertia) = assign(features, &centroids);
        history.push(inertia);
        let done = next == labels;
        labels = next;
        if done {
            break;
        }
    }
    Ok(KMeansFit {
        state: ClusterState {
            centroids,
            ema_momentum: 0.99,
        },
        labels,
        inertia: history,
    })
}

/// Assigns a batch of unit-norm teacher features to their nearest centroids
/// and moves each used centroid toward its batch mean:
/// `c ← normalize(m·c + (1 − m)·mean)`.
pub fn online_cluster_step(state: &mut ClusterState, batch: &Tensor) -> Result<Vec<usize>> {
    let (c, d) = (state.centroids.rows(), state.centroids.cols());
    if batch.rank() != 2 || batch.cols() != d {
        return Err(Error::shape("online_cluster_step", batch.shape(), state.centroids.shape()));
    }
    if batch.rows() == 0 {
        return Err(Error::invalid("online clustering needs a non-empty batch"));
    }
    let (labels, _) = assign(batch, &state.centroids);
    let m = state.ema_momentum;
    let mut sums = vec![0.0; c * d];
    let mut counts = vec![0usize; c];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, x) in sums[l * d..(l + 1) * d].iter_mut().zip(batch.row(i)) {
            *s += x;
        }
    }
    for k in 0..c {
        if counts[k] == 0 {
            continue;
        }
        let mut updated: Vec<f64> = state
            .centroids
            .row(k)
            .iter()
            .zip(&sums[k * d..(k + 1) * d])
            .map(|(cv, s)| m * cv + (1.0 - m) * s / counts[k] as f64)
            .collect();
        if normalize_in_place(&mut updated) {
            state.centroids.row_mut(k).copy_from_slice(&updated);
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        for _ in 0..n {
            let mut r: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            normalize_in_place(&mut r);
            data.extend(r);
        }
        Tensor::new(&[n, d], data).unwrap()
    }

    #[test]
    fn two_tight_clusters() {
        let mut rows = vec![[1.0, 0.0]; 5];
        rows.extend(vec![[0.0, 1.0]; 5]);
        let fit = kmeans_fit(&Tensor::from_rows(&rows).unwrap(), 2, 10, 0).unwrap();
        assert_eq!(fit.final_inertia(), 0.0);
        let mut cents: Vec<Vec<f64>> = (0..2).map(|c| fit.state.centroids.row(c).to_vec()).collect();
        cents.sort_by(|a, b| b[0].total_cmp(&a[0]));
        assert_eq!(cents, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_ne!(fit.labels[0], fit.labels[5]);
    }

    #[test]
    fn one_centroid_per_point() {
        let x = unit_rows(6, 3, 1);
        let fit = kmeans_fit(&x, 6, 5, 2).unwrap();
        assert!(fit.final_inertia() < 1e-12);
    }

    #[test]
    fn inertia_never_increases() {
        let x = unit_rows(60, 4, 3);
        for seed in 0..5 {
            let fit = kmeans_fit(&x, 5, 50, seed).unwrap();
            for w in fit.inertia.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{:?}", fit.inertia);
            }
            for c in 0..5 {
                assert!((norm(fit.state.centroids.row(c)) - 1.0).abs() < 1e-6);
            }
        }
    }

    fn objective(x: &Tensor, labels: &[usize], k: usize) -> f64 {
        let d = x.cols();
        let mut total = 0.0;
        for c in 0..k {
            let mut mean = vec![0.0; d];
            for (i, &l) in labels.iter().enumerate() {
                if l == c {
                    mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
                }
            }
            if !normalize_in_place(&mut mean) {
                continue;
            }
            for (i, &l) in labels.iter().enumerate() {
                if l == c {
                    total += 2.0 - 2.0 * dot(x.row(i), &mean);
                }
            }
        }
        total
    }

    #[test]
    fn matches_exhaustive_two_partition() {
        let angles: Vec<f64> = [0.0, 1.0, 10.0, 11.0].iter().map(|v| v / 11.0 * std::f64::consts::FRAC_PI_2).collect();
        let rows: Vec<[f64; 2]> = angles.iter().map(|a| [a.cos(), a.sin()]).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        // Oracle: best of all 2^4 labelings with both clusters non-empty.
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1u32..15 {
            let labels: Vec<usize> = (0..4).map(|i| ((mask >> i) & 1) as usize).collect();
            let obj = objective(&x, &labels, 2);
            if obj < best.0 {
                best = (obj, labels);
            }
        }
        let fit = kmeans_fit(&x, 2, 20, 4).unwrap();
        let same = |a: &[usize], b: &[usize]| (0..4).all(|i| (0..4).all(|j| (a[i] == a[j]) == (b[i] == b[j])));
        assert!(same(&fit.labels, &best.1), "{:?} vs {:?}", fit.labels, best.1);
        assert!((fit.final_inertia() - best.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_cluster_count() {
        let x = unit_rows(3, 2, 0);
        assert!(kmeans_fit(&x, 0, 1, 0).is_err());
        assert!(kmeans_fit(&x, 4, 1, 0).is_err());
    }

    #[test]
    fn online_step_momentum_extremes() {
        let cents = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let batch = Tensor::from_rows(&[[0.8, 0.6], [0.6, 0.8], [0.96, 0.28]]).unwrap();

        let mut frozen = ClusterState {
            centroids: cents.clone(),
            ema_momentum: 1.0,
        };
        online_cluster_step(&mut frozen, &batch).unwrap();
        assert_eq!(frozen.centroids, cents);

        let mut jump = ClusterState {
            centroids: cents.clone(),
            ema_momentum: 0.0,
        };
        let one = Tensor::from_rows(&[[0.8, 0.6], [0.96, 0.28]]).unwrap();
        let labels = online_cluster_step(&mut jump, &one).unwrap();
        assert_eq!(labels, vec![0, 0]);
        let mut mean = vec![0.88, 0.44];
        normalize_in_place(&mut mean);
        assert!(jump.centroids.row(0).iter().zip(&mean).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(jump.centroids.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn online_labels_match_nearest_centroid_oracle() {
        let cents = unit_rows(5, 3, 7);
        let batch = unit_rows(30, 3, 8);
        let mut state = ClusterState {
            centroids: cents.clone(),
            ema_momentum: 0.9,
        };
        let labels = online_cluster_step(&mut state, &batch).unwrap();
        for (i, &l) in labels.iter().enumerate() {
            let sims: Vec<f64> = (0..5).map(|c| dot(cents.row(c), batch.row(i))).collect();
            let best = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(sims[l], best);
        }
    }
}
