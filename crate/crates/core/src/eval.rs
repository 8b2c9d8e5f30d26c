//! Embedding quality: cosine KNN, linear probe, label subsets, top-k.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::distill::{epoch_order, pseudo_label_loss};
use crate::error::{Error, Result};
use crate::optim::{sgd_step, OptimizerState, SgdConfig};
use crate::tensor::{dot, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbeddings {
    /// `N × D`
    pub embeddings: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledEmbeddings {
    pub fn new(embeddings: Tensor, labels: Vec<usize>) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.rows() != labels.len() {
            return Err(Error::shape("LabeledEmbeddings", embeddings.shape(), &[labels.len()]));
        }
        Ok(Self { embeddings, labels })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

/// Majority vote among the `k` most cosine-similar training rows. Equal
/// similarities keep training order; vote ties go to the smallest class.
pub fn knn_classify(train: &LabeledEmbeddings, test: &Tensor, k: usize) -> Result<Vec<usize>> {
    let n = train.labels.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("need 1 <= k <= N, got k={k}, N={n}")));
    }
    if test.rank() != 2 || test.cols() != train.embeddings.cols() {
        return Err(Error::shape("knn_classify", test.shape(), train.embeddings.shape()));
    }
    let unit = |t: &Tensor| t.l2_normalize_rows(1e-12);
    let (tr, te) = (unit(&train.embeddings)?, unit(test)?);
    let classes = train.num_classes();
    let mut out = Vec::with_capacity(te.rows());
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..te.rows() {
        let sims: Vec<f64> = (0..n).map(|j| dot(te.row(i), tr.row(j))).collect();
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
        let mut votes = vec![0usize; classes];
        for &j in &order[..k] {
            votes[train.labels[j]] += 1;
        }
        let best = votes.iter().enumerate().fold(0, |b, (c, &v)| if v > votes[b] { c } else { b });
        out.push(best);
    }
    Ok(out)
}

/// Fraction of `pred` equal to `labels`.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

/// KNN top-1 accuracy of `test` against `train`.
pub fn knn_accuracy(train: &LabeledEmbeddings, test: &LabeledEmbeddings, k: usize) -> Result<f64> {
    let pred = knn_classify(train, &test.embeddings, k)?;
    Ok(accuracy(&pred, &test.labels))
}

/// Fraction of rows whose label is among the `k` largest logits. Equal
/// logits rank the lower index first.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    if logits.rank() != 2 || logits.rows() != labels.len() {
        return Err(Error::shape("topk_accuracy", logits.shape(), &[labels.len()]));
    }
    let c = logits.cols();
    if k == 0 || k > c {
        return Err(Error::invalid(format!("need 1 <= k <= C, got k={k}, C={c}")));
    }
    let mut hits = 0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        // Rank of y: entries strictly larger, plus equal entries at lower index.
        let rank = (0..c).filter(|&j| row[j] > row[y] || (row[j] == row[y] && j < y)).count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(if labels.is_empty() { 0.0 } else { hits as f64 / labels.len() as f64 })
}

/// Class-balanced label subset: `ceil(fraction·count)` indices per class
/// (at least one), drawn without replacement. Sorted ascending.
pub fn semi_supervised_subset(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction must be in (0,1], got {fraction}")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        pools[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for mut pool in pools {
        if pool.is_empty() {
            continue;
        }
        let take = ((fraction * pool.len() as f64).ceil() as usize).clamp(1, pool.len());
        pool.shuffle(&mut rng);
        out.extend_from_slice(&pool[..take]);
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.3,
            batch_size: 64,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    pub top1: f64,
    pub top5: f64,
}

/// Learning rate of the probe at `epoch`: ×0.1 at 60% and again at 80%.
pub fn probe_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    let f = epoch as f64 / epochs.max(1) as f64;
    if f >= 0.8 {
        base * 0.01
    } else if f >= 0.6 {
        base * 0.1
    } else {
        base
    }
}

/// Trains a `C`-way linear classifier with softmax cross-entropy on frozen
/// features (no weight decay) and reports top-1 / top-5 on `test`. Top-5 is
/// top-`C` when there are fewer than five classes.
pub fn linear_probe(train: &LabeledEmbeddings, test: &LabeledEmbeddings, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let d = train.embeddings.cols();
    if test.embeddings.cols() != d {
        return Err(Error::shape("linear_probe", test.embeddings.shape(), train.embeddings.shape()));
    }
    let classes = train.num_classes().max(test.num_classes());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = (1.0 / d.max(1) as f64).sqrt();
    let w = (0..classes * d).map(|_| rng.random_range(-bound..=bound)).collect();
    let mut weight = Tensor::new(&[classes, d], w)?.with_requires_grad(true);
    let mut bias = Tensor::zeros(&[classes]).with_requires_grad(true);
    let mut state = OptimizerState::new([&weight, &bias]);
    let sgd = SgdConfig {
        momentum: cfg.momentum,
        weight_decay: 0.0,
        decay_bias: false,
    };
    let n = train.labels.len();
    for epoch in 0..cfg.epochs {
        let lr = probe_lr(cfg.lr, epoch, cfg.epochs);
        for idx in epoch_order(n, cfg.seed, epoch).chunks(cfg.batch_size.max(1)) {
            let rows: Vec<&[f64]> = idx.iter().map(|&i| train.embeddings.row(i)).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(&Tensor::from_rows(&rows)?);
            let wv = tape.leaf(&weight);
            let bv = tape.leaf(&bias);
            let lin = tape.matmul_nt(x, wv)?;
            let logits = tape.add_bias(lin, bv)?;
            let loss = pseudo_label_loss(&mut tape, logits, &labels)?;
            let grads = tape.backward(loss)?;
            grads.write_to(wv, &mut weight)?;
            grads.write_to(bv, &mut bias)?;
            sgd_step(&mut [&mut weight, &mut bias], &mut state, lr, &sgd)?;
        }
    }
    let mut logits = test.embeddings.matmul(&weight.transpose()?)?;
    for i in 0..logits.rows() {
        logits.row_mut(i).iter_mut().zip(bias.data()).for_each(|(l, b)| *l += b);
    }
    Ok(ProbeResult {
        top1: topk_accuracy(&logits, &test.labels, 1)?,
        top5: topk_accuracy(&logits, &test.labels, 5.min(classes))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn le(rows: &[[f64; 2]], labels: &[usize]) -> LabeledEmbeddings {
        LabeledEmbeddings::new(Tensor::from_rows(rows).unwrap(), labels.to_vec()).unwrap()
    }

    #[test]
    fn knn_hand_cases() {
        let train = le(&[[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [-1.0, 0.0]], &[2, 2, 1, 0]);
        let q = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(knn_classify(&train, &q, 1).unwrap(), vec![1]);
        let q = Tensor::from_rows(&[[1.0, 0.05]]).unwrap();
        assert_eq!(knn_classify(&train, &q, 3).unwrap(), vec![2]);
        // Two neighbors with labels {2, 1}: tie goes to 1.
        let q = Tensor::from_rows(&[[0.6, 0.8]]).unwrap();
        assert_eq!(knn_classify(&train, &q, 2).unwrap(), vec![1]);
        assert!(knn_classify(&train, &q, 5).is_err());
        assert!(knn_classify(&train, &q, 0).is_err());
    }

    fn brute_knn(train: &LabeledEmbeddings, q: &[f64], k: usize) -> usize {
        let unit = |v: &[f64]| {
            let n = dot(v, v).sqrt().max(1e-12);
            v.iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let q = unit(q);
        let n = train.labels.len();
        // Selection without sorting: repeatedly take the best unused row.
        let mut used = vec![false; n];
        let mut votes = vec![0; train.num_classes()];
        for _ in 0..k {
            let mut best = None;
            for (j, _) in used.iter().enumerate().filter(|(_, &u)| !u) {
                let s = dot(&q, &unit(train.embeddings.row(j)));
                match best {
                    Some((_, bs)) if s <= bs => {}
                    _ => best = Some((j, s)),
                }
            }
            let (j, _) = best.unwrap();
            used[j] = true;
            votes[train.labels[j]] += 1;
        }
        let max = *votes.iter().max().unwrap();
        votes.iter().position(|&v| v == max).unwrap()
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let n = 10 + trial * 2;
            let d = 3;
            let data: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let train = LabeledEmbeddings::new(Tensor::new(&[n, d], data).unwrap(), labels).unwrap();
            let q: Vec<f64> = (0..5 * d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let q = Tensor::new(&[5, d], q).unwrap();
            for k in [1, 3, 7] {
                let got = knn_classify(&train, &q, k).unwrap();
                for (i, &g) in got.iter().enumerate() {
                    assert_eq!(g, brute_knn(&train, q.row(i), k));
                }
            }
        }
    }

    #[test]
    fn topk_cases() {
        let eye = Tensor::identity(4);
        assert_eq!(topk_accuracy(&eye, &[0, 1, 2, 3], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&eye, &[3, 0, 1, 2], 4).unwrap(), 1.0);
        assert!(topk_accuracy(&eye, &[0, 1, 2, 3], 5).is_err());
        // Equal logits: the lower index ranks first.
        let flat = Tensor::zeros(&[1, 3]);
        assert_eq!(topk_accuracy(&flat, &[0], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&flat, &[1], 1).unwrap(), 0.0);
    }

    #[test]
    fn topk_matches_exhaustive_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits: Vec<f64> = (0..15).map(|_| rng.random_range(0..4) as f64).collect();
        let logits = Tensor::new(&[5, 3], logits).unwrap();
        let labels = [0, 1, 2, 1, 0];
        for k in 1..=3 {
            let mut hits = 0;
            for (i, &y) in labels.iter().enumerate() {
                let mut idx: Vec<usize> = (0..3).collect();
                idx.sort_by(|&a, &b| logits.row(i)[b].total_cmp(&logits.row(i)[a]).then(a.cmp(&b)));
                if idx[..k].contains(&y) {
                    hits += 1;
                }
            }
            assert_eq!(topk_accuracy(&logits, &labels, k).unwrap(), hits as f64 / 5.0);
        }
    }

    #[test]
    fn subsets() {
        let labels: Vec<usize> = (0..1000).map(|i| i / 100).collect();
        let s = semi_supervised_subset(&labels, 0.01, 3).unwrap();
        assert_eq!(s.len(), 10);
        let mut seen: Vec<usize> = s.iter().map(|&i| labels[i]).collect();
        seen.dedup();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(semi_supervised_subset(&labels, 1.0, 0).unwrap(), (0..1000).collect::<Vec<_>>());
        assert_eq!(s, semi_supervised_subset(&labels, 0.01, 3).unwrap());
        assert_eq!(semi_supervised_subset(&labels, 0.0001, 3).unwrap().len(), 10);
        assert!(semi_supervised_subset(&labels, 0.0, 3).is_err());
    }

    #[test]
    fn probe_separates_two_clusters() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let t = i as f64 / 40.0;
            rows.push([1.0 + t, 0.3 - t]);
            labels.push(0);
            rows.push([-1.0 - t, -0.3 + t]);
            labels.push(1);
        }
        let data = le(&rows, &labels);
        let r = linear_probe(&data, &data, &ProbeConfig::default()).unwrap();
        assert_eq!(r.top1, 1.0);
        assert!(r.top5 >= r.top1);
    }

    #[test]
    fn untrained_probe_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 400;
        let mut sum = 0.0;
        let seeds = 10;
        for seed in 0..seeds {
            let x: Vec<f64> = (0..n * 8).map(|_| StandardNormal.sample(&mut rng)).collect();
            let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
            let data = LabeledEmbeddings::new(Tensor::new(&[n, 8], x).unwrap(), labels).unwrap();
            let cfg = ProbeConfig {
                epochs: 0,
                seed,
                ..ProbeConfig::default()
            };
            let r = linear_probe(&data, &data, &cfg).unwrap();
            assert!(r.top5 >= r.top1);
            sum += r.top1;
        }
        assert!(sum / seeds as f64 >= 0.25 - 0.05);
    }

    #[test]
    fn step_decay() {
        assert_eq!(probe_lr(1.0, 0, 10), 1.0);
        assert_eq!(probe_lr(1.0, 6, 10), 0.1);
        assert!((probe_lr(1.0, 8, 10) - 0.01).abs() < 1e-15);
    }
}
