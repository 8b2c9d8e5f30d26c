//! Acceptance criteria, one PASS/FAIL line each. Run with
//! `cargo test --release --test acceptance -- --nocapture` to see the table.

use std::collections::VecDeque;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use seed_core::distill::{seed_loss_value, Anchors, Strategy};
use seed_core::harness::run::TEACHER_CKPT;
use seed_core::harness::{run, sweep, verify, ExperimentConfig, Phase, Suite};
use seed_core::queue::init_queue;
use seed_core::Tensor;

struct Outcome {
    id: usize,
    passed: bool,
    detail: String,
}

impl Outcome {
    fn print(&self) {
        println!("[{}] criterion {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.id, self.detail);
    }
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(&[rows, dim], data).unwrap().l2_normalize_rows(1e-12).unwrap()
}

fn verification_suite() -> Outcome {
    let t = Instant::now();
    let report = verify(&Suite::ALL, 200, 0).unwrap();
    let secs = t.elapsed().as_secs_f64();
    print!("{report}");
    Outcome {
        id: 1,
        passed: report.passed() && secs < 60.0,
        detail: format!("verify all --trials 200 in {secs:.2}s (limit 60s)"),
    }
}

fn queue_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut fifo_ok = true;
    for trial in 0..1000u64 {
        let k = rng.random_range(0..=8);
        let dim = rng.random_range(1..=4);
        let mut q = init_queue(k, dim, trial).unwrap();
        let mut oracle: VecDeque<Vec<f64>> = q.rows_in_order().iter().map(|r| r.to_vec()).collect();
        for _ in 0..rng.random_range(1..=12) {
            let b = rng.random_range(1..=10);
            let batch = unit_rows(&mut rng, b, dim);
            q.enqueue_batch(&batch).unwrap();
            for i in 0..b {
                oracle.push_back(batch.row(i).to_vec());
                oracle.pop_front();
            }
            let got: Vec<Vec<f64>> = q.rows_in_order().iter().map(|r| r.to_vec()).collect();
            fifo_ok &= oracle == got;
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let b = rng.random_range(1..=4);
        let k = rng.random_range(1..=16);
        let d = rng.random_range(2..=8);
        let z_t = unit_rows(&mut rng, b, d);
        let z_s = unit_rows(&mut rng, b, d);
        let anchors = unit_rows(&mut rng, k + 1, d);
        let mut order: Vec<usize> = (0..=k).collect();
        order.shuffle(&mut rng);
        let rows: Vec<&[f64]> = order.iter().map(|&i| anchors.row(i)).collect();
        let permuted = Tensor::from_rows(&rows).unwrap();
        let (tt, ts) = (rng.random_range(0.01..1.0), rng.random_range(0.05..1.0));
        let a = seed_loss_value(&z_t, &z_s, Anchors::Shared(&anchors), tt, ts).unwrap();
        let p = seed_loss_value(&z_t, &z_s, Anchors::Shared(&permuted), tt, ts).unwrap();
        worst = worst.max((a - p).abs());
    }
    Outcome {
        id: 2,
        passed: fifo_ok && worst < 1e-12,
        detail: format!("FIFO matches list oracle over 1000 sequences: {fifo_ok}; max permutation drift {worst:.2e} (limit 1e-12)"),
    }
}

fn hand_value() -> Outcome {
    let z = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
    let queue = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
    let loss = seed_loss_value(&z, &z, Anchors::QueueWithTargets { queue: &queue, targets: &z }, 1.0, 1.0).unwrap();
    // Both distributions are softmax(0, 1); the loss is their entropy.
    let e = std::f64::consts::E;
    let (p1, p2) = (1.0 / (1.0 + e), e / (1.0 + e));
    let oracle = -(p1 * p1.ln() + p2 * p2.ln());
    assert!((oracle - 0.58220).abs() < 1e-5);
    Outcome {
        id: 3,
        passed: (loss - 0.58220).abs() < 1e-5,
        detail: format!("hand configuration loss {loss:.6} (expected 0.58220 +/- 1e-5)"),
    }
}

fn argmax_property() -> Outcome {
    let r = verify(&[Suite::Argmax], 10_000, 4).unwrap();
    let s = &r.suites[0];
    Outcome {
        id: 4,
        passed: r.passed(),
        detail: format!(
            "own slot strictly largest in 10000 trials; worst max_j p_j - p_K+1 = {:.3e}",
            s.max_violation
        ),
    }
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct Experiment {
    baseline: Vec<f64>,
    by_strategy: Vec<(Strategy, Vec<f64>)>,
    /// Wall time of teacher pre-training, baseline, and `seed` distillation.
    core_secs: f64,
}

impl Experiment {
    fn strategy(&self, s: Strategy) -> f64 {
        mean(&self.by_strategy.iter().find(|(x, _)| *x == s).unwrap().1)
    }
}

fn distill_with(cfg: &ExperimentConfig, teacher: &Path, strategy: Strategy, out: &Path) -> f64 {
    let mut c = cfg.clone();
    c.phases = vec![Phase::Distill];
    c.teacher.checkpoint = Some(teacher.to_path_buf());
    c.distill.strategy = strategy;
    run(&c, out).unwrap().student_knn.unwrap()
}

fn experiment(root: &Path) -> Experiment {
    let strategies = [Strategy::Seed, Strategy::L2, Strategy::KMeans, Strategy::Binary, Strategy::OnlineCluster];
    let mut baseline = Vec::new();
    let mut by_strategy: Vec<(Strategy, Vec<f64>)> = strategies.iter().map(|&s| (s, Vec::new())).collect();
    let mut core_secs = 0.0;
    for seed in SEEDS {
        let dir = root.join(format!("seed{seed}"));
        let cfg = ExperimentConfig {
            seed,
            phases: vec![Phase::Pretrain, Phase::Baseline],
            ..ExperimentConfig::default()
        };
        let t = Instant::now();
        let summary = run(&cfg, &dir.join("teacher")).unwrap();
        baseline.push(summary.baseline_knn.unwrap());
        let teacher = dir.join("teacher").join(TEACHER_CKPT);
        let seed_knn = distill_with(&cfg, &teacher, Strategy::Seed, &dir.join("seed"));
        core_secs += t.elapsed().as_secs_f64();
        println!(
            "  seed {seed}: teacher {:.4} baseline {:.4} seed {seed_knn:.4}",
            summary.teacher_knn.unwrap(),
            summary.baseline_knn.unwrap()
        );
        by_strategy[0].1.push(seed_knn);
        for (s, accs) in by_strategy.iter_mut().skip(1) {
            let acc = distill_with(&cfg, &teacher, *s, &dir.join(s.name()));
            println!("  seed {seed}: {} {acc:.4}", s.name());
            accs.push(acc);
        }
    }
    Experiment {
        baseline,
        by_strategy,
        core_secs,
    }
}

fn distillation_gain(e: &Experiment) -> Outcome {
    let (base, seed) = (mean(&e.baseline), e.strategy(Strategy::Seed));
    let gain = 100.0 * (seed - base);
    Outcome {
        id: 5,
        passed: gain >= 2.0 && e.core_secs < 600.0,
        detail: format!(
            "seed student {seed:.4} vs contrastive student {base:.4}: {gain:+.2} points (need >= +2), {:.0}s (limit 600s)",
            e.core_secs
        ),
    }
}

fn strategy_ordering(e: &Experiment) -> Outcome {
    let seed = e.strategy(Strategy::Seed);
    let (l2, km) = (e.strategy(Strategy::L2), e.strategy(Strategy::KMeans));
    Outcome {
        id: 6,
        passed: seed >= l2 && seed >= km,
        detail: format!(
            "seed {seed:.4} vs l2 {l2:.4}, kmeans {km:.4}; reported only: binary {:.4}, online_cluster {:.4}",
            e.strategy(Strategy::Binary),
            e.strategy(Strategy::OnlineCluster)
        ),
    }
}

fn temperature_sweep(root: &Path) -> Outcome {
    let teacher = root.join("seed0").join("teacher").join(TEACHER_CKPT);
    let mut cfg = ExperimentConfig {
        phases: vec![Phase::Distill],
        ..ExperimentConfig::default()
    };
    cfg.teacher.checkpoint = Some(teacher);
    let values = [0.3, 0.1, 0.05, 0.01, 0.001];
    let (a, b) = (root.join("sweep_a"), root.join("sweep_b"));
    let rows = sweep(&cfg, "tau_t", &values, &a).unwrap();
    sweep(&cfg, "tau_t", &values, &b).unwrap();
    let same = std::fs::read(a.join("sweep.csv")).unwrap() == std::fs::read(b.join("sweep.csv")).unwrap();
    let sorted = rows.windows(2).all(|w| w[0].value < w[1].value);
    let best = rows.iter().max_by(|x, y| x.knn_top1.total_cmp(&y.knn_top1)).unwrap();
    let interior = best.value != 0.3;
    for r in &rows {
        println!("  tau_t {:<6} knn_top1 {:.4} final_loss {:.4}", r.value, r.knn_top1, r.final_loss);
    }
    Outcome {
        id: 7,
        passed: rows.len() == 5 && sorted && same,
        detail: format!(
            "{} rows, sorted {sorted}, byte-identical on rerun {same}; best tau_t {} ({})",
            rows.len(),
            best.value,
            if interior { "interior or at 0.01/0.001" } else { "at the 0.3 edge" }
        ),
    }
}

fn determinism(root: &Path) -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.pretrain.epochs = 4;
    cfg.distill.epochs = 4;
    cfg.eval.knn_every = 1;
    cfg.phases = vec![Phase::Pretrain, Phase::Distill, Phase::Eval];
    let (a, b) = (root.join("det_a"), root.join("det_b"));
    run(&cfg, &a).unwrap();
    run(&cfg, &b).unwrap();
    let same = |f: &str| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
    let csv = same("metrics.csv");
    Outcome {
        id: 8,
        passed: csv,
        detail: format!(
            "metrics.csv identical {csv}; metrics.jsonl {}, student.ckpt {}",
            same("metrics.jsonl"),
            same("student.ckpt")
        ),
    }
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut outcomes = vec![verification_suite(), queue_semantics(), hand_value(), argmax_property()];
    outcomes.iter().for_each(Outcome::print);
    let e = experiment(root);
    for o in [distillation_gain(&e), strategy_ordering(&e), temperature_sweep(root), determinism(root)] {
        o.print();
        outcomes.push(o);
    }
    println!();
    outcomes.iter().for_each(Outcome::print);
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
