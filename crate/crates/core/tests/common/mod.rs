//! Reference oracles shared by the integration tests: central finite
//! differences and deliberately naive re-implementations.

use codistill_core::losses::LOG_FLOOR;
use codistill_core::nn::{Inputs, Task};
use codistill_core::{Batch, Matrix, Parameters};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Relative errors are taken against `max(|a|, |b|, REL_FLOOR)`, so entries
/// that are both essentially zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Per-example forward pass written directly from the parameter layout.
pub fn naive_logits(params: &Parameters, batch: &Batch) -> Matrix {
    let arch = params.architecture();
    let v = params.values();
    let k = arch.output_dim();
    let mut out = Vec::new();
    for b in 0..batch.len() {
        let mut x: Vec<f64> = match batch.inputs() {
            Inputs::Dense(m) => m.row(b).to_vec(),
            Inputs::Tokens { window, ids } => {
                let Task::LmFixedContext { embedding_dim, .. } = arch.task() else { panic!("tokens on classifier") };
                let table = &v[arch.embedding().unwrap()];
                let mut x = Vec::new();
                for &t in &ids[b * window..(b + 1) * window] {
                    let t = t as usize;
                    for e in 0..embedding_dim {
                        x.push(table[t * embedding_dim + e]);
                    }
                }
                x
            }
        };
        let n_layers = arch.layers().len();
        for (l, layer) in arch.layers().iter().enumerate() {
            let mut y = vec![0.0; layer.out_dim];
            for (o, yo) in y.iter_mut().enumerate() {
                let mut s = 0.0;
                for i in 0..layer.in_dim {
                    s += v[layer.weights.start + o * layer.in_dim + i] * x[i];
                }
                s += v[layer.biases.start + o];
                *yo = if l + 1 < n_layers { s.max(0.0) } else { s };
            }
            x = y;
        }
        assert_eq!(x.len(), k);
        out.extend(x);
    }
    Matrix::from_vec(batch.len(), k, out).unwrap()
}

pub fn naive_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Mean hard cross entropy and accuracy, one example at a time.
pub fn naive_eval(params: &Parameters, batch: &Batch) -> (f64, f64) {
    let logits = naive_logits(params, batch);
    let mut nll = 0.0;
    let mut correct = 0;
    for (b, &y) in batch.labels().iter().enumerate() {
        let p = naive_softmax(logits.row(b));
        nll -= p[y].max(LOG_FLOOR).ln();
        let mut best = 0;
        for k in 1..p.len() {
            if p[k] > p[best] {
                best = k;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    let n = batch.len() as f64;
    (nll / n, correct as f64 / n)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Random rows on the probability simplex, bounded away from zero.
pub fn random_probs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub mod gradcheck {
    use std::sync::Arc;

    use codistill_core::losses::{combined_loss, CombinedLossSpec, DistillLossKind, SmoothingKind, TeacherSignal};
    use codistill_core::nn::{backward, forward, init_params};
    use codistill_core::{seed, Architecture, Batch, Matrix, Parameters};
    use rand::Rng;

    use super::{fd_gradient, max_rel_err, random_matrix, random_probs, FD_STEP};

    /// A random small architecture, parameters and batch.
    pub fn random_case(case_seed: u64) -> (Parameters, Batch) {
        let mut rng = seed::rng(case_seed);
        let hidden: Vec<usize> = (0..rng.random_range(0..3)).map(|_| rng.random_range(2..7)).collect();
        let batch_size = rng.random_range(1..5);
        if rng.random_bool(0.7) {
            let input = rng.random_range(2..7);
            let k = rng.random_range(2..6);
            let arch = Arc::new(Architecture::classifier(input, hidden, k).unwrap());
            let mut params = init_params(arch, case_seed);
            jitter_biases(&mut params, &mut rng);
            let x = random_matrix(&mut rng, batch_size, input, 1.5);
            let labels = (0..batch_size).map(|_| rng.random_range(0..k)).collect();
            (params, Batch::dense(x, labels).unwrap())
        } else {
            let window = rng.random_range(1..4);
            let vocab = rng.random_range(3..7);
            let emb = rng.random_range(2..4);
            let arch = Arc::new(Architecture::language_model(window, vocab, emb, hidden).unwrap());
            let mut params = init_params(arch, case_seed);
            jitter_biases(&mut params, &mut rng);
            let ids = (0..batch_size * window).map(|_| rng.random_range(0..vocab as u32)).collect();
            let labels = (0..batch_size).map(|_| rng.random_range(0..vocab)).collect();
            (params, Batch::tokens(window, ids, labels).unwrap())
        }
    }

    fn jitter_biases(params: &mut Parameters, rng: &mut rand_chacha::ChaCha8Rng) {
        let ranges: Vec<_> = params.architecture().layers().iter().map(|l| l.biases.clone()).collect();
        for r in ranges {
            for v in &mut params.values_mut()[r] {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }

    /// Every loss configuration the trainer can produce, with a matching
    /// fixed teacher signal.
    pub fn loss_cases(k: usize, rows: usize, case_seed: u64) -> Vec<(String, CombinedLossSpec, Option<TeacherSignal>)> {
        let mut rng = seed::rng(seed::derive(case_seed, "teacher", 0));
        let probs = random_probs(&mut rng, rows, k);
        let logits = random_matrix(&mut rng, rows, k, 2.0);
        let uni = random_probs(&mut rng, 1, k).row(0).to_vec();
        vec![
            ("hard_ce".into(), CombinedLossSpec::hard_only(), None),
            (
                "soft_ce".into(),
                CombinedLossSpec::distill(DistillLossKind::SoftCrossEntropy, 0.7),
                Some(TeacherSignal::Probs(probs.clone())),
            ),
            ("kl".into(), CombinedLossSpec::distill(DistillLossKind::KlDivergence, 0.7), Some(TeacherSignal::Probs(probs))),
            (
                "logit_mse".into(),
                CombinedLossSpec::distill(DistillLossKind::LogitMse, 0.7),
                Some(TeacherSignal::Logits(logits)),
            ),
            ("smooth_uniform".into(), CombinedLossSpec::smoothed(SmoothingKind::Uniform, 0.1), None),
            (
                "smooth_unigram".into(),
                CombinedLossSpec::smoothed(SmoothingKind::unigram(uni).unwrap(), 0.3),
                None,
            ),
        ]
    }

    /// Max relative error between analytic and finite-difference parameter
    /// gradients, per loss case.
    pub fn check_case(case_seed: u64) -> Vec<(String, f64)> {
        let (params, batch) = random_case(case_seed);
        let arch = params.shared_architecture().clone();
        let k = arch.output_dim();
        loss_cases(k, batch.len(), case_seed)
            .into_iter()
            .map(|(name, spec, teacher)| {
                let loss_at = |p: &Parameters| -> (f64, Matrix) {
                    let z = forward(p, &batch).unwrap();
                    let out = combined_loss(&spec, batch.labels(), &z, teacher.as_ref()).unwrap();
                    (out.loss, out.grad)
                };
                let (_, dz) = loss_at(&params);
                let analytic = backward(&params, &batch, &dz).unwrap();
                let numeric = fd_gradient(params.values(), FD_STEP, |v| {
                    loss_at(&Parameters::new(arch.clone(), v.to_vec()).unwrap()).0
                });
                (name, max_rel_err(analytic.values(), &numeric))
            })
            .collect()
    }
}

pub mod equivalence {
    use std::sync::Arc;

    use codistill_core::data::{gen_classification, ClassificationSpec};
    use codistill_core::distrib::{sync_group_step, WorkerGroup};
    use codistill_core::{Architecture, GroupConfig, OptimizerConfig, Shard};

    /// Trains a `W x B` synchronous group and a single worker with batch
    /// `W * B` fed the group's interleaved stream; returns the largest
    /// parameter difference seen over `steps` steps.
    pub fn sync_vs_big_batch(w: usize, b: usize, steps: usize, optimizer: OptimizerConfig) -> f64 {
        let data = Arc::new(gen_classification(&ClassificationSpec::new(11, 2000, 8, 5, 0.5)).unwrap());
        let arch = Arc::new(Architecture::classifier(8, vec![16, 8], 5).unwrap());
        let shard = Shard::full(data.clone());
        let mut group = WorkerGroup::new(0, GroupConfig::new(w, b, optimizer, 77), arch.clone(), &shard).unwrap();
        let mut single = WorkerGroup::new(1, GroupConfig::new(1, w * b, optimizer, 77), arch, &shard).unwrap();
        let mut stream = group.interleaved_stream();
        let mut worst: f64 = 0.0;
        for _ in 0..steps {
            let batches = group.next_batches();
            let big = data.batch(&stream.next_indices()).unwrap();
            sync_group_step(&mut group, &batches).unwrap();
            sync_group_step(&mut single, &[big]).unwrap();
            worst = worst.max(group.params().max_abs_diff(single.params()));
        }
        worst
    }
}
