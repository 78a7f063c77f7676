//! Shared test oracles: a central-difference gradient checker, random case
//! generators and naive double-loop reference losses.

#![allow(dead_code)]

use ecan::banks::{FeatureBank, ScoreBank};
use ecan::grad::{Tape, Tensor, Var};
use ecan::losses::{ce_label_smoothing, div_loss, ncl_loss, scl_loss};
use ecan::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Moves entries lying within `gap` of `kink` away from it so that a central
/// difference never straddles a non-differentiable point.
pub fn avoid(mut t: Tensor, kink: f64, gap: f64) -> Tensor {
    for v in t.data_mut() {
        if (*v - kink).abs() < gap {
            *v = kink + if *v < kink { -2.0 * gap } else { 2.0 * gap };
        }
    }
    t
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub build: Box<Build>,
}

impl GradCase {
    fn new(name: &str, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Self {
        GradCase {
            name: name.to_string(),
            inputs,
            build: Box::new(build),
        }
    }

    pub fn max_error(&self) -> f64 {
        max_gradient_error(&self.inputs, &*self.build)
    }

    pub fn worst_entry(&self) -> GradientMismatch {
        gradient_mismatch(&self.inputs, &*self.build)
    }
}

fn evaluate(inputs: &[Tensor], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out).item().unwrap()
}

/// The input entry where tape gradient and central difference disagree most.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientMismatch {
    pub relative_error: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub loss: f64,
}

/// Largest relative disagreement between tape gradients and central
/// differences, over every entry of every input.
pub fn max_gradient_error(inputs: &[Tensor], build: &Build) -> f64 {
    gradient_mismatch(inputs, build).relative_error
}

pub fn gradient_mismatch(inputs: &[Tensor], build: &Build) -> GradientMismatch {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
        })
        .collect();

    let loss = tape.value(out).item().unwrap();
    let mut worst = GradientMismatch {
        loss,
        ..GradientMismatch::default()
    };
    let mut probe = inputs.to_vec();
    for (t, grads) in analytic.iter().enumerate() {
        for (e, &a) in grads.iter().enumerate() {
            let orig = probe[t].data()[e];
            probe[t].data_mut()[e] = orig + FD_STEP;
            let up = evaluate(&probe, build);
            probe[t].data_mut()[e] = orig - FD_STEP;
            let down = evaluate(&probe, build);
            probe[t].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            if err > worst.relative_error {
                worst = GradientMismatch {
                    relative_error: err,
                    analytic: a,
                    numeric,
                    loss,
                };
            }
        }
    }
    worst
}

/// Reduces any output to a scalar through fixed pseudo-random weights, so a
/// wrong gradient cannot hide behind a uniform upstream signal.
fn weigh(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| r.random_range(-1.5..1.5)).collect())?;
    let w = tape.constant(w);
    let prod = tape.mul(v, w)?;
    tape.sum(prod)
}

/// One random instance of every differentiable primitive.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut r = rng(seed);
    let n = r.random_range(2..=4);
    let m = r.random_range(2..=4);
    let k = r.random_range(2..=4);
    let mut x = |rows, cols| uniform(&mut r, rows, cols, -2.0, 2.0);
    let a = x(n, m);
    let b = x(n, m);
    let left = x(n, k);
    let right = x(k, m);
    let bias = x(1, m);
    let bias = Tensor::vector(bias.data().to_vec());
    let mut r = rng(seed.wrapping_add(1));
    let positive = uniform(&mut r, n, m, 0.1, 2.0);
    let mask: Vec<bool> = (0..n * m).map(|i| i % m == 0 || r.random_bool(0.6)).collect();
    let gather: Vec<usize> = (0..n + 2).map(|_| r.random_range(0..n)).collect();
    let s = seed;

    vec![
        GradCase::new("matmul", vec![left, right], move |t, v| {
            let o = t.matmul(v[0], v[1])?;
            weigh(t, o, s)
        }),
        GradCase::new("add", vec![a.clone(), b.clone()], move |t, v| {
            let o = t.add(v[0], v[1])?;
            weigh(t, o, s)
        }),
        GradCase::new("sub", vec![a.clone(), b.clone()], move |t, v| {
            let o = t.sub(v[0], v[1])?;
            weigh(t, o, s)
        }),
        GradCase::new("mul", vec![a.clone(), b.clone()], move |t, v| {
            let o = t.mul(v[0], v[1])?;
            weigh(t, o, s)
        }),
        GradCase::new("add_row", vec![a.clone(), bias], move |t, v| {
            let o = t.add_row(v[0], v[1])?;
            weigh(t, o, s)
        }),
        GradCase::new("scale", vec![a.clone()], move |t, v| {
            let o = t.scale(v[0], -1.7)?;
            weigh(t, o, s)
        }),
        GradCase::new("relu", vec![avoid(a.clone(), 0.0, 1e-3)], move |t, v| {
            let o = t.relu(v[0])?;
            weigh(t, o, s)
        }),
        GradCase::new("log", vec![positive], move |t, v| {
            let o = t.log(v[0])?;
            weigh(t, o, s)
        }),
        GradCase::new("exp", vec![a.clone()], move |t, v| {
            let o = t.exp(v[0])?;
            weigh(t, o, s)
        }),
        GradCase::new("clamp_min", vec![avoid(a.clone(), 0.3, 1e-3)], move |t, v| {
            let o = t.clamp_min(v[0], 0.3)?;
            weigh(t, o, s)
        }),
        GradCase::new("gather_rows", vec![a.clone()], move |t, v| {
            let o = t.gather_rows(v[0], &gather)?;
            weigh(t, o, s)
        }),
        GradCase::new("sum", vec![a.clone()], move |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        }),
        GradCase::new("mean", vec![a.clone()], move |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.mean(sq)
        }),
        GradCase::new("column_mean", vec![a.clone()], move |t, v| {
            let o = t.column_mean(v[0])?;
            weigh(t, o, s)
        }),
        GradCase::new("transpose", vec![a.clone()], move |t, v| {
            let o = t.transpose(v[0])?;
            weigh(t, o, s)
        }),
        GradCase::new("softmax_rows", vec![a.clone()], move |t, v| {
            let o = t.softmax_rows(v[0])?;
            weigh(t, o, s)
        }),
        GradCase::new("l2_normalize_rows", vec![a.clone()], move |t, v| {
            let o = t.l2_normalize_rows(v[0])?;
            weigh(t, o, s)
        }),
        GradCase::new("logsumexp_rows", vec![a.clone()], move |t, v| {
            let o = t.logsumexp_rows(v[0], None)?;
            weigh(t, o, s)
        }),
        GradCase::new("logsumexp_rows (masked)", vec![a], move |t, v| {
            let o = t.logsumexp_rows(v[0], Some(mask.clone()))?;
            weigh(t, o, s)
        }),
    ]
}

/// A random small contrastive setting: bank of `n_t` rows, scores over `c`
/// classes, a batch of distinct anchor indices and live batch features.
pub struct ContrastiveInstance {
    pub features: FeatureBank,
    pub scores: ScoreBank,
    pub indices: Vec<usize>,
    pub batch: Tensor,
    pub tau: f64,
}

pub fn contrastive_instance(seed: u64) -> ContrastiveInstance {
    let mut r = rng(seed);
    let n_t = r.random_range(3..=10);
    let d = r.random_range(2..=5);
    let c = r.random_range(2..=4);
    let raw = uniform(&mut r, n_t, d, -2.0, 2.0);
    let logits = uniform(&mut r, n_t, c, -2.0, 2.0);
    let mut probs = vec![0.0; n_t * c];
    for i in 0..n_t {
        ecan::grad::softmax_row(logits.row(i), &mut probs[i * c..(i + 1) * c]);
    }
    let mut all: Vec<usize> = (0..n_t).collect();
    all.shuffle(&mut r);
    let n = r.random_range(1..=n_t);
    let indices = all[..n].to_vec();
    let batch = uniform(&mut r, n, d, -2.0, 2.0);
    let tau = [0.05, 0.1, 0.5, 1.0][r.random_range(0..4)];
    ContrastiveInstance {
        features: FeatureBank::from_raw(&raw).unwrap(),
        scores: ScoreBank::from_probs(&Tensor::matrix(n_t, c, probs).unwrap()).unwrap(),
        indices,
        batch,
        tau,
    }
}

/// One random instance of each adaptation or pre-training loss, with
/// gradients taken with respect to the live batch tensor.
pub fn loss_cases(seed: u64) -> Vec<GradCase> {
    let inst = contrastive_instance(seed);
    let mut r = rng(seed.wrapping_add(7));
    let c = inst.scores.class_count();
    let n = inst.indices.len();
    let logits = uniform(&mut r, n.max(2), c, -2.0, 2.0);
    let probs_direct = uniform(&mut r, n.max(2), c, 0.05, 1.0);
    let labels: Vec<usize> = (0..n.max(2)).map(|_| r.random_range(0..c)).collect();
    let eps = [0.0, 0.1, 0.3][r.random_range(0..3)];

    let (bank, idx, tau) = (inst.features.clone(), inst.indices.clone(), inst.tau);
    let ncl = GradCase::new("ncl_loss", vec![inst.batch.clone()], move |t, v| {
        ncl_loss(t, v[0], &idx, &bank, tau, 1)
    });
    let (bank, scores, idx) = (inst.features.clone(), inst.scores.clone(), inst.indices.clone());
    let scl = GradCase::new("scl_loss", vec![inst.batch.clone()], move |t, v| {
        scl_loss(t, v[0], &idx, &bank, &scores, tau)
    });
    let div = GradCase::new("div_loss (softmax input)", vec![logits.clone()], |t, v| {
        let p = t.softmax_rows(v[0])?;
        div_loss(t, p)
    });
    let div_direct = GradCase::new("div_loss", vec![probs_direct.clone()], |t, v| div_loss(t, v[0]));
    let l2 = labels.clone();
    let ce = GradCase::new("ce_label_smoothing (softmax input)", vec![logits], move |t, v| {
        let p = t.softmax_rows(v[0])?;
        ce_label_smoothing(t, p, &l2, eps)
    });
    let ce_direct = GradCase::new("ce_label_smoothing", vec![probs_direct], move |t, v| {
        ce_label_smoothing(t, v[0], &labels, eps)
    });
    vec![ncl, scl, div, div_direct, ce, ce_direct]
}

fn normalized(row: &[f64]) -> Vec<f64> {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    row.iter().map(|v| v / norm).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (normalized(a), normalized(b));
    a.iter().zip(&b).map(|(x, y)| x * y).sum()
}

/// Naive top-`k` by repeated linear scans; strict comparison keeps the lowest
/// index on ties.
pub fn naive_knn(bank: &FeatureBank, anchor: usize, k: usize) -> Vec<usize> {
    let mut chosen = Vec::new();
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..bank.len() {
            if j == anchor || chosen.contains(&j) {
                continue;
            }
            let s = cos(bank.row(anchor), bank.row(j));
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

fn naive_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for c in 1..row.len() {
        if row[c] > row[best] {
            best = c;
        }
    }
    best
}

/// `-log(exp(s_ip / tau) / sum_{j != i} exp(s_ij / tau))`, written out.
fn naive_term(f: &[f64], bank: &FeatureBank, anchor: usize, positive: usize, tau: f64) -> f64 {
    let mut denom = 0.0;
    for j in 0..bank.len() {
        if j != anchor {
            denom += (cos(f, bank.row(j)) / tau).exp();
        }
    }
    -((cos(f, bank.row(positive)) / tau).exp() / denom).ln()
}

pub fn naive_ncl(inst: &ContrastiveInstance, k: usize) -> f64 {
    let mut total = 0.0;
    for (r, &i) in inst.indices.iter().enumerate() {
        for p in naive_knn(&inst.features, i, k) {
            total += naive_term(inst.batch.row(r), &inst.features, i, p, inst.tau);
        }
    }
    total / inst.indices.len() as f64
}

pub fn naive_scl(inst: &ContrastiveInstance) -> f64 {
    let mut total = 0.0;
    for (r, &i) in inst.indices.iter().enumerate() {
        let class = naive_argmax(inst.scores.row(i));
        let positives: Vec<usize> = (0..inst.scores.len())
            .filter(|&j| j != i && naive_argmax(inst.scores.row(j)) == class)
            .collect();
        if positives.is_empty() {
            continue;
        }
        let mut anchor_sum = 0.0;
        for &p in &positives {
            anchor_sum += naive_term(inst.batch.row(r), &inst.features, i, p, inst.tau);
        }
        total += anchor_sum / positives.len() as f64;
    }
    total / inst.indices.len() as f64
}

pub fn vectorized_ncl(inst: &ContrastiveInstance, k: usize) -> f64 {
    let mut tape = Tape::new();
    let f = tape.constant(inst.batch.clone());
    let v = ncl_loss(&mut tape, f, &inst.indices, &inst.features, inst.tau, k).unwrap();
    tape.value(v).item().unwrap()
}

pub fn vectorized_scl(inst: &ContrastiveInstance) -> f64 {
    let mut tape = Tape::new();
    let f = tape.constant(inst.batch.clone());
    let v = scl_loss(&mut tape, f, &inst.indices, &inst.features, &inst.scores, inst.tau).unwrap();
    tape.value(v).item().unwrap()
}
