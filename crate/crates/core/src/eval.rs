//! Unweighted average recall, confusion matrices, a cluster-compactness score
//! and a 2-D PCA projection of extracted features.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::banks::argmax;
use crate::data::Corpus;
use crate::error::{EcanError, Result};
use crate::grad::Tensor;
use crate::model::EcanModel;

pub const POWER_ITERATIONS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub uar: f64,
    /// `None` for classes with no samples; those are left out of the UAR.
    pub per_class_recall: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    /// Mean intra-class minus mean inter-class cosine of extracted features.
    pub cluster_quality: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Argmax predictions, ties to the lowest class index.
pub fn predict(model: &EcanModel, corpus: &Corpus) -> Result<Vec<usize>> {
    let (_, probs) = model.forward(&corpus.features())?;
    Ok((0..probs.rows()).map(|r| argmax(probs.row(r))).collect())
}

pub fn confusion_matrix(predictions: &[usize], labels: &[usize], class_count: usize) -> Result<Vec<Vec<u64>>> {
    if predictions.len() != labels.len() {
        return Err(EcanError::Dimension(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0u64; class_count]; class_count];
    for (&p, &t) in predictions.iter().zip(labels) {
        if p >= class_count || t >= class_count {
            return Err(EcanError::Data(format!("class index outside [0, {class_count})")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// `(uar, per_class_recall, accuracy)` from a confusion matrix.
pub fn recall_summary(confusion: &[Vec<u64>]) -> (f64, Vec<Option<f64>>, f64) {
    let recalls: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let count: u64 = row.iter().sum();
            (count > 0).then(|| row[c] as f64 / count as f64)
        })
        .collect();
    let present: Vec<f64> = recalls.iter().flatten().copied().collect();
    let uar = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let total: u64 = confusion.iter().flatten().sum();
    let correct: u64 = (0..confusion.len()).map(|c| confusion[c][c]).sum();
    let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    (uar, recalls, accuracy)
}

pub fn uar(predictions: &[usize], labels: &[usize], class_count: usize) -> Result<f64> {
    Ok(recall_summary(&confusion_matrix(predictions, labels, class_count)?).0)
}

/// Mean cosine over same-label pairs minus mean cosine over different-label
/// pairs. `None` when either kind of pair is absent.
pub fn cluster_quality(features: &Tensor, labels: &[usize]) -> Result<Option<f64>> {
    let n = features.rows();
    if labels.len() != n {
        return Err(EcanError::Dimension(format!("{} labels for {n} rows", labels.len())));
    }
    let norms: Vec<f64> = (0..n)
        .map(|i| features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&x| x < crate::grad::MIN_ROW_NORM) {
        return Err(EcanError::DegenerateFeature { row: i, norm: norms[i] });
    }
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0u64, 0.0, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = features.row(i).iter().zip(features.row(j)).map(|(a, b)| a * b).sum();
            let cos = dot / (norms[i] * norms[j]);
            if labels[i] == labels[j] {
                intra += cos;
                n_intra += 1;
            } else {
                inter += cos;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Ok(None);
    }
    Ok(Some(intra / n_intra as f64 - inter / n_inter as f64))
}

pub fn evaluate(model: &EcanModel, corpus: &Corpus) -> Result<EvalReport> {
    let labels = corpus
        .labels()
        .ok_or_else(|| EcanError::Usage(format!("corpus {} has no labels to evaluate against", corpus.name())))?;
    if corpus.class_count() != model.class_count() {
        return Err(EcanError::Config(format!(
            "corpus has {} classes, model has {}",
            corpus.class_count(),
            model.class_count()
        )));
    }
    let (features, probs) = model.forward(&corpus.features())?;
    let predictions: Vec<usize> = (0..probs.rows()).map(|r| argmax(probs.row(r))).collect();
    let confusion = confusion_matrix(&predictions, labels, corpus.class_count())?;
    let (uar, per_class_recall, accuracy) = recall_summary(&confusion);
    Ok(EvalReport {
        uar,
        per_class_recall,
        confusion,
        accuracy,
        cluster_quality: cluster_quality(&features, labels)?,
    })
}

/// Top two principal directions of the rows of `x`, found by power iteration
/// with deflation. Each direction's first non-negligible loading is positive.
pub fn principal_axes(x: &Tensor) -> Result<[Vec<f64>; 2]> {
    let (n, d) = x.dims();
    if n < 3 {
        return Err(EcanError::Config(format!("projection needs at least 3 samples, got {n}")));
    }
    let centered = center(x);
    let mut cov = vec![0.0; d * d];
    for r in 0..n {
        let row = &centered[r * d..(r + 1) * d];
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += row[a] * row[b] / n as f64;
            }
        }
    }
    let trace: f64 = (0..d).map(|a| cov[a * d + a]).sum();
    if !(trace > 1e-24) {
        return Err(EcanError::Numeric("features have zero variance; nothing to project".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let mut start = || -> Vec<f64> { (0..d).map(|_| StandardNormal.sample(&mut rng)).collect() };

    let first = power_iterate(&cov, d, start(), &[]).expect("non-zero covariance has a top direction");
    let eig = rayleigh(&cov, d, &first);
    let mut deflated = cov.clone();
    for a in 0..d {
        for b in 0..d {
            deflated[a * d + b] -= eig * first[a] * first[b];
        }
    }
    let second = if d < 2 {
        vec![0.0; d]
    } else {
        let s = start();
        power_iterate(&deflated, d, s.clone(), &first)
            .or_else(|| unit(orthogonalize(s, &first)))
            .unwrap_or_else(|| {
                // start happened to be parallel to `first`; any basis vector
                // not parallel to it will do
                (0..d)
                    .find_map(|k| {
                        let mut e = vec![0.0; d];
                        e[k] = 1.0;
                        unit(orthogonalize(e, &first))
                    })
                    .expect("d >= 2")
            })
    };
    Ok([fix_sign(first), fix_sign(second)])
}

fn center(x: &Tensor) -> Vec<f64> {
    let (n, d) = x.dims();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v / n as f64;
        }
    }
    let mut out = Vec::with_capacity(n * d);
    for r in 0..n {
        out.extend(x.row(r).iter().zip(&mean).map(|(v, m)| v - m));
    }
    out
}

fn matvec(m: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d).map(|a| (0..d).map(|b| m[a * d + b] * v[b]).sum()).collect()
}

fn rayleigh(m: &[f64], d: usize, v: &[f64]) -> f64 {
    matvec(m, d, v).iter().zip(v).map(|(a, b)| a * b).sum()
}

fn orthogonalize(mut v: Vec<f64>, against: &[f64]) -> Vec<f64> {
    if against.is_empty() {
        return v;
    }
    let dot: f64 = v.iter().zip(against).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(against).for_each(|(x, a)| *x -= dot * a);
    v
}

fn unit(v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 1e-10).then(|| v.into_iter().map(|x| x / norm).collect())
}

fn power_iterate(m: &[f64], d: usize, start: Vec<f64>, against: &[f64]) -> Option<Vec<f64>> {
    let scale: f64 = m.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let mut v = unit(orthogonalize(start, against))?;
    for _ in 0..POWER_ITERATIONS {
        let next = orthogonalize(matvec(m, d, &v), against);
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            return None;
        }
        v = next.into_iter().map(|x| x / norm).collect();
    }
    Some(v)
}

fn fix_sign(mut v: Vec<f64>) -> Vec<f64> {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    v
}

/// Centres `x` and projects it onto [`principal_axes`], giving `n x 2`.
pub fn pca_2d(x: &Tensor) -> Result<Tensor> {
    let axes = principal_axes(x)?;
    let (n, d) = x.dims();
    let centered = center(x);
    let mut out = Vec::with_capacity(n * 2);
    for r in 0..n {
        let row = &centered[r * d..(r + 1) * d];
        for axis in &axes {
            out.push(row.iter().zip(axis).map(|(a, b)| a * b).sum());
        }
    }
    Tensor::matrix(n, 2, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub label: Option<usize>,
}

/// 2-D PCA of the model's extracted features over `corpus`.
pub fn project_2d(model: &EcanModel, corpus: &Corpus) -> Result<Vec<ProjectedPoint>> {
    let (features, _) = model.forward(&corpus.features())?;
    let xy = pca_2d(&features)?;
    Ok((0..xy.rows())
        .map(|r| ProjectedPoint {
            x: xy.get(r, 0),
            y: xy.get(r, 1),
            label: corpus.labels().map(|l| l[r]),
        })
        .collect())
}

/// CSV with header `x,y,label`; unlabeled points get label `-1`.
pub fn projection_csv(points: &[ProjectedPoint]) -> String {
    let mut out = String::from("x,y,label\n");
    for p in points {
        let label = p.label.map_or(-1, |l| l as i64);
        out.push_str(&format!("{},{},{}\n", p.x, p.y, label));
    }
    out
}

pub fn write_projection(points: &[ProjectedPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, projection_csv(points)).map_err(|e| EcanError::io(path, e))
}
