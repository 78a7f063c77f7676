//! Corpora of fixed-width feature vectors, their CSV + manifest file format,
//! and a synthetic generator for source/target pairs under a controlled shift.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{EcanError, Result};
use crate::grad::Tensor;

/// Per-dimension standard deviation of every generated cluster.
pub const CLUSTER_STD: f64 = 0.3;

const UNLABELED: i64 = -1;

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    name: String,
    class_count: usize,
    dim: usize,
    features: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl Corpus {
    pub fn new(
        name: impl Into<String>,
        class_count: usize,
        dim: usize,
        features: Vec<f64>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if dim == 0 || features.is_empty() {
            return Err(EcanError::Data("corpus needs at least one sample and one feature".into()));
        }
        if features.len() % dim != 0 {
            return Err(EcanError::Dimension(format!(
                "{} feature values do not divide into rows of width {dim}",
                features.len()
            )));
        }
        if class_count == 0 {
            return Err(EcanError::Config("class count must be positive".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(EcanError::Data("non-finite feature value".into()));
        }
        let n = features.len() / dim;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(EcanError::Data(format!("{} labels for {n} samples", l.len())));
            }
            if let Some(bad) = l.iter().find(|&&c| c >= class_count) {
                return Err(EcanError::Data(format!(
                    "label {bad} outside [0, {class_count})"
                )));
            }
        }
        Ok(Corpus {
            name: name.into(),
            class_count,
            dim,
            features,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn feature_values(&self) -> &[f64] {
        &self.features
    }

    pub fn features(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.features.clone()).expect("validated corpus")
    }

    /// The selected rows as an `indices.len() x dim` matrix.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.len();
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= n {
                return Err(EcanError::Index { index: i, len: n });
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(indices.len(), self.dim, data)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn without_labels(&self) -> Corpus {
        Corpus {
            labels: None,
            ..self.clone()
        }
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Corpus> {
        Corpus::new(
            self.name.clone(),
            self.class_count,
            self.dim,
            self.features.clone(),
            Some(labels),
        )
    }

    pub fn class_counts(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| {
            let mut counts = vec![0; self.class_count];
            l.iter().for_each(|&c| counts[c] += 1);
            counts
        })
    }
}

/// Sidecar JSON written next to every corpus CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    #[serde(rename = "C")]
    pub class_count: usize,
    pub dim: usize,
    #[serde(rename = "N")]
    pub len: usize,
}

pub fn manifest_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

pub fn save_corpus(corpus: &Corpus, csv_path: impl AsRef<Path>) -> Result<()> {
    let csv_path = csv_path.as_ref();
    if corpus.is_empty() {
        return Err(EcanError::Data("refusing to save an empty corpus".into()));
    }
    let mut out = String::new();
    out.push_str("label");
    for j in 0..corpus.dim {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for i in 0..corpus.len() {
        let label = corpus.labels.as_ref().map_or(UNLABELED, |l| l[i] as i64);
        out.push_str(&label.to_string());
        for v in corpus.row(i) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(csv_path, out).map_err(|e| EcanError::io(csv_path, e))?;

    let manifest = Manifest {
        name: corpus.name.clone(),
        class_count: corpus.class_count,
        dim: corpus.dim,
        len: corpus.len(),
    };
    let mpath = manifest_path(csv_path);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text + "\n").map_err(|e| EcanError::io(&mpath, e))
}

pub fn load_corpus(csv_path: impl AsRef<Path>) -> Result<Corpus> {
    let csv_path = csv_path.as_ref();
    let src = csv_path.display().to_string();
    let mpath = manifest_path(csv_path);
    let mtext = fs::read_to_string(&mpath).map_err(|e| EcanError::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&mtext).map_err(|e| {
        EcanError::format(mpath.display().to_string(), format!("line {}", e.line()), e.to_string())
    })?;
    let bytes = fs::read(csv_path).map_err(|e| EcanError::io(csv_path, e))?;

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes.as_slice());
    let mut records = reader.records();
    let line_of = |r: &csv::StringRecord| r.position().map_or(0, |p| p.line());
    let csv_err = |e: csv::Error| {
        let line = e.position().map_or(0, |p| p.line());
        EcanError::format(&src, format!("line {line}"), e.to_string())
    };

    let header = records
        .next()
        .ok_or_else(|| EcanError::format(&src, "line 1", "missing header"))?
        .map_err(csv_err)?;
    let width = header.len().saturating_sub(1);
    let header_ok = header.get(0) == Some("label")
        && header.iter().skip(1).enumerate().all(|(j, h)| h == format!("f{j}"));
    if !header_ok || width == 0 {
        return Err(EcanError::format(&src, "line 1", "header must be label,f0,f1,...".to_string()));
    }
    if width != manifest.dim {
        return Err(EcanError::format(
            &src,
            "line 1",
            format!("header has {width} features, manifest says {}", manifest.dim),
        ));
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in records {
        let record = record.map_err(csv_err)?;
        let line = line_of(&record);
        let at = format!("line {line}");
        if record.len() != width + 1 {
            return Err(EcanError::format(
                &src,
                at,
                format!("expected {} fields, found {}", width + 1, record.len()),
            ));
        }
        let label: i64 = record[0]
            .trim()
            .parse()
            .map_err(|_| EcanError::format(&src, &at, format!("label {:?} is not an integer", &record[0])))?;
        if label < UNLABELED || label >= manifest.class_count as i64 {
            return Err(EcanError::format(
                &src,
                &at,
                format!("label {label} outside [0, {}) and not -1", manifest.class_count),
            ));
        }
        labels.push(label);
        for (j, cell) in record.iter().skip(1).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                EcanError::format(&src, &at, format!("feature f{j} value {cell:?} is not numeric"))
            })?;
            if !v.is_finite() {
                return Err(EcanError::format(&src, &at, format!("feature f{j} is not finite")));
            }
            features.push(v);
        }
    }
    if labels.len() != manifest.len {
        return Err(EcanError::format(
            &src,
            "end of file",
            format!("{} rows, manifest says {}", labels.len(), manifest.len),
        ));
    }
    let unlabeled = labels.iter().filter(|&&l| l == UNLABELED).count();
    let labels = match unlabeled {
        0 => Some(labels.into_iter().map(|l| l as usize).collect()),
        n if n == labels.len() => None,
        _ => {
            return Err(EcanError::format(
                &src,
                "label column",
                "mixes -1 with class labels; a corpus is either labeled or unlabeled",
            ))
        }
    };
    Corpus::new(manifest.name, manifest.class_count, width, features, labels)
}

/// Parameters of a synthetic source/target pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub class_count: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Radians, applied in the plane of the first two axes.
    pub rotation: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
    pub noise_sigma: f64,
    pub class_imbalance: Option<Vec<f64>>,
    pub seed: u64,
}

impl ShiftSpec {
    /// The default moderate-shift task: 4 classes in 16 dimensions.
    pub fn canonical(seed: u64) -> Self {
        ShiftSpec {
            class_count: 4,
            dim: 16,
            samples_per_class: 150,
            rotation: PI / 6.0,
            translation: vec![0.5; 16],
            scale: 1.2,
            noise_sigma: 0.1,
            class_imbalance: None,
            seed,
        }
    }

    /// Same clusters with no shift at all.
    pub fn unshifted(mut self) -> Self {
        self.rotation = 0.0;
        self.translation = vec![0.0; self.dim];
        self.scale = 1.0;
        self.noise_sigma = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(EcanError::Config(m));
        if self.class_count < 2 {
            return fail(format!("need at least 2 classes, got {}", self.class_count));
        }
        if self.dim < 2 {
            return fail(format!("need at least 2 dimensions, got {}", self.dim));
        }
        if self.samples_per_class == 0 {
            return fail("samples_per_class must be positive".into());
        }
        if self.translation.len() != self.dim {
            return fail(format!(
                "translation has {} entries for dim {}",
                self.translation.len(),
                self.dim
            ));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return fail(format!("scale must be positive, got {}", self.scale));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !self.rotation.is_finite() || self.translation.iter().any(|t| !t.is_finite()) {
            return fail("rotation and translation must be finite".into());
        }
        if let Some(m) = &self.class_imbalance {
            if m.len() != self.class_count || m.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return fail(format!(
                    "class_imbalance needs {} positive multipliers",
                    self.class_count
                ));
            }
        }
        Ok(())
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        (0..self.class_count)
            .map(|c| match &self.class_imbalance {
                Some(m) => ((self.samples_per_class as f64 * m[c]).round() as usize).max(1),
                None => self.samples_per_class,
            })
            .collect()
    }

    /// Cluster centres on a circle in the first two axes, radius at least 1
    /// and large enough that neighbouring centres are at least 1 apart.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let c = self.class_count as f64;
        let radius = (0.5 / (PI / c).sin()).max(1.0);
        (0..self.class_count)
            .map(|k| {
                let angle = 2.0 * PI * k as f64 / c;
                let mut m = vec![0.0; self.dim];
                m[0] = radius * angle.cos();
                m[1] = radius * angle.sin();
                m
            })
            .collect()
    }
}

/// Draws a labeled source corpus and a labeled target corpus whose samples
/// are the same class clusters pushed through rotation, scaling, translation
/// and additive noise. Target labels exist for evaluation only.
pub fn generate_pair(spec: &ShiftSpec) -> Result<(Corpus, Corpus)> {
    spec.validate()?;
    let cluster = Normal::new(0.0, CLUSTER_STD).expect("positive std");
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let means = spec.class_means();
    let sizes = spec.class_sizes();
    let (sin, cos) = spec.rotation.sin_cos();

    let mut source_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    source_rng.set_stream(0);
    let mut target_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    target_rng.set_stream(1);

    let total: usize = sizes.iter().sum();
    let mut src = Vec::with_capacity(total * spec.dim);
    let mut tgt = Vec::with_capacity(total * spec.dim);
    let mut labels = Vec::with_capacity(total);
    for (class, (mean, &n)) in means.iter().zip(&sizes).enumerate() {
        for _ in 0..n {
            src.extend(mean.iter().map(|m| m + cluster.sample(&mut source_rng)));

            let mut x: Vec<f64> = mean.iter().map(|m| m + cluster.sample(&mut target_rng)).collect();
            let (a, b) = (x[0], x[1]);
            x[0] = cos * a - sin * b;
            x[1] = sin * a + cos * b;
            for (v, t) in x.iter_mut().zip(&spec.translation) {
                *v = *v * spec.scale + t + noise.sample(&mut target_rng);
            }
            tgt.extend(x);
            labels.push(class);
        }
    }
    let source = Corpus::new("source", spec.class_count, spec.dim, src, Some(labels.clone()))?;
    let target = Corpus::new("target", spec.class_count, spec.dim, tgt, Some(labels))?;
    Ok((source, target))
}
