//! Per-sample memory of normalised target features and softmax scores.
//!
//! Row `i` of each bank always belongs to target sample `i`. Stored values are
//! plain numbers with no link to any tape.

use std::cmp::Ordering;

use crate::data::Corpus;
use crate::error::{EcanError, Result};
use crate::grad::{normalize_row, Tensor, MIN_ROW_NORM};
use crate::model::EcanModel;

/// Unit-norm feature rows, one per target sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    rows: Tensor,
}

/// Softmax score rows, one per target sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBank {
    rows: Tensor,
}

impl FeatureBank {
    /// Normalises each row of `raw` and stores it.
    pub fn from_raw(raw: &Tensor) -> Result<Self> {
        let (n, d) = raw.dims();
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            write_normalized(raw.row(r), &mut data[r * d..(r + 1) * d], r)?;
        }
        Ok(FeatureBank {
            rows: Tensor::matrix(n, d, data)?,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.rows
    }

    /// Cosine similarity of stored rows `i` and `j`.
    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        dot(self.row(i), self.row(j))
    }
}

impl ScoreBank {
    pub fn from_probs(probs: &Tensor) -> Result<Self> {
        Ok(ScoreBank { rows: probs.clone() })
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_count(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.rows
    }

    /// Predicted class of row `i`; ties go to the lowest class index.
    pub fn pseudo_label(&self, i: usize) -> usize {
        argmax(self.row(i))
    }

    pub fn pseudo_labels(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.pseudo_label(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Banks {
    pub features: FeatureBank,
    pub scores: ScoreBank,
}

impl Banks {
    /// One full forward pass of `model` over `target`.
    pub fn init(model: &EcanModel, target: &Corpus) -> Result<Self> {
        if target.is_empty() {
            return Err(EcanError::Config("cannot build banks for an empty target corpus".into()));
        }
        if target.class_count() != model.class_count() {
            return Err(EcanError::Config(format!(
                "target has {} classes, model has {}",
                target.class_count(),
                model.class_count()
            )));
        }
        let (features, probs) = model.forward(&target.features())?;
        Ok(Banks {
            features: FeatureBank::from_raw(&features)?,
            scores: ScoreBank::from_probs(&probs)?,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Replaces rows `indices` with the normalised `features` and the `probs`
    /// of the current batch. Nothing is written unless every index and row is
    /// valid.
    pub fn update(&mut self, indices: &[usize], features: &Tensor, probs: &Tensor) -> Result<()> {
        let n = self.len();
        let (d, c) = (self.features.dim(), self.scores.class_count());
        if features.dims() != (indices.len(), d) || probs.dims() != (indices.len(), c) {
            return Err(EcanError::Dimension(format!(
                "update of {} rows got features {:?} and probs {:?}",
                indices.len(),
                features.shape(),
                probs.shape()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(EcanError::Index { index: bad, len: n });
        }
        let mut normalized = vec![0.0; indices.len() * d];
        for r in 0..indices.len() {
            write_normalized(features.row(r), &mut normalized[r * d..(r + 1) * d], indices[r])?;
        }
        let fdata = self.features.rows.data_mut();
        for (r, &i) in indices.iter().enumerate() {
            fdata[i * d..(i + 1) * d].copy_from_slice(&normalized[r * d..(r + 1) * d]);
        }
        let sdata = self.scores.rows.data_mut();
        for (r, &i) in indices.iter().enumerate() {
            sdata[i * c..(i + 1) * c].copy_from_slice(probs.row(r));
        }
        Ok(())
    }
}

fn write_normalized(raw: &[f64], out: &mut [f64], sample: usize) -> Result<()> {
    let norm = normalize_row(raw, out);
    if !(norm >= MIN_ROW_NORM) {
        return Err(EcanError::DegenerateFeature { row: sample, norm });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// The `k` rows most cosine-similar to row `anchor`, excluding the anchor
/// itself, most similar first. Ties go to the lower index.
pub fn knn(bank: &FeatureBank, anchor: usize, k: usize) -> Result<Vec<usize>> {
    let n = bank.len();
    if anchor >= n {
        return Err(EcanError::Index { index: anchor, len: n });
    }
    if k == 0 || k + 1 > n {
        return Err(EcanError::Config(format!(
            "k = {k} must lie in [1, {}] for a bank of {n} rows",
            n.saturating_sub(1)
        )));
    }
    let a = bank.row(anchor);
    let mut scored: Vec<(f64, usize)> = (0..n)
        .filter(|&j| j != anchor)
        .map(|j| (dot(a, bank.row(j)), j))
        .collect();
    let order = |x: &(f64, usize), y: &(f64, usize)| {
        y.0.partial_cmp(&x.0).unwrap_or(Ordering::Equal).then(x.1.cmp(&y.1))
    };
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    Ok(scored.into_iter().map(|(_, j)| j).collect())
}

/// Every other sample whose stored prediction has the same argmax as the
/// anchor's, in index order. May be empty.
pub fn same_class_set(scores: &ScoreBank, anchor: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if anchor >= n {
        return Err(EcanError::Index { index: anchor, len: n });
    }
    let target = scores.pseudo_label(anchor);
    Ok((0..n)
        .filter(|&j| j != anchor && scores.pseudo_label(j) == target)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn bank(rows: &[&[f64]]) -> FeatureBank {
        let d = rows[0].len();
        FeatureBank::from_raw(&Tensor::from_rows(rows, d).unwrap()).unwrap()
    }

    fn scores(rows: &[&[f64]]) -> ScoreBank {
        let c = rows[0].len();
        ScoreBank::from_probs(&Tensor::from_rows(rows, c).unwrap()).unwrap()
    }

    fn corpus(n: usize, dim: usize) -> Corpus {
        let feats = (0..n * dim).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        Corpus::new("t", 3, dim, feats, None).unwrap()
    }

    #[test]
    fn knn_nearest() {
        let b = bank(&[&[1.0, 0.0], &[0.99, 0.141], &[0.0, 1.0]]);
        assert_eq!(knn(&b, 0, 1).unwrap(), vec![1]);
        assert_eq!(knn(&b, 2, 1).unwrap(), vec![1]);
    }

    #[test]
    fn knn_full_sort_and_ties() {
        let b = bank(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 2.0], &[1.0, 1.0], &[-1.0, 0.0]]);
        // sims to row 3: rows 0,1,2 equal (1/sqrt 2), row 4 negative
        assert_eq!(knn(&b, 3, 4).unwrap(), vec![0, 1, 2, 4]);
        assert_eq!(knn(&b, 3, 2).unwrap(), vec![0, 1]);
        // rows 1 and 2 coincide after normalisation
        assert_eq!(knn(&b, 1, 1).unwrap(), vec![2]);
    }

    #[test]
    fn knn_range_checks() {
        let b = bank(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(knn(&b, 0, 0), Err(EcanError::Config(_))));
        assert!(matches!(knn(&b, 0, 2), Err(EcanError::Config(_))));
        assert!(matches!(knn(&b, 5, 1), Err(EcanError::Index { .. })));
    }

    #[test]
    fn same_class_examples() {
        let s = scores(&[&[0.9, 0.1], &[0.8, 0.2], &[0.3, 0.7]]);
        assert_eq!(same_class_set(&s, 0).unwrap(), vec![1]);
        assert_eq!(same_class_set(&s, 2).unwrap(), Vec::<usize>::new());
        let s = scores(&[&[0.6, 0.4], &[0.7, 0.3], &[0.9, 0.1], &[0.5, 0.5]]);
        // row 3 ties, lowest class index wins
        assert_eq!(same_class_set(&s, 2).unwrap(), vec![0, 1, 3]);
    }

    #[test]
    fn init_shapes_and_norms() {
        let m = EcanModel::init(ModelSpec::new(4, vec![8], 3, 3), 1).unwrap();
        let b = Banks::init(&m, &corpus(5, 4)).unwrap();
        assert_eq!(b.features.as_tensor().shape(), &[5, 3]);
        for i in 0..5 {
            let norm: f64 = b.features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn init_with_zero_classifier_is_uniform() {
        let mut m = EcanModel::init(ModelSpec::new(4, vec![8], 3, 3), 1).unwrap();
        m.classifier_mut().weight.data_mut().fill(0.0);
        let b = Banks::init(&m, &corpus(5, 4)).unwrap();
        assert!(b.scores.as_tensor().data().iter().all(|&p| p == 1.0 / 3.0));
    }

    #[test]
    fn init_matches_per_sample_forward() {
        let m = EcanModel::init(ModelSpec::new(4, vec![8], 3, 3), 2).unwrap();
        let c = corpus(6, 4);
        let b = Banks::init(&m, &c).unwrap();
        for i in 0..6 {
            let (f, p) = m.forward(&c.gather(&[i]).unwrap()).unwrap();
            let norm = f.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let expect: Vec<f64> = f.data().iter().map(|v| v / norm).collect();
            assert_eq!(b.features.row(i), expect.as_slice());
            assert_eq!(b.scores.row(i), p.data());
        }
    }

    #[test]
    fn update_touches_only_batch_rows() {
        let m = EcanModel::init(ModelSpec::new(4, vec![8], 3, 3), 1).unwrap();
        let mut b = Banks::init(&m, &corpus(5, 4)).unwrap();
        let before = b.clone();
        let feats = Tensor::matrix(2, 3, vec![3.0, 4.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let probs = Tensor::matrix(2, 3, vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0]).unwrap();
        b.update(&[1, 3], &feats, &probs).unwrap();
        for i in [0, 2, 4] {
            assert_eq!(b.features.row(i), before.features.row(i));
            assert_eq!(b.scores.row(i), before.scores.row(i));
        }
        assert_eq!(b.features.row(1), &[0.6, 0.8, 0.0]);
        assert_eq!(b.features.row(3), &[0.0, 0.0, 1.0]);
        assert_eq!(b.scores.row(3), &[1.0, 0.0, 0.0]);

        let again = Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let p = Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        b.update(&[1], &again, &p).unwrap();
        assert_eq!(b.features.row(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn update_rejects_bad_index_atomically() {
        let m = EcanModel::init(ModelSpec::new(4, vec![8], 3, 3), 1).unwrap();
        let mut b = Banks::init(&m, &corpus(5, 4)).unwrap();
        let before = b.clone();
        let feats = Tensor::matrix(2, 3, vec![1.0; 6]).unwrap();
        let probs = Tensor::matrix(2, 3, vec![1.0 / 3.0; 6]).unwrap();
        assert!(matches!(b.update(&[0, 5], &feats, &probs), Err(EcanError::Index { index: 5, .. })));
        assert_eq!(b, before);
    }

    #[test]
    fn class_count_mismatch_rejected() {
        let m = EcanModel::init(ModelSpec::new(4, vec![8], 3, 3), 1).unwrap();
        let c = corpus(2, 4);
        let bad = Corpus::new("x", 2, 4, c.feature_values().to_vec(), None).unwrap();
        assert!(matches!(Banks::init(&m, &bad), Err(EcanError::Config(_))));
    }
}
