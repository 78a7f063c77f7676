//! Source pre-training and source-free adaptation.
//!
//! Adaptation processes each mini-batch in a fixed order: forward the batch,
//! write its features and scores into the banks, compute the neighbour and
//! pseudo-label contrastive terms against the refreshed banks, add the
//! diversity term, then take one momentum-SGD step.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::banks::{Banks, FeatureBank, ScoreBank};
use crate::data::Corpus;
use crate::error::{EcanError, Result};
use crate::grad::{Tape, Tensor, Var};
use crate::losses::{ce_label_smoothing, div_loss, ncl_loss, scl_loss, total_loss, HyperParams, LossBreakdown};
use crate::model::{EcanModel, ModelSpec};

const PRETRAIN_STREAM: u64 = 1 << 32;
const ADAPT_STREAM: u64 = 2 << 32;

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
    pub lr: f64,
    pub momentum: f64,
}

impl SgdState {
    pub fn new(params: &[&Tensor], lr: f64, momentum: f64) -> Self {
        SgdState {
            velocity: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            lr,
            momentum,
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// `v = momentum * v + g; p = p - lr * v`, then clears every gradient.
/// A parameter without a gradient buffer is treated as having zero gradient.
pub fn sgd_step(params: &mut [&mut Tensor], state: &mut SgdState) -> Result<()> {
    if params.len() != state.velocity.len() {
        return Err(EcanError::Dimension(format!(
            "{} parameters for {} velocity buffers",
            params.len(),
            state.velocity.len()
        )));
    }
    for (p, v) in params.iter_mut().zip(&mut state.velocity) {
        if p.len() != v.len() {
            return Err(EcanError::Dimension(format!(
                "parameter of length {} against velocity of length {}",
                p.len(),
                v.len()
            )));
        }
        let g = p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; v.len()]);
        for ((x, vel), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *vel = state.momentum * *vel + g;
            *x -= state.lr * *vel;
        }
        p.zero_grad();
    }
    Ok(())
}

/// Switches that drop individual adaptation terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub disable_ncl: bool,
    pub disable_scl: bool,
    pub disable_div: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        disable_ncl: false,
        disable_scl: false,
        disable_div: false,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ncl: f64,
    pub scl: f64,
    pub div: f64,
    pub total: f64,
    pub uar: Option<f64>,
    #[serde(skip)]
    pub lambda: f64,
    #[serde(skip)]
    pub beta: f64,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl EpochRecord {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            ncl: self.ncl,
            scl: self.scl,
            div: self.div,
            total: self.total,
            lambda: self.lambda,
            beta: self.beta,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    /// One JSON object per line: `{epoch, ncl, scl, div, total, uar}`.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

/// Deterministic permutation of `0..n` for one epoch of one phase.
fn epoch_order(n: usize, seed: u64, stream: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn batches(order: Vec<usize>, batch_size: usize) -> Vec<Vec<usize>> {
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Copies gradients of the registered parameters off the tape, then steps.
fn apply_gradients(
    model: &mut EcanModel,
    tape: &Tape,
    params: &[Var],
    state: &mut SgdState,
) -> Result<()> {
    let mut tensors = model.parameters_mut();
    for (t, v) in tensors.iter_mut().zip(params) {
        if let Some(g) = tape.grad(*v) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(EcanError::Numeric("non-finite gradient".into()));
            }
            t.accumulate_grad(g)?;
        }
    }
    sgd_step(&mut tensors, state)
}

/// Trains a freshly initialised model on the labeled source corpus with
/// label-smoothed cross-entropy and momentum SGD.
pub fn pretrain(source: &Corpus, spec: ModelSpec, hp: &HyperParams) -> Result<EcanModel> {
    hp.validate()?;
    let labels = source
        .labels()
        .ok_or_else(|| EcanError::Data("pre-training needs a labeled source corpus".into()))?;
    if spec.input_dim != source.dim() {
        return Err(EcanError::Dimension(format!(
            "model input_dim {} against source width {}",
            spec.input_dim,
            source.dim()
        )));
    }
    if spec.class_count != source.class_count() {
        return Err(EcanError::Config(format!(
            "model has {} classes, source corpus {}",
            spec.class_count,
            source.class_count()
        )));
    }
    let mut model = EcanModel::init(spec, hp.seed)?;
    let mut sgd = SgdState::new(&model.parameters(), hp.lr_pretrain, hp.momentum);
    for epoch in 0..hp.pretrain_epochs {
        let order = epoch_order(source.len(), hp.seed, PRETRAIN_STREAM, epoch);
        for batch in batches(order, hp.batch_size) {
            let mut tape = Tape::new();
            let params = model.register(&mut tape);
            let x = tape.constant(source.gather(&batch)?);
            let out = model.forward_on(&mut tape, &params, x)?;
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let loss = ce_label_smoothing(&mut tape, out.probs, &batch_labels, hp.label_smoothing)?;
            if !tape.value(loss).all_finite() {
                return Err(EcanError::Numeric(format!("non-finite pre-training loss in epoch {epoch}")));
            }
            tape.backward(loss)?;
            apply_gradients(&mut model, &tape, params.vars(), &mut sgd)?;
        }
    }
    Ok(model)
}

/// What one adaptation batch produced, captured before the SGD step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub indices: Vec<usize>,
    pub loss: LossBreakdown,
    /// Raw batch features from the forward pass.
    pub features: Tensor,
    pub probs: Tensor,
}

/// Adaptation state: model, banks and optimiser for one target corpus.
///
/// Only the target's feature values are kept; labels are dropped on entry.
pub struct Adaptation {
    model: EcanModel,
    target: Corpus,
    banks: Banks,
    sgd: SgdState,
    hp: HyperParams,
    ablation: Ablation,
    epochs_done: usize,
}

impl Adaptation {
    pub fn new(model: EcanModel, target: &Corpus, hp: &HyperParams, ablation: Ablation) -> Result<Self> {
        hp.validate()?;
        if target.class_count() != model.class_count() {
            return Err(EcanError::Config(format!(
                "target has {} classes, model has {}",
                target.class_count(),
                model.class_count()
            )));
        }
        if target.dim() != model.input_dim() {
            return Err(EcanError::Dimension(format!(
                "target width {} against model input_dim {}",
                target.dim(),
                model.input_dim()
            )));
        }
        let needs_contrast = !(ablation.disable_ncl && ablation.disable_scl);
        if needs_contrast && target.len() < 2 {
            return Err(EcanError::Config("contrastive adaptation needs at least 2 target samples".into()));
        }
        if !ablation.disable_ncl && hp.k >= target.len() {
            return Err(EcanError::Config(format!(
                "k = {} needs more than {} target samples",
                hp.k,
                target.len()
            )));
        }
        let target = target.without_labels();
        let banks = Banks::init(&model, &target)?;
        let sgd = SgdState::new(&model.parameters(), hp.lr_adapt, hp.momentum);
        Ok(Adaptation {
            model,
            target,
            banks,
            sgd,
            hp: hp.clone(),
            ablation,
            epochs_done: 0,
        })
    }

    pub fn model(&self) -> &EcanModel {
        &self.model
    }

    pub fn banks(&self) -> &Banks {
        &self.banks
    }

    pub fn into_model(self) -> EcanModel {
        self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// Effective weights after ablation: `(lambda, beta, div_weight)`.
    fn weights(&self) -> (f64, f64, f64) {
        let a = self.ablation;
        (
            if a.disable_ncl { 0.0 } else { self.hp.lambda },
            if a.disable_scl { 0.0 } else { self.hp.beta },
            if a.disable_div { 0.0 } else { 1.0 },
        )
    }

    /// Mini-batches of target indices for the given epoch.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let order = epoch_order(self.target.len(), self.hp.seed, ADAPT_STREAM, epoch);
        batches(order, self.hp.batch_size)
    }

    /// One adaptation step on the given target indices.
    pub fn step(&mut self, indices: &[usize]) -> Result<StepOutcome> {
        let mut tape = Tape::new();
        let params = self.model.register(&mut tape);
        let x = tape.constant(self.target.gather(indices)?);
        let out = self.model.forward_on(&mut tape, &params, x)?;
        let features = tape.value(out.features).clone();
        let probs = tape.value(out.probs).clone();

        self.banks.update(indices, &features, &probs)?;

        let (lambda, beta, div_weight) = self.weights();
        let mut terms: Vec<(Var, f64)> = Vec::new();
        let mut ncl = 0.0;
        if lambda > 0.0 {
            let v = ncl_loss(&mut tape, out.features, indices, &self.banks.features, self.hp.tau, self.hp.k)?;
            ncl = tape.value(v).item()?;
            terms.push((v, lambda));
        }
        let mut scl = 0.0;
        if beta > 0.0 {
            let v = scl_loss(
                &mut tape,
                out.features,
                indices,
                &self.banks.features,
                &self.banks.scores,
                self.hp.tau,
            )?;
            scl = tape.value(v).item()?;
            terms.push((v, beta));
        }
        let mut div = 0.0;
        if div_weight > 0.0 {
            let v = div_loss(&mut tape, out.probs)?;
            div = tape.value(v).item()?;
            terms.push((v, 1.0));
        }
        let loss = total_loss(ncl, scl, div, lambda, beta)?;
        if ![loss.ncl, loss.scl, loss.div, loss.total].iter().all(|v| v.is_finite()) {
            return Err(EcanError::Numeric(format!("non-finite adaptation loss {loss:?}")));
        }

        let mut total: Option<Var> = None;
        for (v, w) in terms {
            let scaled = if w == 1.0 { v } else { tape.scale(v, w)? };
            total = Some(match total {
                Some(t) => tape.add(t, scaled)?,
                None => scaled,
            });
        }
        if let Some(total) = total {
            tape.backward(total)?;
        }
        apply_gradients(&mut self.model, &tape, params.vars(), &mut self.sgd)?;

        Ok(StepOutcome {
            indices: indices.to_vec(),
            loss,
            features,
            probs,
        })
    }

    /// Runs every batch of the next epoch, then records the losses of the
    /// resulting model over the whole target. `uar` is left empty.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let start = Instant::now();
        let epoch = self.epochs_done;
        for batch in self.epoch_batches(epoch) {
            self.step(&batch)?;
        }
        self.epochs_done += 1;
        let loss = self.dataset_losses()?;
        Ok(EpochRecord {
            epoch: self.epochs_done,
            ncl: loss.ncl,
            scl: loss.scl,
            div: loss.div,
            total: loss.total,
            uar: None,
            lambda: loss.lambda,
            beta: loss.beta,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        })
    }

    /// Every loss term over the full target for the current model: every
    /// sample is an anchor, the banks come from one fresh forward pass and the
    /// diversity term uses the mean prediction of the whole corpus. The
    /// training banks are not touched.
    pub fn dataset_losses(&self) -> Result<LossBreakdown> {
        let (features, probs) = self.model.forward(&self.target.features())?;
        let banks = Banks {
            features: FeatureBank::from_raw(&features)?,
            scores: ScoreBank::from_probs(&probs)?,
        };
        let all: Vec<usize> = (0..self.target.len()).collect();
        let (lambda, beta, div_weight) = self.weights();
        let mut tape = Tape::new();
        let f = tape.constant(features);
        let p = tape.constant(probs);
        let mut ncl = 0.0;
        if lambda > 0.0 {
            let v = ncl_loss(&mut tape, f, &all, &banks.features, self.hp.tau, self.hp.k)?;
            ncl = tape.value(v).item()?;
        }
        let mut scl = 0.0;
        if beta > 0.0 {
            let v = scl_loss(&mut tape, f, &all, &banks.features, &banks.scores, self.hp.tau)?;
            scl = tape.value(v).item()?;
        }
        let mut div = 0.0;
        if div_weight > 0.0 {
            let v = div_loss(&mut tape, p)?;
            div = tape.value(v).item()?;
        }
        let loss = total_loss(ncl, scl, div, lambda, beta)?;
        if !loss.total.is_finite() {
            return Err(EcanError::Numeric(format!("non-finite adaptation loss {loss:?}")));
        }
        Ok(loss)
    }
}

/// Adapts `model` to the unlabeled `target` for `hp.epochs` epochs.
pub fn adapt(
    model: EcanModel,
    target: &Corpus,
    hp: &HyperParams,
    ablation: Ablation,
) -> Result<(EcanModel, RunLog)> {
    adapt_observed(model, target, hp, ablation, &mut |_| Ok(None))
}

/// Like [`adapt`], calling `observer` with the model after every epoch. Its
/// return value is recorded as that epoch's UAR.
pub fn adapt_observed(
    model: EcanModel,
    target: &Corpus,
    hp: &HyperParams,
    ablation: Ablation,
    observer: &mut dyn FnMut(&EcanModel) -> Result<Option<f64>>,
) -> Result<(EcanModel, RunLog)> {
    let mut run = Adaptation::new(model, target, hp, ablation)?;
    let mut log = RunLog::default();
    for _ in 0..hp.epochs {
        let mut record = run.run_epoch()?;
        record.uar = observer(run.model())?;
        log.records.push(record);
    }
    Ok((run.into_model(), log))
}
