//! Objective, optimizer and the epoch loop.

mod gradcheck;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::split_train_val;
use crate::error::{Error, Result};
use crate::evaluation::{auprc, auroc, RankedPredictions};
use crate::hypergraph::{batch, PatientHypergraph, META_WIDTH};
use crate::model::{apply_variant, backward, forward, Gradients, Mode, ModelDims, ModelParams};

pub use gradcheck::{
    analytic_gradients, grad_check, grad_check_with, random_graph, relative_error, GradCheckConfig,
    GradCheckReport, TensorCheck,
};

pub const PROB_CLAMP: f64 = 1e-7;

/// Sub-seeds are `seed + offset` for a fixed offset per role.
pub mod seeds {
    pub const SPLIT: u64 = 0;
    pub const INIT: u64 = 0x9E37_79B9_7F4A_7C15;
    pub const SHUFFLE: u64 = 0x3C6E_F372_FE94_F82A;
    pub const DROPOUT: u64 = 0xDAA6_6D2C_7DDF_743F;
    pub const EMBEDDINGS: u64 = 0x78DD_E6E5_FD29_F054;

    pub fn derive(seed: u64, role: u64) -> u64 {
        seed.wrapping_add(role)
    }
}

/// Binary cross-entropy with the probability clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(y_hat: f64, y: u8) -> f64 {
    let p = y_hat.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Derivative of [`bce_loss`] with respect to the logit. Zero where the
/// clamp is active, matching the clamped loss exactly.
pub fn bce_logit_gradient(y_hat: f64, y: u8) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&y_hat) {
        return 0.0;
    }
    y_hat - f64::from(y)
}

/// Mean loss over the batch and per-graph logit gradients of that mean.
pub fn batch_loss(probabilities: &[f64], labels: &[u8]) -> (f64, Vec<f64>) {
    let n = probabilities.len().max(1) as f64;
    let loss = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| bce_loss(p, y))
        .sum::<f64>()
        / n;
    let grads = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| bce_logit_gradient(p, y) / n)
        .collect();
    (loss, grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub dropout: f64,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: String,
    pub val_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            dropout: 0.3,
            hidden_dim: 64,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            variant: "full".into(),
            val_fraction: 0.2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden_dim == 0 {
            return bad("epochs, batch_size and hidden_dim must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return bad("adam betas must be in [0, 1) and epsilon > 0".into());
        }
        apply_variant(&self.variant)?;
        Ok(())
    }
}

/// Adam moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.as_slice().len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    let grad_tensors = grads.tensors();
    let mut param_tensors = params.tensors_mut();
    if grad_tensors.len() != param_tensors.len() || state.m.len() != param_tensors.len() {
        return Err(Error::Shape(
            "gradients/optimizer state do not match parameters".into(),
        ));
    }
    for ((p, g), m) in param_tensors.iter().zip(&grad_tensors).zip(&state.m) {
        if p.shape() != g.shape() || m.len() != p.as_slice().len() {
            return Err(Error::Shape("gradient tensor shape mismatch".into()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (i, p) in param_tensors.iter_mut().enumerate() {
        let g = grad_tensors[i].as_slice();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, theta) in p.as_mut_slice().iter_mut().enumerate() {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *theta -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub val_auprc: Option<f64>,
    pub val_auroc: Option<f64>,
    pub seconds: f64,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,loss,val_auprc,val_auroc,seconds";

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

impl EpochReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.epoch,
            self.loss,
            fmt_metric(self.val_auprc),
            fmt_metric(self.val_auroc),
            self.seconds
        )
    }
}

pub fn write_epoch_csv(path: &Path, reports: &[EpochReport]) -> Result<()> {
    let mut out = String::from(EPOCH_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Model dimensions implied by a set of graphs built with one context.
pub fn dims_for(graphs: &[PatientHypergraph], hidden: usize) -> Result<ModelDims> {
    let first = graphs.first().ok_or(Error::EmptyCorpus)?;
    Ok(ModelDims {
        d_word: first.d_in() - META_WIDTH,
        hidden,
        max_notes: first.scale.max_note_index + 1,
        max_taxonomies: first.scale.max_taxonomy_index + 1,
    })
}

/// Eval-mode probabilities, in input order.
pub fn predict(
    params: &ModelParams,
    graphs: &[PatientHypergraph],
    batch_size: usize,
) -> Result<RankedPredictions> {
    let mut preds = RankedPredictions::default();
    for chunk in graphs.chunks(batch_size.max(1)) {
        let refs: Vec<&PatientHypergraph> = chunk.iter().collect();
        let b = batch(&refs)?;
        let trace = forward(&b, params, Mode::Eval)?;
        preds.scores.extend(trace.probabilities);
        preds.labels.extend(b.labels);
        preds.patient_ids.extend(b.patient_ids);
    }
    Ok(preds)
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub reports: Vec<EpochReport>,
}

fn check_both_classes(graphs: &[PatientHypergraph]) -> Result<()> {
    let pos = graphs.iter().filter(|g| g.label == 1).count();
    if pos == 0 || pos == graphs.len() {
        return Err(Error::InvalidArgument(format!(
            "training split must contain both classes ({pos} positives of {})",
            graphs.len()
        )));
    }
    Ok(())
}

/// Splits off a seeded validation set, then trains.
pub fn fit(graphs: &[PatientHypergraph], config: &TrainConfig) -> Result<FitResult> {
    let (train, val) = split_train_val(
        graphs,
        config.val_fraction,
        seeds::derive(config.seed, seeds::SPLIT),
    )?;
    fit_split(&train, &val, config)
}

/// Trains on `train`, reporting eval-mode metrics on `val` after every
/// epoch. Validation never gates training.
pub fn fit_split(
    train: &[PatientHypergraph],
    val: &[PatientHypergraph],
    config: &TrainConfig,
) -> Result<FitResult> {
    config.validate()?;
    check_both_classes(train)?;
    let dims = dims_for(train, config.hidden_dim)?;
    let variant = apply_variant(&config.variant)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.seed, seeds::INIT));
    let mut params = ModelParams::init(dims, variant, config.dropout, &mut init_rng)?;
    let mut state = OptimizerState::new(&params);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.seed, seeds::SHUFFLE));
    let dropout_base = seeds::derive(config.seed, seeds::DROPOUT);
    let mut reports = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&PatientHypergraph> = idx.iter().map(|&i| &train[i]).collect();
            let b = batch(&refs)?;
            let seed = dropout_base ^ ((epoch as u64) << 32 | bi as u64);
            let trace = forward(&b, &params, Mode::Train { seed })?;
            let (loss, dlogits) = batch_loss(&trace.probabilities, &b.labels);
            loss_sum += loss * refs.len() as f64;
            let grads = backward(&trace, &b, &params, &dlogits)?;
            adam_step(&mut params, &grads, &mut state, config)?;
        }
        let (val_auprc, val_auroc) = if val.is_empty() {
            (None, None)
        } else {
            let preds = predict(&params, val, config.batch_size)?;
            (auprc(&preds).ok(), auroc(&preds).ok())
        };
        reports.push(EpochReport {
            epoch,
            loss: loss_sum / train.len() as f64,
            val_auprc,
            val_auroc,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(FitResult { params, reports })
}
