//! Dataset splitting, training loops, direct per-pair optimisation and
//! checkpointing.

pub mod dataset;

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{gaussian_smooth_field, DeformParams};
use crate::error::{ensure_dims, Error, Result};
use crate::evalstats::{median, pair_metrics, Binarize, EvalConfig};
use crate::field::{upsample_field, warp_bilinear, DisplacementField};
use crate::imagecore::{resize_bilinear, GrayImage};
use crate::losses::{total_loss_supervised, total_loss_unsupervised, LossConfig, LossValue};
use crate::network::checkpoint::Checkpoint;
use crate::network::{adam_step, backward, forward, init_params, predict, AdamState, NetParams, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::rng::{derive_seed, prng};

#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub id: String,
    /// Identifier of the original slice; augmented variants share it.
    pub source: String,
    pub fixed: GrayImage,
    pub moving: GrayImage,
    pub label: Option<GrayImage>,
    pub truth_field: Option<DisplacementField>,
}

impl PairRecord {
    pub fn validate(&self) -> Result<()> {
        ensure_dims("pair moving", self.fixed.dims(), self.moving.dims())?;
        if let Some(l) = &self.label {
            ensure_dims("pair label", self.fixed.dims(), l.dims())?;
        }
        if let Some(t) = &self.truth_field {
            ensure_dims("pair truth field", self.fixed.dims(), t.dims())?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Unsupervised,
    Supervised,
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub bins: usize,
    pub parzen_width: f64,
    /// `(train, val, test)` record counts.
    pub split: (usize, usize, usize),
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Unsupervised,
            epochs: 200,
            steps_per_epoch: 100,
            batch_size: 16,
            lr: 0.001,
            lambda: 1.0,
            bins: 32,
            parzen_width: 1.0,
            split: (360, 90, 115),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            bins: self.bins,
            parzen_width: self.parzen_width,
        }
    }

    /// Metric settings used for validation, matching the evaluation report.
    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            bins: self.bins,
            binarize: Binarize::Otsu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Param("steps_per_epoch and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Param(format!("lr must be > 0, got {}", self.lr)));
        }
        self.loss().validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice_median: f64,
    pub val_mi_median: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_dice_median,val_mi_median,seconds\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_loss, r.val_dice_median, r.val_mi_median, r.seconds
            ));
        }
        s
    }

    /// The CSV without the wall-clock column, which is the only
    /// run-dependent field.
    pub fn to_csv_without_timing(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_dice_median,val_mi_median\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_loss, r.val_dice_median, r.val_mi_median
            ));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }
}

const SPLIT_STREAM: u64 = 0x5350_4C49;
const INIT_STREAM: u64 = 0x494E_4954;

/// Grouped split: source groups are shuffled by seed and each group goes
/// whole into the first subset that still has room for it.
pub fn split_dataset(
    records: &[PairRecord],
    split: (usize, usize, usize),
    seed: u64,
) -> Result<(Vec<PairRecord>, Vec<PairRecord>, Vec<PairRecord>)> {
    let (a, b, c) = split;
    if a + b + c != records.len() {
        return Err(Error::Param(format!(
            "split {a}+{b}+{c} = {} does not match {} records",
            a + b + c,
            records.len()
        )));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        groups
            .entry(r.source.as_str())
            .or_insert_with(|| {
                order.push(r.source.as_str());
                Vec::new()
            })
            .push(i);
    }
    order.shuffle(&mut prng(derive_seed(seed, SPLIT_STREAM)));
    let caps = [a, b, c];
    let mut parts: [Vec<PairRecord>; 3] = Default::default();
    for src in order {
        let g = &groups[src];
        let slot = (0..3).find(|&k| parts[k].len() + g.len() <= caps[k]).ok_or_else(|| {
            Error::Param(format!(
                "split {a}/{b}/{c} cannot keep source group {src:?} ({} records) in one subset",
                g.len()
            ))
        })?;
        parts[slot].extend(g.iter().map(|&i| records[i].clone()));
    }
    let [tr, va, te] = parts;
    Ok((tr, va, te))
}

/// Parameters, optimiser state and log of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: NetParams<f32>,
    pub adam: AdamState<f32>,
    /// Training epochs completed.
    pub epoch: usize,
    pub log: TrainLog,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            adam: Some(self.adam.clone()),
            epoch: self.epoch as u64,
        }
    }
}

fn pair_loss(mode: Mode, pair: &PairRecord, phi: &DisplacementField, cfg: &LossConfig) -> Result<LossValue> {
    match mode {
        Mode::Supervised => {
            let label = pair
                .label
                .as_ref()
                .ok_or_else(|| Error::Data(format!("record {} has no label", pair.id)))?;
            total_loss_supervised(label, &pair.moving, phi, cfg)
        }
        _ => total_loss_unsupervised(&pair.fixed, &pair.moving, phi, cfg),
    }
}

/// Loss value and parameter gradient for one pair.
fn pair_step(
    mode: Mode,
    params: &NetParams<f32>,
    pair: &PairRecord,
    cfg: &LossConfig,
) -> Result<(f64, NetParams<f32>)> {
    let (phi, tape) = forward(params, &pair.fixed, &pair.moving)?;
    let loss = pair_loss(mode, pair, &phi, cfg)?;
    let grads = backward(params, tape, loss.grad_field.as_ref().unwrap())?;
    Ok((loss.value, grads))
}

struct Validation {
    loss: f64,
    dice: f64,
    mi: f64,
}

fn validate_epoch(mode: Mode, params: &NetParams<f32>, val: &[PairRecord], cfg: &TrainConfig) -> Result<Validation> {
    if val.is_empty() {
        return Ok(Validation {
            loss: f64::NAN,
            dice: f64::NAN,
            mi: f64::NAN,
        });
    }
    let (lc, ec) = (cfg.loss(), cfg.eval());
    let rows = val
        .par_iter()
        .map(|pair| {
            let phi = predict(params, &pair.fixed, &pair.moving)?;
            let loss = pair_loss(mode, pair, &phi, &lc)?.value;
            let m = pair_metrics(&pair.fixed, &warp_bilinear(&pair.moving, &phi)?, &ec)?;
            Ok((loss, m.dice, m.mi))
        })
        .collect::<Result<Vec<_>>>()?;
    let losses: Vec<f64> = rows.iter().map(|r| r.0).collect();
    Ok(Validation {
        loss: losses.iter().sum::<f64>() / losses.len() as f64,
        dice: median(&rows.iter().map(|r| r.1).collect::<Vec<_>>()),
        mi: median(&rows.iter().map(|r| r.2).collect::<Vec<_>>()),
    })
}

fn mean_train_loss(mode: Mode, params: &NetParams<f32>, train: &[PairRecord], cfg: &LossConfig) -> Result<f64> {
    let losses = train
        .par_iter()
        .map(|pair| {
            let phi = predict(params, &pair.fixed, &pair.moving)?;
            Ok(pair_loss(mode, pair, &phi, cfg)?.value)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// The training loop shared by both modes. A fresh run starts with an
/// epoch-0 row for the untrained network; `resume` continues a saved run.
/// Epoch `e` draws its batches from `derive_seed(cfg.seed, e)`.
pub fn train(
    train: &[PairRecord],
    val: &[PairRecord],
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mode = cfg.mode;
    if mode == Mode::Direct {
        return Err(Error::Param("direct mode has no network to train; use register_direct".into()));
    }
    if train.is_empty() {
        return Err(Error::Param("training set is empty".into()));
    }
    for r in train.iter().chain(val) {
        r.validate()?;
        if mode == Mode::Supervised && r.label.is_none() {
            return Err(Error::Data(format!("record {} has no label", r.id)));
        }
    }
    let lc = cfg.loss();
    let mut log = TrainLog::default();
    let (mut params, mut adam, start) = match resume {
        Some(ck) => {
            let adam = ck
                .adam
                .clone()
                .ok_or_else(|| Error::Data("checkpoint has no optimizer state to resume from".into()))?;
            (ck.params.clone(), adam, ck.epoch as usize)
        }
        None => {
            let t0 = Instant::now();
            let params = init_params(derive_seed(cfg.seed, INIT_STREAM));
            let v = validate_epoch(mode, &params, val, cfg)?;
            log.records.push(EpochRecord {
                epoch: 0,
                train_loss: mean_train_loss(mode, &params, train, &lc)?,
                val_loss: v.loss,
                val_dice_median: v.dice,
                val_mi_median: v.mi,
                seconds: t0.elapsed().as_secs_f64(),
            });
            (params, AdamState::new(), 0)
        }
    };
    let batch = cfg.batch_size.min(train.len());
    for epoch in start + 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut rng = prng(derive_seed(cfg.seed, epoch as u64));
        let mut loss_sum = 0.0;
        for step in 0..cfg.steps_per_epoch {
            let picks = index::sample(&mut rng, train.len(), batch).into_vec();
            let results = picks
                .par_iter()
                .map(|&i| pair_step(mode, &params, &train[i], &lc))
                .collect::<Vec<_>>();
            let mut grads = NetParams::zeros();
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r.map_err(|e| match e {
                    Error::Param(m) if m.contains("finite") => Error::NonFinite { epoch, step },
                    other => other,
                })?;
                loss += l;
                grads.accumulate(&g);
            }
            loss /= batch as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite { epoch, step });
            }
            grads.scale(1.0 / batch as f32);
            adam_step(&mut params, &grads, &mut adam, cfg.lr)?;
            if !params.is_finite() {
                return Err(Error::NonFinite { epoch, step });
            }
            loss_sum += loss;
        }
        let v = validate_epoch(mode, &params, val, cfg)?;
        log.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / cfg.steps_per_epoch as f64,
            val_loss: v.loss,
            val_dice_median: v.dice,
            val_mi_median: v.mi,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome {
        params,
        adam,
        epoch: cfg.epochs.max(start),
        log,
    })
}

fn train_mode(train_set: &[PairRecord], val: &[PairRecord], cfg: &TrainConfig, mode: Mode) -> Result<(NetParams<f32>, TrainLog)> {
    if cfg.mode != mode {
        return Err(Error::Param(format!("config mode is {:?}, expected {mode:?}", cfg.mode)));
    }
    let out = train(train_set, val, cfg, None)?;
    Ok((out.params, out.log))
}

/// Trains against `-MI(F, M∘φ) + λ·smooth(φ)`.
pub fn train_unsupervised(train_set: &[PairRecord], val: &[PairRecord], cfg: &TrainConfig) -> Result<(NetParams<f32>, TrainLog)> {
    train_mode(train_set, val, cfg, Mode::Unsupervised)
}

/// Trains against `MSE(γ, M∘φ) + λ·smooth(φ)`; every record needs a label.
pub fn train_supervised(train_set: &[PairRecord], val: &[PairRecord], cfg: &TrainConfig) -> Result<(NetParams<f32>, TrainLog)> {
    train_mode(train_set, val, cfg, Mode::Supervised)
}

/// One forward pass; the caller warps `M` with the result.
pub fn register_with_model(params: &NetParams<f32>, fixed: &GrayImage, moving: &GrayImage) -> Result<DisplacementField> {
    predict(params, fixed, moving)
}

pub fn save_checkpoint(
    params: &NetParams<f32>,
    state: Option<(&AdamState<f32>, usize)>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let ck = Checkpoint {
        params: params.clone(),
        adam: state.map(|(a, _)| a.clone()),
        epoch: state.map_or(0, |(_, e)| e as u64),
    };
    ck.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectConfig {
    /// `(downsampling factor, iterations)` from coarse to fine.
    pub schedule: Vec<(usize, usize)>,
    /// Adam step size, in pixels.
    pub lr: f64,
    /// A stage ends early once `patience` iterations improve the best loss
    /// by less than `tol` relative.
    pub tol: f64,
    pub patience: usize,
    /// Gaussian width, in pixels of the current stage, applied to the
    /// gradient before each step. Zero disables it.
    #[serde(default)]
    pub grad_sigma: f64,
    pub loss: LossConfig,
}

impl Default for DirectConfig {
    fn default() -> Self {
        Self {
            schedule: vec![(4, 200), (2, 100), (1, 50)],
            lr: 0.02,
            tol: 1e-4,
            patience: 5,
            grad_sigma: 2.0,
            loss: LossConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectIteration {
    pub stage: usize,
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectResult {
    pub field: DisplacementField,
    /// Loss of `field` at full resolution.
    pub final_loss: f64,
    /// Loss of the zero field at full resolution.
    pub initial_loss: f64,
    pub log: Vec<DirectIteration>,
}

fn downsampled(img: &GrayImage, factor: usize) -> Result<GrayImage> {
    if factor <= 1 {
        return Ok(img.clone());
    }
    let (w, h) = img.dims();
    resize_bilinear(img, (w / factor).max(2).min(w), (h / factor).max(2).min(h))
}

/// Optimises φ directly with Adam on `total_loss_unsupervised`, coarse to
/// fine. Each stage starts from the previous stage's best field, upsampled.
/// The returned field is the best full-resolution iterate, or zero if none
/// beats it.
fn smooth_gradient(g: DisplacementField, sigma: f64) -> Result<DisplacementField> {
    if sigma <= 0.0 {
        return Ok(g);
    }
    let size = 2 * (3.0 * sigma).ceil() as usize + 1;
    gaussian_smooth_field(&g, &DeformParams { sigma, alpha: 1.0, filter_size: size, seed: 0 })
}

pub fn register_direct(fixed: &GrayImage, moving: &GrayImage, cfg: &DirectConfig) -> Result<DirectResult> {
    ensure_dims("register_direct", fixed.dims(), moving.dims())?;
    cfg.loss.validate()?;
    if cfg.schedule.is_empty() || !(cfg.lr > 0.0) {
        return Err(Error::Param("direct registration needs a schedule and lr > 0".into()));
    }
    let (w, h) = fixed.dims();
    let zero = DisplacementField::constant(w, h, 0.0, 0.0)?;
    let initial_loss = total_loss_unsupervised(fixed, moving, &zero, &cfg.loss)?.value;
    let mut log = Vec::new();
    let mut carry: Option<DisplacementField> = None;
    for (stage, &(factor, iters)) in cfg.schedule.iter().enumerate() {
        let f = downsampled(fixed, factor)?;
        let m = downsampled(moving, factor)?;
        let (sw, sh) = f.dims();
        let mut phi = match &carry {
            Some(c) => upsample_field(c, sw, sh)?,
            None => DisplacementField::constant(sw, sh, 0.0, 0.0)?,
        };
        let n = phi.len();
        let (mut m1, mut v1) = (vec![0.0; 2 * n], vec![0.0; 2 * n]);
        let mut best = (f64::INFINITY, phi.clone());
        let mut best_trace: Vec<f64> = Vec::with_capacity(iters + 1);
        for it in 0..=iters {
            let lv = total_loss_unsupervised(&f, &m, &phi, &cfg.loss)?;
            if !lv.value.is_finite() {
                return Err(Error::NonFinite { epoch: stage, step: it });
            }
            log.push(DirectIteration {
                stage,
                iteration: it,
                loss: lv.value,
            });
            if lv.value < best.0 {
                best = (lv.value, phi.clone());
            }
            best_trace.push(best.0);
            if it == iters {
                break;
            }
            if it >= cfg.patience {
                let before = best_trace[it - cfg.patience];
                if before - best.0 < cfg.tol * best.0.abs().max(1e-12) {
                    break;
                }
            }
            let g = smooth_gradient(lv.grad_field.unwrap(), cfg.grad_sigma)?;
            let t = (it + 1) as i32;
            let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
            let vals = phi.dx.iter_mut().chain(phi.dy.iter_mut());
            let grads = g.dx.iter().chain(&g.dy);
            for (((p, &gi), mi), vi) in vals.zip(grads).zip(m1.iter_mut()).zip(v1.iter_mut()) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                *p -= cfg.lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            }
        }
        carry = Some(best.1);
    }
    let mut field = upsample_field(&carry.unwrap(), w, h)?;
    let mut final_loss = total_loss_unsupervised(fixed, moving, &field, &cfg.loss)?.value;
    if final_loss > initial_loss {
        field = zero;
        final_loss = initial_loss;
    }
    Ok(DirectResult {
        field,
        final_loss,
        initial_loss,
        log,
    })
}
