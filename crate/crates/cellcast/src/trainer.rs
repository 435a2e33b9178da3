//! Sliding-window sample construction, z-score normalization fitted on
//! the training split only, per-cluster training loops, and the
//! clustered / unclustered experiment runner.
//!
//! The 30-day protocol: days 1-20 train, days 21-30 evaluate. The last 2
//! training days are held out as the validation set that drives early
//! stopping, so evaluation data never influences training.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::mape;
use crate::ingest::HourlyCellSeries;
use crate::model::{
    build, build_baseline_lstm, build_baseline_mlp, ModelGraph, MultiTcnLstmConfig, Variant,
};
use crate::nn::{clip_global_norm, mse_grad, AdamState, Differentiable, NdArray};

pub const TRAIN_DAYS: i64 = 20;
pub const VALIDATION_DAYS: i64 = 2;
pub const EVAL_DAYS: i64 = 10;
pub const GRAD_CLIP_NORM: f64 = 5.0;

/// One supervised window drawn from a single split; values are raw
/// (unnormalized) traffic.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cell_id: u32,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    /// Absolute hour index of the first target value.
    pub t0: i64,
}

/// Z-score statistics for one normalization scope, fitted on training
/// hours only.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub scope: String,
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Population mean / std over every in-scope cell's values inside the
/// split. Constant scopes get the 1e-8 std floor.
pub fn fit_norm<'a>(
    cells: impl IntoIterator<Item = &'a HourlyCellSeries>,
    split: Range<i64>,
    scope: impl Into<String>,
) -> Result<NormStats> {
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut values: Vec<f64> = Vec::new();
    for series in cells {
        let slice = series.slice(split.clone())?;
        sum += slice.values.iter().sum::<f64>();
        count += slice.values.len();
        values.extend_from_slice(&slice.values);
    }
    if count == 0 {
        return Err(Error::Data("normalization scope has no values".into()));
    }
    let mean = sum / count as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    Ok(NormStats {
        scope: scope.into(),
        mean,
        std: var.sqrt().max(1e-8),
    })
}

/// All windows whose inputs and targets lie fully inside `split`; one
/// sample per start offset. Returns an empty list (with a warning) when
/// the split is shorter than window + horizon.
pub fn make_windows(
    series: &HourlyCellSeries,
    window: usize,
    horizon: usize,
    split: Range<i64>,
) -> Result<Vec<Sample>> {
    let slice = series.slice(split.clone())?;
    let len = slice.values.len();
    if len < window + horizon {
        log::warn!(
            "cell {}: split {}..{} too short for window {} + horizon {}; no samples",
            series.cell_id,
            split.start,
            split.end,
            window,
            horizon
        );
        return Ok(Vec::new());
    }
    let count = len - window - horizon + 1;
    let mut out = Vec::with_capacity(count);
    for offset in 0..count {
        out.push(Sample {
            cell_id: series.cell_id,
            input: slice.values[offset..offset + window].to_vec(),
            target: slice.values[offset + window..offset + window + horizon].to_vec(),
            t0: split.start + (offset + window) as i64,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            patience: 10,
            seed: 0,
        }
    }
}

/// Record of one model's training: per-epoch losses, validation MAPE and
/// the epoch whose weights were kept.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub variant: String,
    pub scope: String,
    pub train_loss: Vec<f64>,
    pub val_mape: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_mape: f64,
    pub seed: u64,
}

impl TrainRun {
    pub fn epochs_run(&self) -> usize {
        self.train_loss.len()
    }
}

fn window_array(values: &[f64], norm: &NormStats) -> NdArray {
    let data: Vec<f64> = values.iter().map(|v| norm.normalize(*v)).collect();
    NdArray::from_vec(&[values.len(), 1], data).expect("window shape")
}

fn target_array(values: &[f64], norm: &NormStats) -> NdArray {
    let data: Vec<f64> = values.iter().map(|v| norm.normalize(*v)).collect();
    NdArray::from_vec(&[values.len()], data).expect("target shape")
}

fn param_norms(model: &ModelGraph) -> String {
    model
        .params()
        .iter()
        .map(|p| {
            let norm: f64 = p.value.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            format!("{}={norm:.3e}", p.name)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Validation MAPE on denormalized one-window predictions.
fn validation_mape(
    model: &mut ModelGraph,
    samples: &[Sample],
    norm: &NormStats,
) -> Result<f64> {
    let mut actual = Vec::with_capacity(samples.len());
    let mut predicted = Vec::with_capacity(samples.len());
    for sample in samples {
        let out = model.forward(&window_array(&sample.input, norm))?;
        for (o, t) in out.data().iter().zip(&sample.target) {
            predicted.push(norm.denormalize(*o));
            actual.push(*t);
        }
    }
    let (percent, _skipped) = mape(&actual, &predicted)?;
    Ok(percent)
}

/// Minibatch MSE training on normalized values with shuffling, global
/// gradient clipping and Adam. Early-stops when validation MAPE has not
/// improved for `patience` consecutive epochs and restores the
/// best-validation weights.
pub fn train(
    model: &mut ModelGraph,
    train_samples: &[Sample],
    val_samples: &[Sample],
    norm: &NormStats,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    if train_samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    if val_samples.is_empty() {
        return Err(Error::Data("no validation samples".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Validation("batch_size and epochs must be >= 1".into()));
    }
    model.optimizer.lr = cfg.lr;
    // The optimizer is taken out for the duration of training so its
    // step can borrow the parameter list mutably.
    let mut optimizer = std::mem::replace(&mut model.optimizer, AdamState::new(cfg.lr));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_samples.len()).collect();

    let mut run = TrainRun {
        variant: model.variant().to_string(),
        scope: norm.scope.clone(),
        train_loss: Vec::new(),
        val_mape: Vec::new(),
        best_epoch: 0,
        best_val_mape: f64::INFINITY,
        seed: cfg.seed,
    };
    let mut best_weights: Option<Vec<NdArray>> = None;
    let mut epochs_since_improvement = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            model.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &idx in batch {
                let sample = &train_samples[idx];
                let input = window_array(&sample.input, norm);
                let target = target_array(&sample.target, norm);
                let out = model.forward(&input)?;
                let sample_loss = crate::nn::mse(&out, &target)?;
                batch_loss += sample_loss;
                let mut grad = mse_grad(&out, &target)?;
                for g in grad.data_mut() {
                    *g *= scale;
                }
                model.backward(&grad)?;
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} batch {batch_idx}; parameter norms: {}",
                    param_norms(model)
                )));
            }
            loss_sum += batch_loss * batch.len() as f64;
            let mut params = model.params_mut();
            clip_global_norm(&mut params, GRAD_CLIP_NORM);
            optimizer.step(&mut params)?;
        }

        let epoch_loss = loss_sum / train_samples.len() as f64;
        let val = validation_mape(model, val_samples, norm)?;
        run.train_loss.push(epoch_loss);
        run.val_mape.push(val);
        log::info!(
            "scope={} epoch={epoch} loss={epoch_loss:.6e} val_mape={val:.4}",
            norm.scope
        );

        if val < run.best_val_mape {
            run.best_val_mape = val;
            run.best_epoch = epoch;
            best_weights = Some(model.params().iter().map(|p| p.value.clone()).collect());
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
            if epochs_since_improvement >= cfg.patience {
                log::info!(
                    "scope={} early stop at epoch {epoch} (best epoch {})",
                    norm.scope,
                    run.best_epoch
                );
                break;
            }
        }
    }

    model.optimizer = optimizer;
    if let Some(weights) = best_weights {
        for (p, w) in model.params_mut().into_iter().zip(weights) {
            p.value = w;
        }
    }
    Ok(run)
}

/// Hour ranges of the 30-day protocol relative to the shared series span.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Range<i64>,
    pub validation: Range<i64>,
    pub eval: Range<i64>,
}

/// Derives the protocol splits from a shared, day-aligned span of at
/// least 30 days. Only the first 30 days are used.
pub fn dataset_splits(cells: &BTreeMap<u32, HourlyCellSeries>) -> Result<DatasetSplits> {
    let mut iter = cells.values();
    let Some(first) = iter.next() else {
        return Err(Error::Data("no cells in dataset".into()));
    };
    let (start, len) = (first.start_hour, first.values.len());
    for s in iter {
        if s.start_hour != start || s.values.len() != len {
            return Err(Error::Data(format!(
                "cell {}: span differs from the shared dataset span",
                s.cell_id
            )));
        }
    }
    if start.rem_euclid(24) != 0 {
        return Err(Error::Data(format!(
            "dataset starts at hour {start}, not a day boundary"
        )));
    }
    let need = (TRAIN_DAYS + EVAL_DAYS) * 24;
    if (len as i64) < need {
        return Err(Error::Data(format!(
            "dataset spans {len} hours; the protocol needs {need} (30 days)"
        )));
    }
    let train_end = start + (TRAIN_DAYS - VALIDATION_DAYS) * 24;
    let val_end = start + TRAIN_DAYS * 24;
    let eval_end = start + need;
    Ok(DatasetSplits {
        train: start..train_end,
        validation: train_end..val_end,
        eval: val_end..eval_end,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub model: MultiTcnLstmConfig,
    pub baseline_lstm_hidden: usize,
    pub mlp_widths: Vec<usize>,
    pub train: TrainConfig,
    /// Maximum concurrent per-cluster trainings.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            variant: Variant::MultiTcnLstm,
            model: MultiTcnLstmConfig::default(),
            baseline_lstm_hidden: crate::model::DEFAULT_BASELINE_LSTM_HIDDEN,
            mlp_widths: crate::model::DEFAULT_MLP_WIDTHS.to_vec(),
            train: TrainConfig::default(),
            jobs: 1,
        }
    }
}

/// A trained model with the normalization it was trained under.
pub struct TrainedModel {
    pub graph: ModelGraph,
    pub norm: NormStats,
    pub run: TrainRun,
}

fn build_variant(cfg: &ExperimentConfig, seed: u64) -> Result<ModelGraph> {
    match cfg.variant {
        Variant::MultiTcnLstm => build(&MultiTcnLstmConfig {
            seed,
            ..cfg.model.clone()
        }),
        Variant::Lstm => build_baseline_lstm(
            cfg.baseline_lstm_hidden,
            cfg.model.window,
            cfg.model.horizon,
            seed,
        ),
        Variant::Mlp => {
            build_baseline_mlp(&cfg.mlp_widths, cfg.model.window, cfg.model.horizon, seed)
        }
    }
}

/// Trains one model per cluster (or one global model without an
/// assignment) on the 30-day protocol. Returns models keyed by
/// "cluster<i>" or "all"; merging is deterministic regardless of the
/// `jobs` schedule because every training is independently seeded.
pub fn run_experiment(
    cells: &BTreeMap<u32, HourlyCellSeries>,
    assignment: Option<&BTreeMap<u32, usize>>,
    cfg: &ExperimentConfig,
) -> Result<BTreeMap<String, TrainedModel>> {
    let splits = dataset_splits(cells)?;

    // Scope id -> member cells, in deterministic order.
    let mut scopes: BTreeMap<String, Vec<&HourlyCellSeries>> = BTreeMap::new();
    match assignment {
        Some(map) => {
            for (cell_id, series) in cells {
                let cluster = map.get(cell_id).ok_or_else(|| {
                    Error::Data(format!("cell {cell_id} missing from the assignment"))
                })?;
                scopes
                    .entry(format!("cluster{cluster}"))
                    .or_default()
                    .push(series);
            }
        }
        None => {
            scopes.insert("all".into(), cells.values().collect());
        }
    }

    struct Job {
        scope: String,
        model: ModelGraph,
        norm: NormStats,
        train_samples: Vec<Sample>,
        val_samples: Vec<Sample>,
        cfg: TrainConfig,
    }

    let mut jobs = Vec::new();
    for (scope_idx, (scope, members)) in scopes.iter().enumerate() {
        let norm = fit_norm(members.iter().copied(), splits.train.clone(), scope.clone())?;
        let window = cfg.model.window;
        let horizon = cfg.model.horizon;
        let mut train_samples = Vec::new();
        let mut val_samples = Vec::new();
        for series in members {
            train_samples.extend(make_windows(series, window, horizon, splits.train.clone())?);
            val_samples.extend(make_windows(
                series,
                window,
                horizon,
                splits.validation.clone(),
            )?);
        }
        let seed = cfg.train.seed.wrapping_add(scope_idx as u64);
        let model = build_variant(cfg, cfg.model.seed.wrapping_add(scope_idx as u64))?;
        jobs.push(Job {
            scope: scope.clone(),
            model,
            norm,
            train_samples,
            val_samples,
            cfg: TrainConfig { seed, ..cfg.train.clone() },
        });
    }

    let parallelism = cfg.jobs.max(1);
    let mut results: BTreeMap<String, TrainedModel> = BTreeMap::new();
    while !jobs.is_empty() {
        let wave: Vec<Job> = jobs
            .drain(..parallelism.min(jobs.len()))
            .collect();
        let outcomes: Vec<Result<(String, TrainedModel)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .into_iter()
                .map(|mut job| {
                    scope.spawn(move || {
                        let run = train(
                            &mut job.model,
                            &job.train_samples,
                            &job.val_samples,
                            &job.norm,
                            &job.cfg,
                        )?;
                        Ok((
                            job.scope,
                            TrainedModel {
                                graph: job.model,
                                norm: job.norm,
                                run,
                            },
                        ))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        });
        for outcome in outcomes {
            let (scope, trained) = outcome?;
            results.insert(scope, trained);
        }
    }
    Ok(results)
}

/// Line-delimited training log: `epoch=<i> loss=<l> val_mape=<v>`.
pub fn write_train_log(path: &Path, run: &TrainRun) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "variant={} scope={} seed={} best_epoch={} best_val_mape={}",
        run.variant, run.scope, run.seed, run.best_epoch, run.best_val_mape
    )
    .map_err(Error::io(path))?;
    for (epoch, (loss, val)) in run.train_loss.iter().zip(&run.val_mape).enumerate() {
        writeln!(w, "epoch={epoch} loss={loss} val_mape={val}").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}
