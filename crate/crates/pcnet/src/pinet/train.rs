//! Training loop: trace-level splits, seeded shuffling, batched Adam, and
//! inference on solver fixes.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::features::{
    apply_scaler, extract_features, fit_scaler, CorrectionLabel, FeatureRow, FeatureSet,
};
use crate::model::Epoch;
use crate::solver::PositionFix;

use super::net::{
    adam_step, backward, forward, mse_loss, mse_loss_grad, AdamConfig, AdamState, Gradients, Mode,
    PiDnnModel, PinetError,
};

/// One training sample: an epoch's feature set tagged with its trace so the
/// split never mixes a trace across partitions.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub trace_id: String,
    pub set: FeatureSet,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Train/validation/test fractions over traces; must sum to 1.
    pub split: (f64, f64, f64),
    pub output_dim: usize,
    pub seed: u64,
    /// Per-batch worker threads; 1 keeps everything on the caller thread.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            batch_size: 8,
            adam: AdamConfig::default(),
            split: (0.75, 0.10, 0.15),
            output_dim: 3,
            seed: 0,
            threads: default_threads(),
        }
    }
}

/// Thread cap: PCNET_THREADS when set, available parallelism otherwise.
pub(crate) fn default_threads() -> usize {
    std::env::var("PCNET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        })
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    /// (train MSE, validation MSE) per training epoch; validation repeats
    /// the train value when the validation split is empty.
    pub epochs: Vec<(f64, f64)>,
    pub best_epoch: usize,
    /// Trace ids per split, for reporting.
    pub train_traces: Vec<String>,
    pub val_traces: Vec<String>,
    pub test_traces: Vec<String>,
}

fn label_vector(label: &CorrectionLabel, output_dim: usize) -> DVector<f64> {
    match output_dim {
        3 => DVector::from_vec(vec![label.dx, label.dy, label.dz]),
        1 => DVector::from_vec(vec![(label.dx * label.dx
            + label.dy * label.dy
            + label.dz * label.dz)
            .sqrt()]),
        d => panic!("unsupported output dim {d}"),
    }
}

fn scaled_rows(model: &PiDnnModel, rows: &[FeatureRow]) -> Vec<FeatureRow> {
    rows.iter().map(|r| apply_scaler(&model.scaler, r)).collect()
}

fn sample_loss(model: &PiDnnModel, sample: &(Vec<FeatureRow>, DVector<f64>)) -> f64 {
    let (pred, _) = forward(model, &sample.0, Mode::Infer).expect("non-empty sample");
    mse_loss(&pred, &sample.1)
}

fn mean_loss(model: &PiDnnModel, samples: &[(Vec<FeatureRow>, DVector<f64>)]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    samples.iter().map(|s| sample_loss(model, s)).sum::<f64>() / samples.len() as f64
}

fn one_sample_gradient(
    model: &PiDnnModel,
    sample: &(Vec<FeatureRow>, DVector<f64>),
    dropout_base: u64,
    step: u64,
) -> Result<Gradients, PinetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_base.wrapping_add(
        step.wrapping_mul(0x9e37_79b9_7f4a_7c15),
    ));
    let (rows, label) = sample;
    let (pred, cache) = forward(model, rows, Mode::Train(&mut rng))?;
    backward(model, &cache, &mse_loss_grad(&pred, label))
}

/// Per-sample gradients for one batch, optionally fanned out over scoped
/// threads. The output order always matches `batch` order.
fn sample_gradients(
    model: &PiDnnModel,
    samples: &[(Vec<FeatureRow>, DVector<f64>)],
    batch: &[usize],
    steps: &[u64],
    dropout_base: u64,
    threads: usize,
) -> Result<Vec<Gradients>, PinetError> {
    if threads <= 1 || batch.len() <= 1 {
        return batch
            .iter()
            .zip(steps)
            .map(|(&i, &s)| one_sample_gradient(model, &samples[i], dropout_base, s))
            .collect();
    }
    let jobs: Vec<(usize, u64)> = batch.iter().copied().zip(steps.iter().copied()).collect();
    let chunk = jobs.len().div_ceil(threads);
    let mut results: Vec<Result<Vec<Gradients>, PinetError>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|&(i, s)| one_sample_gradient(model, &samples[i], dropout_base, s))
                        .collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        for h in handles {
            results.push(h.join().expect("gradient worker panicked"));
        }
    });
    let mut out = Vec::with_capacity(jobs.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Split trace ids deterministically by the config fractions. Trace order is
/// canonical (sorted, then seeded shuffle) so the split is a pure function
/// of the dataset and seed.
fn split_traces(dataset: &[LabeledSet], config: &TrainConfig) -> (Vec<String>, Vec<String>, Vec<String>) {
    let mut ids: Vec<String> = dataset.iter().map(|s| s.trace_id.clone()).collect();
    ids.sort();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5917_u64);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_train = (((n as f64) * config.split.0).round() as usize).clamp(1, n);
    let n_val = ((n as f64) * config.split.1).round() as usize;
    let train = ids[..n_train].to_vec();
    let val = ids[n_train..(n_train + n_val).min(n)].to_vec();
    let test = ids[(n_train + n_val).min(n)..].to_vec();
    (train, val, test)
}

/// Train a fresh model on labeled feature sets. Samples are whole epochs
/// with their natural variable satellite count; a batch gradient is the
/// mean of per-sample gradients. The returned model carries the scaler fit
/// on the training rows and is the epoch snapshot with the best validation
/// MSE.
pub fn train(
    dataset: &[LabeledSet],
    config: &TrainConfig,
) -> Result<(PiDnnModel, TrainHistory), PinetError> {
    if dataset.is_empty() {
        return Err(PinetError::EmptyDataset);
    }
    if dataset.iter().all(|s| s.set.label.is_none()) {
        return Err(PinetError::NoLabels);
    }

    let (train_ids, val_ids, test_ids) = split_traces(dataset, config);
    let collect = |ids: &[String]| -> Vec<&LabeledSet> {
        dataset
            .iter()
            .filter(|s| ids.contains(&s.trace_id) && s.set.label.is_some() && !s.set.rows.is_empty())
            .collect()
    };
    let train_sets = collect(&train_ids);
    let val_sets = collect(&val_ids);
    if train_sets.is_empty() {
        return Err(PinetError::EmptyDataset);
    }

    let all_train_rows: Vec<FeatureRow> =
        train_sets.iter().flat_map(|s| s.set.rows.iter().copied()).collect();
    let scaler = fit_scaler(&all_train_rows).map_err(|_| PinetError::EmptyDataset)?;

    let mut model = PiDnnModel::standard(config.output_dim, scaler, config.seed);

    let prepare = |sets: &[&LabeledSet]| -> Vec<(Vec<FeatureRow>, DVector<f64>)> {
        sets.iter()
            .map(|s| {
                (
                    scaled_rows(&model, &s.set.rows),
                    label_vector(s.set.label.as_ref().expect("filtered"), config.output_dim),
                )
            })
            .collect()
    };
    let train_samples = prepare(&train_sets);
    let val_samples = prepare(&val_sets);

    let mut adam = AdamState::new(&model);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0dd5_eed5);
    let dropout_base = config.seed ^ 0xd409_0u64;

    let mut history = TrainHistory {
        train_traces: train_ids,
        val_traces: val_ids,
        test_traces: test_ids,
        ..Default::default()
    };
    let mut best: Option<(f64, PiDnnModel, usize)> = None;

    let threads = config.threads.max(1);
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let mut step = 0u64;
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(config.batch_size) {
            // Each sample owns a dropout RNG derived from the global step,
            // and gradients are reduced in batch order, so the result is
            // bitwise independent of the worker count.
            let steps: Vec<u64> = (0..batch.len()).map(|j| step + j as u64).collect();
            step += batch.len() as u64;
            let per_sample = sample_gradients(&model, &train_samples, batch, &steps, dropout_base, threads)?;
            let mut total = Gradients::zeros_like(&model);
            for grads in &per_sample {
                total.add_scaled(grads, 1.0 / batch.len() as f64);
            }
            adam_step(&mut model, &total, &mut adam, &config.adam);
        }
        let train_mse = mean_loss(&model, &train_samples);
        let val_mse = if val_samples.is_empty() {
            train_mse
        } else {
            mean_loss(&model, &val_samples)
        };
        history.epochs.push((train_mse, val_mse));
        if best.as_ref().map_or(true, |(b, _, _)| val_mse < *b) {
            best = Some((val_mse, model.clone(), epoch));
        }
    }

    let (_, best_model, best_epoch) = best.expect("at least one epoch");
    history.best_epoch = best_epoch;
    Ok((best_model, history))
}

/// Predict the position correction for one epoch at its initial fix. The
/// model's persisted scaler is applied to the extracted features; for a
/// 1-D head the scalar is applied along the fix's local up axis
/// (compatibility mode for the single-output head).
pub fn predict_correction(
    model: &PiDnnModel,
    epoch: &Epoch,
    fix: &PositionFix,
) -> Result<CorrectionLabel, PinetError> {
    if !fix.converged {
        return Err(PinetError::UnconvergedFix);
    }
    let fs = extract_features(epoch, fix).map_err(|_| PinetError::EmptySet)?;
    let rows = scaled_rows(model, &fs.rows);
    let (out, _) = forward(model, &rows, Mode::Infer)?;
    match model.output_dim() {
        3 => Ok(CorrectionLabel { dx: out[0], dy: out[1], dz: out[2] }),
        1 => {
            let rx = crate::geodesy::ecef_to_geodetic(&fix.position)
                .map_err(|_| PinetError::EmptySet)?;
            let r = crate::geodesy::ecef_to_ned_rotation(&rx);
            // Local up axis in ECEF is minus the down row.
            Ok(CorrectionLabel {
                dx: -r[2][0] * out[0],
                dy: -r[2][1] * out[0],
                dz: -r[2][2] * out[0],
            })
        }
        d => panic!("unsupported output dim {d}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FEATURE_DIM;
    use rand::Rng;

    fn synthetic_dataset(traces: usize, epochs: usize, seed: u64) -> Vec<LabeledSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for t in 0..traces {
            for e in 0..epochs {
                let m = rng.gen_range(5..10);
                let rows: Vec<FeatureRow> = (0..m)
                    .map(|_| {
                        let mut a = [0.0; FEATURE_DIM];
                        for v in &mut a {
                            *v = rng.gen_range(-1.0..1.0);
                        }
                        FeatureRow::from_array(a)
                    })
                    .collect();
                // Learnable structure: label depends on the row sums.
                let s: f64 = rows.iter().map(|r| r.pr_residual).sum();
                out.push(LabeledSet {
                    trace_id: format!("t{t}"),
                    set: FeatureSet {
                        epoch_time: e as i64 * 1000,
                        rows,
                        label: Some(CorrectionLabel { dx: s, dy: -s, dz: 0.5 * s }),
                    },
                });
            }
        }
        out
    }

    #[test]
    fn overfits_single_sample() {
        let dataset = synthetic_dataset(1, 1, 3);
        let config = TrainConfig {
            max_epochs: 200,
            split: (1.0, 0.0, 0.0),
            threads: 1,
            ..Default::default()
        };
        let (_, history) = train(&dataset, &config).unwrap();
        let initial = history.epochs.first().unwrap().0;
        let final_mse = history.epochs.last().unwrap().0;
        assert!(
            final_mse < 0.01 * initial,
            "final {final_mse} vs initial {initial}"
        );
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let dataset = synthetic_dataset(4, 6, 5);
        let config = TrainConfig { max_epochs: 3, threads: 1, ..Default::default() };
        let (m1, h1) = train(&dataset, &config).unwrap();
        let (m2, h2) = train(&dataset, &config).unwrap();
        assert_eq!(h1.epochs, h2.epochs);
        assert_eq!(m1.encoder, m2.encoder);
        assert_eq!(m1.decoder, m2.decoder);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let dataset = synthetic_dataset(4, 6, 5);
        let base = TrainConfig { max_epochs: 2, ..Default::default() };
        let (m1, h1) = train(&dataset, &TrainConfig { threads: 1, ..base.clone() }).unwrap();
        let (m4, h4) = train(&dataset, &TrainConfig { threads: 4, ..base }).unwrap();
        assert_eq!(h1.epochs, h4.epochs);
        assert_eq!(m1.encoder, m4.encoder);
        assert_eq!(m1.decoder, m4.decoder);
    }

    #[test]
    fn split_keeps_traces_whole() {
        let dataset = synthetic_dataset(20, 2, 7);
        let config = TrainConfig { max_epochs: 1, ..Default::default() };
        let (_, h) = train(&dataset, &config).unwrap();
        let all: Vec<&String> =
            h.train_traces.iter().chain(&h.val_traces).chain(&h.test_traces).collect();
        assert_eq!(all.len(), 20);
        for t in &h.train_traces {
            assert!(!h.val_traces.contains(t) && !h.test_traces.contains(t));
        }
        assert_eq!(h.train_traces.len(), 15);
        assert_eq!(h.val_traces.len(), 2);
        assert_eq!(h.test_traces.len(), 3);
    }

    #[test]
    fn empty_dataset_and_missing_labels_are_errors() {
        let config = TrainConfig::default();
        assert!(matches!(train(&[], &config), Err(PinetError::EmptyDataset)));
        let mut dataset = synthetic_dataset(2, 2, 9);
        for s in &mut dataset {
            s.set.label = None;
        }
        assert!(matches!(train(&dataset, &config), Err(PinetError::NoLabels)));
    }
}
