//! Evaluation and training diagnostics.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::acgan::{AcganModel, ClassId, Group};
use crate::autodiff::Tape;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::taskstream::TaskStream;
use crate::tensor::Tensor;

/// Samples with more than this many dimensions are projected before the Fréchet distance.
pub const FID_RAW_MAX_DIM: usize = 2;
pub const FID_PROJECTION_DIM: usize = 16;
pub const FID_PROJECTION_SEED: u64 = 0x00F1_D5EE_D000_0016;
pub const FID_REGULARIZER: f64 = 1e-6;

pub const SPIKE_HEAD_FRACTION: f64 = 0.05;
pub const SPIKE_TAIL_FRACTION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub round: usize,
    pub num_samples: usize,
    pub accuracy: f64,
    /// Indexed by dataset label; `None` for labels absent from the test set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[predicted][true]`.
    pub confusion: Vec<Vec<u64>>,
    /// Accuracy of each client's live model on its current-task test split.
    pub local_accuracy: Vec<f64>,
}

impl EvalReport {
    pub fn from_predictions(
        round: usize,
        predicted: &[ClassId],
        truth: &[ClassId],
        num_classes: usize,
    ) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::Dimension(format!(
                "{} predictions for {} labels",
                predicted.len(),
                truth.len()
            )));
        }
        if truth.is_empty() {
            return Err(Error::Evaluation("empty test set".into()));
        }
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= num_classes || t >= num_classes {
                return Err(Error::Range(format!("label {} >= {num_classes}", p.max(t))));
            }
            confusion[p][t] += 1;
        }
        let correct: u64 = (0..num_classes).map(|k| confusion[k][k]).sum();
        let per_class_accuracy = (0..num_classes)
            .map(|t| {
                let total: u64 = confusion.iter().map(|row| row[t]).sum();
                (total > 0).then(|| confusion[t][t] as f64 / total as f64)
            })
            .collect();
        Ok(Self {
            round,
            num_samples: truth.len(),
            accuracy: correct as f64 / truth.len() as f64,
            per_class_accuracy,
            confusion,
            local_accuracy: Vec::new(),
        })
    }

    /// Accuracy on `class` minus the mean accuracy over `others`.
    pub fn accuracy_gap(&self, class: ClassId, others: &[ClassId]) -> Result<f64> {
        let acc = |k: ClassId| {
            self.per_class_accuracy
                .get(k)
                .copied()
                .flatten()
                .ok_or_else(|| Error::Evaluation(format!("class {k} not in test set")))
        };
        let mean = others.iter().map(|&k| acc(k)).sum::<Result<f64>>()? / others.len() as f64;
        Ok(acc(class)? - mean)
    }
}

/// Samples and labels of the union of all clients' test indices for tasks
/// `0..=current_task[i]`, in index order.
pub fn test_union(
    dataset: &LabeledDataset,
    streams: &[TaskStream],
    current_task: &[usize],
) -> Result<(Tensor, Vec<ClassId>)> {
    if streams.len() != current_task.len() {
        return Err(Error::Dimension(format!(
            "{} streams for {} task cursors",
            streams.len(),
            current_task.len()
        )));
    }
    let mut idx: Vec<usize> = streams
        .iter()
        .zip(current_task)
        .flat_map(|(s, &t)| s.tasks.iter().take(t + 1).flat_map(|task| task.test.iter().copied()))
        .collect();
    idx.sort_unstable();
    idx.dedup();
    if idx.is_empty() {
        return Err(Error::Evaluation("empty test union".into()));
    }
    dataset.gather(&idx)
}

/// Argmax evaluation of `model` on [`test_union`], without task identity.
pub fn evaluate_global(
    model: &AcganModel,
    dataset: &LabeledDataset,
    streams: &[TaskStream],
    current_task: &[usize],
    round: usize,
) -> Result<EvalReport> {
    let (x, y) = test_union(dataset, streams, current_task)?;
    evaluate_on(model, &x, &y, dataset.num_classes(), round)
}

/// Argmax evaluation of `model` on `(x, labels)`.
pub fn evaluate_on(
    model: &AcganModel,
    x: &Tensor,
    labels: &[ClassId],
    num_classes: usize,
    round: usize,
) -> Result<EvalReport> {
    let predicted: Vec<ClassId> = predict_or_none(model, x)?
        .into_iter()
        .zip(labels)
        // An empty head never matches: count as a miss on the next label.
        .map(|(p, &t)| p.unwrap_or((t + 1) % num_classes))
        .collect();
    EvalReport::from_predictions(round, &predicted, labels, num_classes)
}

fn predict_or_none(model: &AcganModel, x: &Tensor) -> Result<Vec<Option<ClassId>>> {
    if model.num_classes() == 0 {
        return Ok(vec![None; x.rows()]);
    }
    Ok(model.predict(x)?.into_iter().map(Some).collect())
}

/// Fraction of `labels` predicted correctly; 0 for a model without classes.
pub fn accuracy(model: &AcganModel, x: &Tensor, labels: &[ClassId]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Evaluation("accuracy of an empty set".into()));
    }
    let predicted = predict_or_none(model, x)?;
    let correct = predicted
        .iter()
        .zip(labels)
        .filter(|(p, &t)| **p == Some(t))
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Accuracy of a freshly broadcast model on a client's current-task test split.
pub fn post_sync_local_accuracy(broadcast: &AcganModel, x: &Tensor, labels: &[ClassId]) -> Result<f64> {
    accuracy(broadcast, x, labels)
}

/// Mean classification cross-entropy on `(x, labels)` and the L2 norm of its
/// gradient with respect to the class-head weights.
pub fn ce_loss_and_gradient_norm(model: &AcganModel, x: &Tensor, labels: &[ClassId]) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let b = model.bind(&tape, Group::Classifier);
    let y = tape.constant(model.one_hot(labels)?);
    let f = model.features(&b, tape.constant(x.clone()))?;
    let loss = model.class_probs(&b, f)?.cross_entropy(y)?;
    let value = loss.item();
    let grads = tape.backward(loss)?;
    let g = grads.get_or_zeros(b.get("cls.w"));
    Ok((value, g.data().iter().map(|v| v * v).sum::<f64>().sqrt()))
}

pub fn ce_gradient_norm(model: &AcganModel, x: &Tensor, labels: &[ClassId]) -> Result<f64> {
    Ok(ce_loss_and_gradient_norm(model, x, labels)?.1)
}

fn fid_features(x: &Tensor) -> Result<DMatrix<f64>> {
    let (n, d) = (x.rows(), x.cols());
    let raw = DMatrix::from_row_slice(n, d, x.data());
    if d <= FID_RAW_MAX_DIM {
        return Ok(raw);
    }
    let mut rng = rng_from_seed(FID_PROJECTION_SEED ^ d as u64);
    let scale = 1.0 / (d as f64).sqrt();
    let p = DMatrix::from_fn(d, FID_PROJECTION_DIM, |_, _| {
        scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    });
    Ok(raw * p)
}

fn mean_and_covariance(f: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = f.nrows() as f64;
    let mean = f.row_mean();
    let centered = DMatrix::from_fn(f.nrows(), f.ncols(), |i, j| f[(i, j)] - mean[j]);
    let mut cov = centered.transpose() * &centered / (n - 1.0);
    for i in 0..cov.nrows() {
        cov[(i, i)] += FID_REGULARIZER;
    }
    (DMatrix::from_row_slice(1, mean.len(), mean.as_slice()), cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two sample sets, on raw
/// coordinates for data of dimension ≤ 2 and on a fixed random projection
/// otherwise.
pub fn proxy_fid(real: &Tensor, generated: &Tensor) -> Result<f64> {
    if real.rank() != 2 || generated.rank() != 2 || real.cols() != generated.cols() {
        return Err(Error::Dimension(format!(
            "proxy_fid on {:?} and {:?}",
            real.shape(),
            generated.shape()
        )));
    }
    if real.rows() < 2 || generated.rows() < 2 {
        return Err(Error::Evaluation("proxy_fid needs at least 2 samples per set".into()));
    }
    let (mr, cr) = mean_and_covariance(&fid_features(real)?);
    let (mg, cg) = mean_and_covariance(&fid_features(generated)?);
    let diff = &mr - &mg;
    let mean_term = diff.iter().map(|v| v * v).sum::<f64>();
    let sr = sqrt_psd(&cr);
    let mid = &sr * &cg * &sr;
    let mid = (&mid + mid.transpose()) * 0.5;
    let cross = SymmetricEigen::new(mid)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum::<f64>();
    Ok((mean_term + cr.trace() + cg.trace() - 2.0 * cross).max(0.0))
}

/// Mean loss over the first 5% of each round divided by the mean over its
/// last 50%, averaged over the complete rounds in `trace`.
pub fn spike_ratio(trace: &[f64], round_len: usize) -> Result<f64> {
    if round_len == 0 || trace.len() < round_len {
        return Err(Error::Evaluation(format!(
            "trace of {} iterations is shorter than one round of {round_len}",
            trace.len()
        )));
    }
    let head = ((round_len as f64 * SPIKE_HEAD_FRACTION).ceil() as usize).max(1);
    let tail = ((round_len as f64 * SPIKE_TAIL_FRACTION).round() as usize).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let rounds = trace.len() / round_len;
    let mut total = 0.0;
    for r in trace.chunks_exact(round_len) {
        let late = mean(&r[round_len - tail..]);
        if late <= 0.0 {
            return Err(Error::Evaluation("non-positive late-round loss".into()));
        }
        total += mean(&r[..head]) / late;
    }
    Ok(total / rounds as f64)
}
