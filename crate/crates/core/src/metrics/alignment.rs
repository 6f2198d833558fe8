use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::LocalOpts;
use crate::math::{dot, norm};
use crate::model::{DualAdapterModel, Gradient, Prediction, Stream};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentKind {
    GradCosine,
    LossTransfer,
}

/// How a loss change is reported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferScale {
    /// `(after - before) / before · 100`
    #[default]
    Relative,
    /// `after - before`
    Absolute,
}

/// A task × task matrix; rows are sources, columns targets.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentMatrix {
    pub kind: AlignmentKind,
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl AlignmentMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        let n = self.len();
        if n < 2 {
            return 0.0;
        }
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sum += self.values[i][j];
                }
            }
        }
        sum / (n * (n - 1)) as f64
    }

    /// Mean of row `i` without its diagonal entry.
    pub fn row_off_diagonal(&self, i: usize) -> f64 {
        let n = self.len();
        (0..n)
            .filter(|&j| j != i)
            .map(|j| self.values[i][j])
            .sum::<f64>()
            / (n - 1).max(1) as f64
    }
}

fn check_labels(labels: &[String], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {n} tasks",
            labels.len()
        )));
    }
    Ok(())
}

/// Gradient of the trainable streams, flattened R then S.
fn trainable_gradient(model: &DualAdapterModel, g: &Gradient) -> Vec<f64> {
    let mut out = Vec::new();
    for stream in [Stream::R, Stream::S] {
        if model.trainable().includes(stream) {
            out.extend_from_slice(g.stream(stream));
        }
    }
    out
}

/// Pairwise cosine similarity of flat gradient vectors; the diagonal is exactly 1.
pub fn cosine_matrix(grads: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let norms: Vec<f64> = grads.iter().map(|g| norm(g)).collect();
    let n = grads.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        m[i][i] = 1.0;
        for j in i + 1..n {
            let c = (dot(&grads[i], &grads[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    m
}

/// Pairwise cosine of the tasks' mean gradients at a fixed model.
pub fn grad_cosine_matrix(
    model: &DualAdapterModel,
    tasks: &[Vec<Prediction>],
    labels: &[String],
) -> Result<AlignmentMatrix> {
    check_labels(labels, tasks.len())?;
    let grads = tasks
        .iter()
        .zip(labels)
        .map(|(batch, label)| {
            if batch.is_empty() {
                return Err(Error::InvalidArgument(format!("task {label}: empty batch")));
            }
            let (_, g) = model.batch_nll(batch)?;
            let flat = trainable_gradient(model, &g);
            if norm(&flat) == 0.0 {
                return Err(Error::ZeroGradient {
                    task: label.clone(),
                });
            }
            Ok(flat)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignmentMatrix {
        kind: AlignmentKind::GradCosine,
        labels: labels.to_vec(),
        values: cosine_matrix(&grads),
    })
}

/// Trains a copy of `model` on `batch` with shuffled mini-batch SGD
/// (`batch_size` counts predictions).
fn probe(
    model: &DualAdapterModel,
    batch: &[Prediction],
    opts: &LocalOpts,
    seed: u64,
) -> Result<DualAdapterModel> {
    let mut m = model.clone();
    let mut rng = rng::rng(seed);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size) {
            let mb: Vec<Prediction> = chunk.iter().map(|&i| batch[i].clone()).collect();
            let (loss, g) = m.batch_nll(&mb)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("probe loss {loss}")));
            }
            m.sgd_step(&g, opts.lr, None)?;
        }
    }
    Ok(m)
}

/// Entry `(i, j)`: change of task `j`'s loss after probing on task `i`.
/// The probe always starts from `model`.
pub fn loss_transfer_matrix(
    model: &DualAdapterModel,
    tasks: &[Vec<Prediction>],
    labels: &[String],
    opts: &LocalOpts,
    scale: TransferScale,
    seed: u64,
) -> Result<AlignmentMatrix> {
    check_labels(labels, tasks.len())?;
    if tasks.len() < 2 {
        return Err(Error::InvalidArgument(
            "loss transfer needs at least 2 tasks".into(),
        ));
    }
    opts.validate()?;
    let before = tasks
        .iter()
        .map(|t| model.mean_nll(t))
        .collect::<Result<Vec<_>>>()?;
    if let Some(l) = before.iter().find(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("baseline loss {l}")));
    }
    let values = tasks
        .par_iter()
        .enumerate()
        .map(|(i, source)| {
            let probed = probe(
                model,
                source,
                opts,
                rng::derive2(seed, rng::PROBE, i as u64),
            )?;
            tasks
                .iter()
                .zip(&before)
                .map(|(target, &b)| {
                    let after = probed.mean_nll(target)?;
                    if !after.is_finite() {
                        return Err(Error::NonFinite(format!("probe on task {i}: loss {after}")));
                    }
                    Ok(match scale {
                        TransferScale::Relative => (after - b) / b * 100.0,
                        TransferScale::Absolute => after - b,
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignmentMatrix {
        kind: AlignmentKind::LossTransfer,
        labels: labels.to_vec(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_domains, sample_dataset};
    use crate::model::{Backbone, BackboneConfig, LoraConfig, StreamSelector};
    use std::sync::Arc;

    fn fixture() -> (DualAdapterModel, Vec<Vec<Prediction>>, Vec<String>) {
        let bb = Arc::new(Backbone::random(BackboneConfig::default(), 3).unwrap());
        let mut model = DualAdapterModel::new(bb, LoraConfig::default(), 0).unwrap();
        model.set_trainable(StreamSelector::ROnly);
        let domains = build_domains(3, 32, 1).unwrap();
        let data = sample_dataset(&domains, 4, 4, 8, 2);
        let tasks: Vec<Vec<Prediction>> = data
            .iter()
            .map(|d| d.iter().flat_map(|s| s.response_predictions(8)).collect())
            .collect();
        let labels = domains.iter().map(|d| d.name.clone()).collect();
        (model, tasks, labels)
    }

    #[test]
    fn grad_cosine_diagonal_symmetry_and_range() {
        let (m, tasks, labels) = fixture();
        let a = grad_cosine_matrix(&m, &tasks, &labels).unwrap();
        for i in 0..3 {
            assert!((a.get(i, i) - 1.0).abs() < 1e-9);
            for j in 0..3 {
                assert!((a.get(i, j) - a.get(j, i)).abs() < 1e-12);
                assert!((-1.0..=1.0).contains(&a.get(i, j)));
            }
        }
    }

    #[test]
    fn grad_cosine_scale_invariant() {
        let grads = vec![
            vec![1.0, 2.0, -0.5],
            vec![0.3, -1.0, 2.0],
            vec![-2.0, 0.1, 0.4],
        ];
        let base = cosine_matrix(&grads);
        let mut scaled = grads.clone();
        scaled[1].iter_mut().for_each(|g| *g *= 37.5);
        let after = cosine_matrix(&scaled);
        for i in 0..3 {
            for j in 0..3 {
                assert!((base[i][j] - after[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_gradient_names_task() {
        let (mut m, tasks, labels) = fixture();
        m.set_trainable(StreamSelector::None);
        match grad_cosine_matrix(&m, &tasks, &labels) {
            Err(Error::ZeroGradient { task }) => assert_eq!(task, labels[0]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_epoch_probe_is_all_zero() {
        let (m, tasks, labels) = fixture();
        let opts = LocalOpts {
            epochs: 0,
            ..Default::default()
        };
        let t =
            loss_transfer_matrix(&m, &tasks, &labels, &opts, TransferScale::Relative, 0).unwrap();
        assert!(t.values.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn self_transfer_reduces_own_loss() {
        let (m, tasks, labels) = fixture();
        let opts = LocalOpts {
            epochs: 2,
            batch_size: 8,
            lr: 0.05,
            ..Default::default()
        };
        let t =
            loss_transfer_matrix(&m, &tasks, &labels, &opts, TransferScale::Relative, 0).unwrap();
        for i in 0..3 {
            assert!(t.get(i, i) <= 0.0, "{:?}", t.values);
        }
        let abs =
            loss_transfer_matrix(&m, &tasks, &labels, &opts, TransferScale::Absolute, 0).unwrap();
        assert!(abs.get(0, 0) < 0.0);
    }
}
