use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::Task;

/// Correct predictions over total.
pub fn overall_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check(preds, labels)?;
    let hit = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hit as f64 / preds.len() as f64)
}

fn check(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Contract("metrics of an empty prediction set".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// `(intersection, union)` per class.
fn overlaps(preds: &[usize], labels: &[usize], classes: usize) -> Vec<(usize, usize)> {
    let mut out = vec![(0, 0); classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            out[p].0 += 1;
            out[p].1 += 1;
        } else {
            if p < classes {
                out[p].1 += 1;
            }
            if l < classes {
                out[l].1 += 1;
            }
        }
    }
    out
}

fn mean_present(o: &[(usize, usize)]) -> f64 {
    let present: Vec<f64> = o
        .iter()
        .filter(|(_, u)| *u > 0)
        .map(|&(i, u)| i as f64 / u as f64)
        .collect();
    if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// IoU averaged over the parts that occur in either prediction or label.
pub fn shape_iou(preds: &[usize], labels: &[usize], parts: usize) -> Result<f64> {
    check(preds, labels)?;
    Ok(mean_present(&overlaps(preds, labels, parts)))
}

/// Per-shape IoU averaged over shapes.
pub fn instance_miou(shapes: &[(Vec<usize>, Vec<usize>)], parts: usize) -> Result<f64> {
    if shapes.is_empty() {
        return Err(Error::Contract("metrics of an empty prediction set".into()));
    }
    let total = shapes
        .iter()
        .map(|(p, l)| shape_iou(p, l, parts))
        .sum::<Result<f64>>()?;
    Ok(total / shapes.len() as f64)
}

/// IoU per class over all points pooled together, averaged over classes.
pub fn class_miou(preds: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    check(preds, labels)?;
    Ok(mean_present(&overlaps(preds, labels, classes)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub overall_accuracy: f64,
    /// Segmentation only.
    pub instance_miou: Option<f64>,
    pub class_miou: f64,
}

/// `preds[i]` and `labels[i]` hold one entry (recognition) or one entry per
/// point (segmentation) for sample `i`.
pub fn evaluate_metrics(
    preds: &[Vec<usize>],
    labels: &[Vec<usize>],
    task: Task,
    classes: usize,
) -> Result<Metrics> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} samples",
            preds.len(),
            labels.len()
        )));
    }
    let flat_p: Vec<usize> = preds.iter().flatten().copied().collect();
    let flat_l: Vec<usize> = labels.iter().flatten().copied().collect();
    let instance = match task {
        Task::Recognition => None,
        Task::Segmentation => {
            let shapes: Vec<_> = preds.iter().cloned().zip(labels.iter().cloned()).collect();
            Some(instance_miou(&shapes, classes)?)
        }
    };
    Ok(Metrics {
        overall_accuracy: overall_accuracy(&flat_p, &flat_l)?,
        instance_miou: instance,
        class_miou: class_miou(&flat_p, &flat_l, classes)?,
    })
}
