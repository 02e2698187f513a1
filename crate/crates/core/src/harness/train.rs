use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, Task};
use crate::numerics::{Graph, Scalar};

use super::data::Dataset;
use super::metrics::{evaluate_metrics, Metrics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once the evaluated train accuracy reaches this value.
    #[serde(default)]
    pub target: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 3e-3,
            batch_size: 4,
            seed: 0,
            target: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy over the epoch's forward passes (per cloud or per point).
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub steps: usize,
    /// Evaluated on the training set with the final parameters.
    pub final_metrics: Metrics,
}

/// `epoch,loss,metric` rows.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,loss,metric\n");
    for e in log {
        let _ = writeln!(s, "{},{:.6},{:.6}", e.epoch, e.loss, e.metric);
    }
    s
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step<T: Scalar>(&mut self, model: &mut Model<T>, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let ids: Vec<_> = model.params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if lr == 0.0 {
                continue;
            }
            let p = model.params.get_mut(id).data_mut();
            for (j, &g) in grads[i].iter().enumerate() {
                self.m[i][j] = Self::B1 * self.m[i][j] + (1.0 - Self::B1) * g;
                self.v[i][j] = Self::B2 * self.v[i][j] + (1.0 - Self::B2) * g * g;
                let upd = lr * (self.m[i][j] / c1) / ((self.v[i][j] / c2).sqrt() + Self::EPS);
                p[j] = T::of(p[j].to_f64_lossy() - upd);
            }
        }
    }
}

fn accuracy_counts(
    task: Task,
    logits: &crate::numerics::Tensor<impl Scalar>,
    labels: &[usize],
) -> (usize, usize) {
    let _ = task;
    let mut hit = 0;
    for (r, &l) in labels.iter().enumerate() {
        let row = logits.row(r);
        let best = (0..row.len())
            .max_by(|&a, &b| {
                row[a]
                    .partial_cmp(&row[b])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.cmp(&a))
            })
            .unwrap_or(0);
        hit += usize::from(best == l);
    }
    (hit, labels.len())
}

fn norm_summary<T: Scalar>(model: &Model<T>, grads: &[Vec<f64>]) -> String {
    let mut norms: Vec<(String, f64)> = model
        .params
        .iter()
        .zip(grads)
        .map(|((_, name, _), g)| {
            (
                name.to_string(),
                g.iter().map(|v| v * v).sum::<f64>().sqrt(),
            )
        })
        .collect();
    norms.sort_by(|a, b| b.1.total_cmp(&a.1));
    norms
        .iter()
        .take(5)
        .map(|(n, v)| format!("{n}={v:.3e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Evaluates every cloud of `data` with the current parameters.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<Metrics> {
    let mut preds = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    for c in &data.clouds {
        preds.push(model.predict(c)?);
        labels.push(model.net.targets(c)?);
    }
    evaluate_metrics(&preds, &labels, data.task, data.num_classes)
}

/// Adam with cosine learning-rate decay over minibatches of per-sample
/// tapes. Gradients are averaged in sample order, so a fixed seed gives
/// identical runs.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Contract("training on an empty dataset".into()));
    }
    if data.task != model.config().task {
        return Err(Error::Config(
            "dataset task differs from network task".into(),
        ));
    }
    let batch = cfg.batch_size.max(1);
    let sizes: Vec<usize> = model.params.iter().map(|(_, _, t)| t.numel()).collect();
    let mut adam = Adam::new(&sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_epoch = data.len().div_ceil(batch);
    let total = (cfg.epochs * per_epoch).max(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let mut applied: Vec<Vec<f64>> = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0, 0);
        for chunk in order.chunks(batch) {
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for &i in chunk {
                let cloud = &data.clouds[i];
                let mut g = Graph::new();
                let (logits, loss) = match model.net.loss(&mut g, &model.params, cloud) {
                    Err(Error::Domain(msg)) if step > 0 => {
                        return Err(Error::Diverged {
                            step,
                            detail: format!(
                                "{msg}; largest gradient norms: {}",
                                norm_summary(model, &applied)
                            ),
                        })
                    }
                    r => r?,
                };
                g.backward(loss)?;
                let lv = g.value(loss).data()[0].to_f64_lossy();
                let (h, n) =
                    accuracy_counts(data.task, g.value(logits), &model.net.targets(cloud)?);
                hits += h;
                seen += n;
                loss_sum += lv;
                for (id, grad) in g.param_grads() {
                    for (acc, v) in grads[id.index()].iter_mut().zip(grad.data()) {
                        *acc += v.to_f64_lossy() / chunk.len() as f64;
                    }
                }
                if !lv.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        detail: format!(
                            "loss {lv}; largest gradient norms: {}",
                            norm_summary(model, &grads)
                        ),
                    });
                }
            }
            let lr = cfg.lr * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos());
            adam.step(model, &grads, lr);
            if let Some((_, name, _)) = model.params.iter().find(|(_, _, t)| !t.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    detail: format!(
                        "{name} is non-finite after the update; largest gradient norms: {}",
                        norm_summary(model, &grads)
                    ),
                });
            }
            applied = grads;
            step += 1;
        }
        let metric = hits as f64 / seen as f64;
        log.push(EpochLog {
            epoch,
            loss: loss_sum / data.len() as f64,
            metric,
        });
        log::debug!(
            "epoch {epoch}: loss {:.5} metric {:.4}",
            loss_sum / data.len() as f64,
            metric
        );
        if let Some(target) = cfg.target {
            if metric >= target && evaluate(model, data)?.overall_accuracy >= target {
                break;
            }
        }
    }
    Ok(TrainReport {
        log,
        steps: step,
        final_metrics: evaluate(model, data)?,
    })
}
