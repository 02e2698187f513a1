use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::network::{Model, PointCloud};
use crate::numerics::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckOptions {
    pub tolerance: f64,
    /// Central-difference step.
    pub step: f64,
    /// Entries checked per parameter tensor (all of them if the tensor is
    /// smaller).
    pub per_group: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-5,
            per_group: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupError {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
    /// `(entry, analytic, numeric)` of the worst entry.
    pub worst: (usize, f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupError>,
}

impl GradcheckReport {
    pub fn max_rel(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&GroupError> {
        self.groups
            .iter()
            .filter(|g| !(g.max_rel < self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn loss_value(model: &Model<f64>, cloud: &PointCloud) -> Result<f64> {
    let mut g = Graph::new();
    let (_, l) = model.net.loss(&mut g, &model.params, cloud)?;
    Ok(g.value(l).data()[0])
}

/// Tape gradients of the cross-entropy loss, one tensor per parameter in
/// store order (zeros where the loss does not depend on a parameter).
pub fn analytic_gradients(model: &Model<f64>, cloud: &PointCloud) -> Result<Vec<Tensor<f64>>> {
    let mut g = Graph::new();
    let (_, l) = model.net.loss(&mut g, &model.params, cloud)?;
    g.backward(l)?;
    let mut out: Vec<Tensor<f64>> = model
        .params
        .iter()
        .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()))
        .collect();
    for (id, grad) in g.param_grads() {
        out[id.index()] = grad;
    }
    Ok(out)
}

/// Compares `analytic` against central differences of the loss.
pub fn compare_gradients(
    model: &mut Model<f64>,
    cloud: &PointCloud,
    analytic: &[Tensor<f64>],
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ids: Vec<_> = model.params.ids().collect();
    let mut groups = Vec::with_capacity(ids.len());
    for id in ids {
        let n = model.params.get(id).numel();
        let entries: Vec<usize> = if n <= opts.per_group {
            (0..n).collect()
        } else {
            let mut e = sample(&mut rng, n, opts.per_group).into_vec();
            e.sort_unstable();
            e
        };
        let mut worst = (0, 0.0, 0.0);
        let mut max_rel = 0.0;
        for &e in &entries {
            let orig = model.params.get(id).data()[e];
            model.params.get_mut(id).data_mut()[e] = orig + opts.step;
            let plus = loss_value(model, cloud)?;
            model.params.get_mut(id).data_mut()[e] = orig - opts.step;
            let minus = loss_value(model, cloud)?;
            model.params.get_mut(id).data_mut()[e] = orig;
            let num = (plus - minus) / (2.0 * opts.step);
            let ana = analytic[id.index()].data()[e];
            let rel = relative_error(ana, num);
            if !(rel <= max_rel) {
                max_rel = rel;
                worst = (e, ana, num);
            }
        }
        groups.push(GroupError {
            name: model.params.name(id).to_string(),
            checked: entries.len(),
            max_rel,
            worst,
        });
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        groups,
    })
}

/// Tape gradients against central differences on every parameter tensor.
pub fn gradcheck(
    model: &mut Model<f64>,
    cloud: &PointCloud,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let analytic = analytic_gradients(model, cloud)?;
    compare_gradients(model, cloud, &analytic, opts)
}
