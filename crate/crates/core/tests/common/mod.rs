#![allow(dead_code)]

use gs6::harness::relative_error;
use gs6::numerics::{Graph, NodeId};
use gs6::params::{ParamId, ParamStore};
use gs6::Result;

/// Worst relative error between tape and central-difference gradients of
/// the scalar built by `loss`, over every entry of `ids`.
pub fn fd_max_rel<F>(ps: &mut ParamStore<f64>, ids: &[ParamId], loss: F) -> f64
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let l = loss(&mut g, ps).unwrap();
    g.backward(l).unwrap();
    let grads = g.param_grads();
    let value = |ps: &ParamStore<f64>| {
        let mut g = Graph::new();
        let l = loss(&mut g, ps).unwrap();
        g.value(l).data()[0]
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &id in ids {
        let analytic = grads.iter().find(|(p, _)| *p == id).map(|(_, t)| t.clone());
        for e in 0..ps.get(id).numel() {
            let orig = ps.get(id).data()[e];
            ps.get_mut(id).data_mut()[e] = orig + h;
            let plus = value(ps);
            ps.get_mut(id).data_mut()[e] = orig - h;
            let minus = value(ps);
            ps.get_mut(id).data_mut()[e] = orig;
            let num = (plus - minus) / (2.0 * h);
            let ana = analytic.as_ref().map_or(0.0, |t| t.data()[e]);
            worst = worst.max(relative_error(ana, num));
        }
    }
    worst
}
