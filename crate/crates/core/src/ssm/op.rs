use crate::error::{shape_err, Result};
use crate::numerics::{CustomOp, Graph, NodeId, Scalar, Tensor};
use crate::params::ParamStore;

use super::discretize::{input_coefficient, input_coefficient_grad};
use super::params::GS6Ids;
use super::{discretize, scan, Discretization, ScanMode};

struct SelectiveScan<T> {
    group: usize,
    disc: Discretization,
    /// `[B, L, D, N]`
    a_bar: Tensor<T>,
    /// `[B, L, D, N]`
    states: Tensor<T>,
}

fn as_batched<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    match t.rank() {
        2 => t.clone().reshape([&[1], t.shape()].concat()),
        3 => Ok(t.clone()),
        _ => Err(shape_err("selective_scan", t.shape(), &[0, 0, 0])),
    }
}

/// Discretises and scans in one differentiable step.
///
/// Inputs are `x: [L, D]`, `delta: [L, D/g]`, `a: [D/g, N]` (the negative
/// state coefficients), `b`, `c: [L, N]`; a leading batch axis is also
/// accepted. The output has the shape of `x`.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    delta: NodeId,
    a: NodeId,
    b: NodeId,
    c: NodeId,
    group: usize,
    disc: Discretization,
    mode: ScanMode,
) -> Result<NodeId> {
    let xs = as_batched(g.value(x))?;
    let inputs = discretize(
        &as_batched(g.value(delta))?,
        g.value(a),
        &as_batched(g.value(b))?,
        &as_batched(g.value(c))?,
        &xs,
        group,
        disc,
    )?;
    let out = scan(&inputs, mode)?;
    let y = out.y.reshape(g.value(x).shape().to_vec())?;
    let op = SelectiveScan {
        group,
        disc,
        a_bar: inputs.a_bar,
        states: out.states,
    };
    Ok(g.custom(&[x, delta, a, b, c], y, Box::new(op)))
}

/// The full grouped selective SSM on `x: [L, D]` using parameters in `ps`.
pub fn gs6_layer<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    ids: &GS6Ids,
    x: NodeId,
    disc: Discretization,
    mode: ScanMode,
) -> Result<NodeId> {
    let (wb, wc, wd, bias, a_log) = (
        g.param(ps, ids.w_b),
        g.param(ps, ids.w_c),
        g.param(ps, ids.w_delta),
        g.param(ps, ids.delta_bias),
        g.param(ps, ids.a_log),
    );
    let b = g.matmul(x, wb)?;
    let c = g.matmul(x, wc)?;
    let d = g.matmul(x, wd)?;
    let d = g.add(d, bias)?;
    let delta = g.softplus(d)?;
    let a = g.exp(a_log)?;
    let a = g.neg(a)?;
    selective_scan(g, x, delta, a, b, c, ids.group, disc, mode)
}

impl<T: Scalar> CustomOp<T> for SelectiveScan<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let s = self.a_bar.shape();
        let (bs, len, dim, n) = (s[0], s[1], s[2], s[3]);
        let (grp, groups) = (self.group, dim / self.group);
        let (x, delta, a, bm, cm) = (
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            inputs[3].data(),
            inputs[4].data(),
        );
        let gy = grad_output.data();
        let abar = self.a_bar.data();
        let h = self.states.data();

        let mut gx = vec![T::zero(); x.len()];
        let mut gd = vec![T::zero(); delta.len()];
        let mut ga = vec![T::zero(); a.len()];
        let mut gb = vec![T::zero(); bm.len()];
        let mut gc = vec![T::zero(); cm.len()];
        // running ∂loss/∂h_t for one batch element
        let mut sh = vec![T::zero(); dim * n];
        for b in 0..bs {
            sh.iter_mut().for_each(|v| *v = T::zero());
            for t in (0..len).rev() {
                let st = b * len + t;
                for d in 0..dim {
                    let gyv = gy[st * dim + d];
                    for m in 0..n {
                        let i = d * n + m;
                        let carry = if t + 1 < len {
                            abar[(st + 1) * dim * n + i] * sh[i]
                        } else {
                            T::zero()
                        };
                        sh[i] = gyv * cm[st * n + m] + carry;
                        gc[st * n + m] = gc[st * n + m] + gyv * h[st * dim * n + i];
                    }
                }
                for k in 0..groups {
                    let dt = delta[st * groups + k];
                    for m in 0..n {
                        let av = a[k * n + m];
                        let e = (dt * av).exp();
                        let coef = input_coefficient(dt, av, self.disc);
                        let (cd, ca) = input_coefficient_grad(dt, av, self.disc);
                        let bv = bm[st * n + m];
                        let mut g_e = T::zero();
                        let mut g_coef = T::zero();
                        for d in k * grp..(k + 1) * grp {
                            let sv = sh[d * n + m];
                            let xv = x[st * dim + d];
                            if t > 0 {
                                g_e = g_e + sv * h[(st - 1) * dim * n + d * n + m];
                            }
                            g_coef = g_coef + sv * bv * xv;
                            gx[st * dim + d] = gx[st * dim + d] + sv * coef * bv;
                            gb[st * n + m] = gb[st * n + m] + sv * coef * xv;
                        }
                        gd[st * groups + k] = gd[st * groups + k] + g_e * e * av + g_coef * cd;
                        ga[k * n + m] = ga[k * n + m] + g_e * e * dt + g_coef * ca;
                    }
                }
            }
        }
        let wrap = |v: Vec<T>, t: &Tensor<T>| {
            Some(Tensor::new(t.shape().to_vec(), v).expect("input shape"))
        };
        vec![
            wrap(gx, inputs[0]),
            wrap(gd, inputs[1]),
            wrap(ga, inputs[2]),
            wrap(gb, inputs[3]),
            wrap(gc, inputs[4]),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{gs6_forward, GS6Params};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    fn loss(
        vals: &[Tensor<f64>],
        w: &Tensor<f64>,
        group: usize,
        disc: Discretization,
    ) -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|v| g.variable(v.clone())).collect();
        let y = selective_scan(
            &mut g,
            ids[0],
            ids[1],
            ids[2],
            ids[3],
            ids[4],
            group,
            disc,
            ScanMode::Parallel,
        )
        .unwrap();
        let wn = g.constant(w.clone());
        let p = g.mul(y, wn).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        let v = g.value(l).data()[0];
        (v, ids.iter().map(|&i| g.grad(i).unwrap().clone()).collect())
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (len, dim, n, group) = (6, 4, 3, 2);
        for disc in [Discretization::Euler, Discretization::Zoh] {
            let vals = vec![
                random(vec![len, dim], -1.0, 1.0, &mut rng),
                random(vec![len, dim / group], 0.05, 0.8, &mut rng),
                random(vec![dim / group, n], -3.0, -0.3, &mut rng),
                random(vec![len, n], -1.0, 1.0, &mut rng),
                random(vec![len, n], -1.0, 1.0, &mut rng),
            ];
            let w = random(vec![len, dim], -1.0, 1.0, &mut rng);
            let (_, grads) = loss(&vals, &w, group, disc);
            let h = 1e-5;
            for (vi, v) in vals.iter().enumerate() {
                for e in 0..v.numel() {
                    let mut plus = vals.clone();
                    plus[vi].data_mut()[e] += h;
                    let mut minus = vals.clone();
                    minus[vi].data_mut()[e] -= h;
                    let num = (loss(&plus, &w, group, disc).0 - loss(&minus, &w, group, disc).0)
                        / (2.0 * h);
                    let ana = grads[vi].data()[e];
                    let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
                    assert!(rel < 1e-6, "{disc:?} input {vi} entry {e}: {ana} vs {num}");
                }
            }
        }
    }

    #[test]
    fn layer_matches_plain_forward() {
        let mut ps = ParamStore::<f64>::new(3);
        let ids = GS6Ids::register(&mut ps, "m", 6, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(vec![9, 6], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let y = gs6_layer(
            &mut g,
            &ps,
            &ids,
            xn,
            Discretization::Euler,
            ScanMode::Parallel,
        )
        .unwrap();
        let p: GS6Params<f64> = ids.params(&ps);
        let plain = gs6_forward(
            &x.reshape(vec![1, 9, 6]).unwrap(),
            &p,
            Discretization::Euler,
            ScanMode::Parallel,
        )
        .unwrap();
        let diff = g
            .value(y)
            .clone()
            .reshape(vec![1, 9, 6])
            .unwrap()
            .max_abs_diff(&plain)
            .unwrap();
        assert!(diff < 1e-12);
    }
}
