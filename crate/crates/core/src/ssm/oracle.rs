//! Independent reference computations for the selective SSM.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Scalar, Tensor};

use super::discretize::input_coefficient;
use super::{s6_parameters, Discretization, GS6Params};

/// Longest sequence the quadratic attention oracle will materialise.
pub const ATTENTION_MAX_LEN: usize = 64;

/// Materialises the causal mixing matrix of each channel:
/// `W[i, j] = Σ_n C_i[n] · exp(A[n] · Σ_{s=j+1..i} Δ_s) · B̄_j[n]` for
/// `j ≤ i`, zero above the diagonal. Returns `D` matrices of shape `[L, L]`.
pub fn attention_matrix_oracle<T: Scalar>(
    x: &Tensor<T>,
    p: &GS6Params<T>,
    disc: Discretization,
) -> Result<Vec<Tensor<T>>> {
    let [1, len, dim] = *x.shape() else {
        return Err(shape_err("attention oracle", x.shape(), &[1, 0, p.dim]));
    };
    if len > ATTENTION_MAX_LEN {
        return Err(Error::Contract(format!(
            "attention oracle is limited to L ≤ {ATTENTION_MAX_LEN}, got L = {len}"
        )));
    }
    let sp = s6_parameters(x, p)?;
    let (n, groups, g) = (p.state, p.groups(), p.group);
    let a = p.a();
    let mut out = Vec::with_capacity(dim);
    for d in 0..dim {
        let k = d / g;
        let dt = |t: usize| sp.delta.data()[t * groups + k];
        let mut w = vec![T::zero(); len * len];
        for i in 0..len {
            for j in 0..=i {
                let span: T = (j + 1..=i).map(dt).fold(T::zero(), |s, v| s + v);
                let mut acc = T::zero();
                for m in 0..n {
                    let av = a.data()[k * n + m];
                    let bbar = input_coefficient(dt(j), av, disc) * sp.b.data()[j * n + m];
                    acc = acc + sp.c.data()[i * n + m] * (av * span).exp() * bbar;
                }
                w[i * len + j] = acc;
            }
        }
        out.push(Tensor::new(vec![len, len], w)?);
    }
    Ok(out)
}

/// `y[:, d] = W_d · x[:, d]` for the matrices from [`attention_matrix_oracle`].
pub fn apply_attention<T: Scalar>(w: &[Tensor<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
    let [1, len, dim] = *x.shape() else {
        return Err(shape_err("apply_attention", x.shape(), &[1, 0, w.len()]));
    };
    if dim != w.len() {
        return Err(shape_err("apply_attention", x.shape(), &[1, len, w.len()]));
    }
    Ok(Tensor::from_fn(vec![1, len, dim], |idx| {
        let (i, d) = (idx / dim, idx % dim);
        (0..len).fold(T::zero(), |s, j| {
            s + w[d].data()[i * len + j] * x.data()[j * dim + d]
        })
    }))
}

/// Integrates `h'(t) = a ⊙ h(t) + b · u(t)` with classical RK4 from `h = 0`,
/// holding `u` at `inputs[k]` for a duration of `deltas[k]`. Each interval is
/// split into `substeps` equal RK4 steps. Returns the state at the end of
/// every interval.
pub fn rk4_piecewise_constant(
    a: &[f64],
    b: &[f64],
    inputs: &[f64],
    deltas: &[f64],
    substeps: usize,
) -> Vec<Vec<f64>> {
    assert_eq!(a.len(), b.len());
    assert_eq!(inputs.len(), deltas.len());
    let f = |h: &[f64], u: f64| -> Vec<f64> {
        h.iter()
            .zip(a)
            .zip(b)
            .map(|((h, a), b)| a * h + b * u)
            .collect()
    };
    let axpy = |h: &[f64], k: &[f64], s: f64| -> Vec<f64> {
        h.iter().zip(k).map(|(h, k)| h + s * k).collect()
    };
    let mut h = vec![0.0; a.len()];
    let mut out = Vec::with_capacity(inputs.len());
    for (&u, &dt) in inputs.iter().zip(deltas) {
        let step = dt / substeps as f64;
        for _ in 0..substeps {
            let k1 = f(&h, u);
            let k2 = f(&axpy(&h, &k1, step / 2.0), u);
            let k3 = f(&axpy(&h, &k2, step / 2.0), u);
            let k4 = f(&axpy(&h, &k3, step), u);
            for i in 0..h.len() {
                h[i] += step / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        out.push(h.clone());
    }
    out
}
