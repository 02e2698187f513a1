use crate::error::{shape_err, Error, Result};
use crate::numerics::{softplus, Scalar, Tensor};

use super::discretize::input_coefficient;
use super::params::check_grouping;
use super::{discretize, scan, Discretization, GS6Params, ScanMode};

/// Input-dependent step sizes and projections.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveParams<T> {
    /// `[B, L, D/g]`
    pub delta: Tensor<T>,
    /// `[B, L, N]`
    pub b: Tensor<T>,
    /// `[B, L, N]`
    pub c: Tensor<T>,
}

fn dims3<T: Scalar>(x: &Tensor<T>, p: &GS6Params<T>) -> Result<(usize, usize, usize)> {
    let [bs, len, dim] = *x.shape() else {
        return Err(shape_err("selective SSM input", x.shape(), &[0, 0, p.dim]));
    };
    if dim != p.dim {
        return Err(shape_err(
            "selective SSM input",
            x.shape(),
            &[bs, len, p.dim],
        ));
    }
    check_grouping(dim, p.group)?;
    Ok((bs, len, dim))
}

/// `Δ = softplus(x·W_Δ + Δ bias)`, `B = x·W_B`, `C = x·W_C`.
pub fn s6_parameters<T: Scalar>(x: &Tensor<T>, p: &GS6Params<T>) -> Result<SelectiveParams<T>> {
    let (bs, len, dim) = dims3(x, p)?;
    let groups = p.groups();
    let flat = x.clone().reshape(vec![bs * len, dim])?;
    let mut delta = flat.matmul(&p.w_delta)?;
    let bias = p.delta_bias.data();
    for (i, v) in delta.data_mut().iter_mut().enumerate() {
        *v = softplus(*v + bias[i % groups]);
    }
    Ok(SelectiveParams {
        delta: delta.reshape(vec![bs, len, groups])?,
        b: flat.matmul(&p.w_b)?.reshape(vec![bs, len, p.state])?,
        c: flat.matmul(&p.w_c)?.reshape(vec![bs, len, p.state])?,
    })
}

/// Grouped selective SSM on `x: [B, L, D]`; output has the same shape.
pub fn gs6_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &GS6Params<T>,
    disc: Discretization,
    mode: ScanMode,
) -> Result<Tensor<T>> {
    let sp = s6_parameters(x, p)?;
    let inputs = discretize(&sp.delta, &p.a(), &sp.b, &sp.c, x, p.group, disc)?;
    Ok(scan(&inputs, mode)?.y)
}

/// Plain (ungrouped) selective SSM written channel by channel with no
/// repeat step, using a step-by-step recurrence.
pub fn s6_reference<T: Scalar>(
    x: &Tensor<T>,
    p: &GS6Params<T>,
    disc: Discretization,
) -> Result<Tensor<T>> {
    if p.group != 1 {
        return Err(Error::Config(format!(
            "plain selective SSM needs grouping rate g = 1, got g = {}",
            p.group
        )));
    }
    let (bs, len, dim) = dims3(x, p)?;
    let n = p.state;
    let sp = s6_parameters(x, p)?;
    let a = p.a();
    let mut y = vec![T::zero(); bs * len * dim];
    for b in 0..bs {
        for d in 0..dim {
            let mut h = vec![T::zero(); n];
            for t in 0..len {
                let s = b * len + t;
                let dt = sp.delta.data()[s * dim + d];
                let xv = x.data()[s * dim + d];
                let mut acc = T::zero();
                for k in 0..n {
                    let av = a.data()[d * n + k];
                    let bb = input_coefficient(dt, av, disc) * sp.b.data()[s * n + k];
                    h[k] = (dt * av).exp() * h[k] + bb * xv;
                    acc = acc + sp.c.data()[s * n + k] * h[k];
                }
                y[s * dim + d] = acc;
            }
        }
    }
    Tensor::new(vec![bs, len, dim], y)
}
