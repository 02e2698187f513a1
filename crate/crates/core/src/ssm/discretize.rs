use crate::error::{shape_err, Error, Result};
use crate::numerics::{Scalar, Tensor};

use super::Discretization;

/// Discretises one diagonal entry: returns `(Ā, B̄)` for state coefficient
/// `a`, step `delta` and input coefficient `b`.
///
/// `delta == 0` yields the limit `(1, 0)`; negative or non-finite steps are
/// rejected.
pub fn zoh_discretize<T: Scalar>(a: T, delta: T, b: T, mode: Discretization) -> Result<(T, T)> {
    if !(delta >= T::zero()) || !delta.is_finite() {
        return Err(Error::Domain(format!(
            "step size Δ = {delta} must be positive"
        )));
    }
    Ok(((delta * a).exp(), input_coefficient(delta, a, mode) * b))
}

/// The factor multiplying `B` in `B̄`.
#[inline]
pub(crate) fn input_coefficient<T: Scalar>(delta: T, a: T, mode: Discretization) -> T {
    match mode {
        Discretization::Euler => delta,
        Discretization::Zoh => {
            if a.is_zero() {
                delta
            } else {
                (delta * a).exp_m1() / a
            }
        }
    }
}

/// Partial derivatives of [`input_coefficient`] with respect to `(Δ, a)`.
#[inline]
pub(crate) fn input_coefficient_grad<T: Scalar>(delta: T, a: T, mode: Discretization) -> (T, T) {
    match mode {
        Discretization::Euler => (T::one(), T::zero()),
        Discretization::Zoh => {
            let e = (delta * a).exp();
            if a.is_zero() {
                (T::one(), delta * delta / T::of(2.0))
            } else {
                (e, (delta * a * e - (delta * a).exp_m1()) / (a * a))
            }
        }
    }
}

/// Per-step recurrence coefficients, all at full channel width:
/// `h_t = Ā_t ⊙ h_{t−1} + (B̄x)_t`, `y_t = ⟨C_t, h_t⟩` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedScanInputs<T> {
    /// `[B, L, D, N]`, entries in `(0, 1]`
    pub a_bar: Tensor<T>,
    /// `[B, L, D, N]`, `B̄` already multiplied by the channel input
    pub bx: Tensor<T>,
    /// `[B, L, N]`
    pub c: Tensor<T>,
}

impl<T: Scalar> DiscretizedScanInputs<T> {
    pub fn new(a_bar: Tensor<T>, bx: Tensor<T>, c: Tensor<T>) -> Result<Self> {
        if a_bar.rank() != 4 || a_bar.shape() != bx.shape() {
            return Err(shape_err("scan inputs", a_bar.shape(), bx.shape()));
        }
        let s = a_bar.shape();
        if c.shape() != [s[0], s[1], s[3]] {
            return Err(shape_err("scan inputs", s, c.shape()));
        }
        Ok(Self { a_bar, bx, c })
    }

    /// `(B, L, D, N)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.a_bar.shape();
        (s[0], s[1], s[2], s[3])
    }
}

/// Forms `Ā`, `B̄` at the grouped width `D/g`, repeats each group `g` times
/// along channels and multiplies `B̄` by `x`.
///
/// * `delta`: `[B, L, D/g]`
/// * `a`: `[D/g, N]`, the (negative) diagonal state coefficients
/// * `b`, `c`: `[B, L, N]`
/// * `x`: `[B, L, D]`
pub fn discretize<T: Scalar>(
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    x: &Tensor<T>,
    group: usize,
    mode: Discretization,
) -> Result<DiscretizedScanInputs<T>> {
    let [bs, len, dim] = *x.shape() else {
        return Err(shape_err("discretize", x.shape(), &[0, 0, 0]));
    };
    let (groups, n) = a.dims2()?;
    if group == 0 || dim % group != 0 || dim / group != groups {
        return Err(Error::Config(format!(
            "channel width D = {dim} with grouping rate g = {group} does not match A with {groups} rows"
        )));
    }
    if delta.shape() != [bs, len, groups] {
        return Err(shape_err("discretize Δ", delta.shape(), &[bs, len, groups]));
    }
    for t in [b, c] {
        if t.shape() != [bs, len, n] {
            return Err(shape_err("discretize B/C", t.shape(), &[bs, len, n]));
        }
    }
    if let Some(bad) = delta
        .data()
        .iter()
        .find(|v| !(**v >= T::zero()) || !v.is_finite())
    {
        return Err(Error::Domain(format!(
            "step size Δ = {bad} must be positive"
        )));
    }

    // Δ ⊗ A and Δ ⊗ B at the grouped width
    let steps = bs * len;
    let mut a_grp = Vec::with_capacity(steps * groups * n);
    let mut b_grp = Vec::with_capacity(steps * groups * n);
    for s in 0..steps {
        let brow = &b.data()[s * n..(s + 1) * n];
        for k in 0..groups {
            let dt = delta.data()[s * groups + k];
            let arow = &a.data()[k * n..(k + 1) * n];
            for (&av, &bv) in arow.iter().zip(brow) {
                a_grp.push((dt * av).exp());
                b_grp.push(input_coefficient(dt, av, mode) * bv);
            }
        }
    }

    // Repeat(·, g) along channels, then B̄ ⊙ x
    let mut a_bar = Vec::with_capacity(steps * dim * n);
    let mut bx = Vec::with_capacity(steps * dim * n);
    for s in 0..steps {
        for d in 0..dim {
            let k = d / group;
            let xv = x.data()[s * dim + d];
            let off = (s * groups + k) * n;
            a_bar.extend_from_slice(&a_grp[off..off + n]);
            bx.extend(b_grp[off..off + n].iter().map(|&bb| bb * xv));
        }
    }
    DiscretizedScanInputs::new(
        Tensor::new(vec![bs, len, dim, n], a_bar)?,
        Tensor::new(vec![bs, len, dim, n], bx)?,
        c.clone(),
    )
}
