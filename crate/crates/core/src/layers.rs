//! Dense layers shared by every module.

use std::ops::{Add, AddAssign, Mul};

use serde::Serialize;

use crate::error::Result;
use crate::numerics::{Graph, NodeId, Scalar};
use crate::params::{Init, ParamId, ParamStore};

/// Analytic parameter and FLOP tally.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl Cost {
    pub fn new(params: u64, flops: u64) -> Self {
        Self { params, flops }
    }
}

impl Add for Cost {
    type Output = Cost;

    fn add(self, rhs: Cost) -> Cost {
        Cost::new(self.params + rhs.params, self.flops + rhs.flops)
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, rhs: Cost) {
        *self = *self + rhs;
    }
}

impl Mul<u64> for Cost {
    type Output = Cost;

    fn mul(self, k: u64) -> Cost {
        Cost::new(self.params * k, self.flops * k)
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), Add::add)
    }
}

/// Matrix product flops: one multiply and one add per inner-product term.
pub fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m * k * n) as u64
}

/// `y = x·W (+ b)` with `W` stored as `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
    ) -> Self {
        let w = ps.add(format!("{name}.weight"), &[inp, out], Init::FanIn);
        let b = bias.then(|| ps.add(format!("{name}.bias"), &[out], Init::Zeros));
        Self { w, b, inp, out }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = g.param(ps, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(ps, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn cost(inp: usize, out: usize, bias: bool, rows: usize) -> Cost {
        let extra = if bias { out } else { 0 };
        Cost::new(
            (inp * out + extra) as u64,
            matmul_flops(rows, inp, out) + (rows * extra) as u64,
        )
    }
}

/// Linear layers with SiLU between them, optionally after the last one too.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_activation: bool,
}

impl Mlp {
    /// `widths = [in, hidden..., out]`; every layer has a bias.
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        final_activation: bool,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], true))
            .collect();
        Self {
            layers,
            final_activation,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        mut x: NodeId,
    ) -> Result<NodeId> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, ps, x)?;
            if i < last || self.final_activation {
                x = g.silu(x)?;
            }
        }
        Ok(x)
    }

    pub fn cost(widths: &[usize], rows: usize) -> Cost {
        widths
            .windows(2)
            .map(|w| Linear::cost(w[0], w[1], true, rows))
            .sum()
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out)
    }
}
