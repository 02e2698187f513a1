use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{BlockConfig, HexaBlock};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};
use crate::params::ParamStore;
use crate::serialization::Point;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingOptions {
    pub lengths: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    pub block: BlockConfig,
}

impl Default for TimingOptions {
    fn default() -> Self {
        Self {
            lengths: vec![128, 256, 512, 1024, 2048, 4096, 8192],
            repeats: 3,
            seed: 0,
            block: BlockConfig::new(16, 8, 2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingRow {
    pub len: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
    /// Least-squares slope of `ln t` against `ln L`.
    pub slope: f64,
}

impl TimingReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("L,seconds\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6e}", r.len, r.seconds);
        }
        s
    }
}

/// Least-squares slope of `y` on `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

/// Wall time of one hexa-orientation block forward pass (no tape for the
/// backward pass is consumed) at each length, minimum over repeats.
pub fn time_forward(opts: &TimingOptions) -> Result<TimingReport> {
    if opts.lengths.len() < 2 {
        return Err(Error::Config("timing needs at least two lengths".into()));
    }
    let mut ps = ParamStore::<f32>::new(opts.seed);
    let block = HexaBlock::new(&mut ps, "timing", opts.block)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rows = Vec::with_capacity(opts.lengths.len());
    for &len in &opts.lengths {
        let coords: Vec<Point> = (0..len)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let x = Tensor::from_fn(vec![len, opts.block.dim], |_| {
            rng.random_range(-1.0f32..1.0)
        });
        let mut best = f64::INFINITY;
        for _ in 0..opts.repeats.max(1) {
            let start = Instant::now();
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let y = block.forward(&mut g, &ps, &coords, xn)?;
            std::hint::black_box(g.value(y));
            best = best.min(start.elapsed().as_secs_f64());
        }
        rows.push(TimingRow { len, seconds: best });
    }
    let lx: Vec<f64> = rows.iter().map(|r| (r.len as f64).ln()).collect();
    let ly: Vec<f64> = rows.iter().map(|r| r.seconds.max(1e-12).ln()).collect();
    Ok(TimingReport {
        slope: fit_slope(&lx, &ly),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let x: Vec<f64> = [1.0f64, 2.0, 4.0, 8.0].iter().map(|v| v.ln()).collect();
        let y: Vec<f64> = [1.0f64, 2.0, 4.0, 8.0]
            .iter()
            .map(|v| (3.0 * v * v).ln())
            .collect();
        assert!((fit_slope(&x, &y) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn one_row_per_length() {
        let opts = TimingOptions {
            lengths: vec![16, 32],
            repeats: 1,
            ..TimingOptions::default()
        };
        let r = time_forward(&opts).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.csv().lines().count(), 3);
    }
}
