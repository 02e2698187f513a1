use crate::error::Result;
use crate::numerics::{Scalar, Tensor};

use super::{DiscretizedScanInputs, ScanMode};

/// Result of a scan: outputs plus every intermediate hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanOutput<T> {
    /// `[B, L, D]`
    pub y: Tensor<T>,
    /// `[B, L, D, N]`, `states[:, t]` is `h_t`
    pub states: Tensor<T>,
}

/// Hidden state at one position, `[B, D, N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanState<T> {
    pub h: Tensor<T>,
}

impl<T: Scalar> ScanOutput<T> {
    /// `h_L`, or the zero initial state for an empty sequence.
    pub fn final_state(&self) -> ScanState<T> {
        let s = self.states.shape();
        let (bs, len, w) = (s[0], s[1], s[2] * s[3]);
        let mut h = Vec::with_capacity(bs * w);
        for b in 0..bs {
            if len == 0 {
                h.extend(std::iter::repeat_n(T::zero(), w));
            } else {
                let off = (b * len + len - 1) * w;
                h.extend_from_slice(&self.states.data()[off..off + w]);
            }
        }
        ScanState {
            h: Tensor::new(vec![bs, s[2], s[3]], h).expect("consistent shape"),
        }
    }
}

pub fn scan<T: Scalar>(inputs: &DiscretizedScanInputs<T>, mode: ScanMode) -> Result<ScanOutput<T>> {
    match mode {
        ScanMode::Sequential => scan_sequential(inputs),
        ScanMode::Parallel => scan_parallel(inputs),
    }
}

/// `h_t = Ā_t ⊙ h_{t−1} + (B̄x)_t` from `h_0 = 0`, one step at a time.
pub fn scan_sequential<T: Scalar>(inputs: &DiscretizedScanInputs<T>) -> Result<ScanOutput<T>> {
    let (bs, len, dim, n) = inputs.dims();
    let w = dim * n;
    let (a, bx) = (inputs.a_bar.data(), inputs.bx.data());
    let mut states = vec![T::zero(); bs * len * w];
    for b in 0..bs {
        let mut h = vec![T::zero(); w];
        for t in 0..len {
            let off = (b * len + t) * w;
            for (i, hv) in h.iter_mut().enumerate() {
                *hv = a[off + i] * *hv + bx[off + i];
            }
            states[off..off + w].copy_from_slice(&h);
        }
    }
    finish(inputs, states)
}

/// Lanes scanned together; keeps the working set of one tile in cache.
const LANE_TILE: usize = 16;

/// Same recurrence via a Blelloch scan over `(Ā, B̄x)` pairs. The sequence
/// is padded to a power of two with the identity `(1, 0)`; the combination
/// tree depends only on the length, so results are reproducible. Lanes are
/// independent and processed in tiles of [`LANE_TILE`].
pub fn scan_parallel<T: Scalar>(inputs: &DiscretizedScanInputs<T>) -> Result<ScanOutput<T>> {
    let (bs, len, dim, n) = inputs.dims();
    let w = dim * n;
    let p = len.next_power_of_two();
    let mut states = vec![T::zero(); bs * len * w];
    let mut a = vec![T::one(); p * LANE_TILE];
    let mut b = vec![T::zero(); p * LANE_TILE];
    for batch in 0..bs {
        let base = batch * len * w;
        let (a0, b0) = (
            &inputs.a_bar.data()[base..base + len * w],
            &inputs.bx.data()[base..base + len * w],
        );
        let out = &mut states[base..base + len * w];
        for lo in (0..w).step_by(LANE_TILE) {
            let tw = LANE_TILE.min(w - lo);
            for t in 0..len {
                a[t * tw..(t + 1) * tw].copy_from_slice(&a0[t * w + lo..t * w + lo + tw]);
                b[t * tw..(t + 1) * tw].copy_from_slice(&b0[t * w + lo..t * w + lo + tw]);
            }
            a[len * tw..p * tw].iter_mut().for_each(|v| *v = T::one());
            b[len * tw..p * tw].iter_mut().for_each(|v| *v = T::zero());
            exclusive_scan(&mut a[..p * tw], &mut b[..p * tw], p, tw);
            // inclusive h_t = Ā_t · (exclusive prefix applied to h_0 = 0) + (B̄x)_t
            for t in 0..len {
                for l in 0..tw {
                    let i = t * w + lo + l;
                    out[i] = a0[i] * b[t * tw + l] + b0[i];
                }
            }
        }
    }
    finish(inputs, states)
}

/// In-place exclusive scan of `p` rows (a power of two) of `w` lanes each.
fn exclusive_scan<T: Scalar>(a: &mut [T], b: &mut [T], p: usize, w: usize) {
    if p <= 1 {
        a[..w].iter_mut().for_each(|v| *v = T::one());
        b[..w].iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    // up-sweep: node j accumulates (left subtree) ∘ (right subtree)
    let mut half = 1;
    while half < p {
        let stride = 2 * half;
        for k in (0..p).step_by(stride) {
            let (i, j) = (k + half - 1, k + stride - 1);
            let (al, ar) = rows_mut(a, i, j, w);
            let (bl, br) = rows_mut(b, i, j, w);
            for l in 0..w {
                br[l] = ar[l] * bl[l] + br[l];
                ar[l] = al[l] * ar[l];
            }
        }
        half = stride;
    }
    a[(p - 1) * w..].iter_mut().for_each(|v| *v = T::one());
    b[(p - 1) * w..].iter_mut().for_each(|v| *v = T::zero());
    // down-sweep: left child takes the parent prefix, right child takes
    // (parent prefix) ∘ (old left subtree total)
    let mut half = p / 2;
    while half >= 1 {
        let stride = 2 * half;
        for k in (0..p).step_by(stride) {
            let (i, j) = (k + half - 1, k + stride - 1);
            let (al, ar) = rows_mut(a, i, j, w);
            let (bl, br) = rows_mut(b, i, j, w);
            for l in 0..w {
                let (ta, tb) = (al[l], bl[l]);
                al[l] = ar[l];
                bl[l] = br[l];
                br[l] = ta * br[l] + tb;
                ar[l] = ar[l] * ta;
            }
        }
        half /= 2;
    }
}

/// Disjoint mutable rows `i < j`.
fn rows_mut<T>(buf: &mut [T], i: usize, j: usize, w: usize) -> (&mut [T], &mut [T]) {
    let (lo, hi) = buf.split_at_mut(j * w);
    (&mut lo[i * w..(i + 1) * w], &mut hi[..w])
}

fn finish<T: Scalar>(inputs: &DiscretizedScanInputs<T>, states: Vec<T>) -> Result<ScanOutput<T>> {
    let (bs, len, dim, n) = inputs.dims();
    let c = inputs.c.data();
    let mut y = Vec::with_capacity(bs * len * dim);
    for s in 0..bs * len {
        let cs = &c[s * n..(s + 1) * n];
        for d in 0..dim {
            let h = &states[(s * dim + d) * n..(s * dim + d + 1) * n];
            let mut acc = T::zero();
            for (cv, hv) in cs.iter().zip(h) {
                acc = acc + *cv * *hv;
            }
            y.push(acc);
        }
    }
    Ok(ScanOutput {
        y: Tensor::new(vec![bs, len, dim], y)?,
        states: Tensor::new(vec![bs, len, dim, n], states)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inputs(
        bs: usize,
        len: usize,
        dim: usize,
        n: usize,
        seed: u64,
    ) -> DiscretizedScanInputs<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = vec![bs, len, dim, n];
        DiscretizedScanInputs::new(
            Tensor::from_fn(shape.clone(), |_| rng.random_range(0.05..0.99)),
            Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)),
            Tensor::from_fn(vec![bs, len, n], |_| rng.random_range(-1.0..1.0)),
        )
        .unwrap()
    }

    fn accumulator(xs: &[f64]) -> DiscretizedScanInputs<f64> {
        let l = xs.len();
        DiscretizedScanInputs::new(
            Tensor::full(vec![1, l, 1, 1], 1.0),
            Tensor::new(vec![1, l, 1, 1], xs.to_vec()).unwrap(),
            Tensor::full(vec![1, l, 1], 1.0),
        )
        .unwrap()
    }

    #[test]
    fn zero_input_zero_output() {
        let mut inp = inputs(2, 5, 3, 2, 0);
        inp.bx = Tensor::zeros(inp.bx.shape().to_vec());
        for mode in [ScanMode::Sequential, ScanMode::Parallel] {
            assert!(scan(&inp, mode).unwrap().y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_step() {
        let inp = inputs(1, 1, 2, 3, 1);
        let seq = scan_sequential(&inp).unwrap();
        for d in 0..2 {
            let expect: f64 = (0..3)
                .map(|k| inp.c.data()[k] * inp.bx.data()[d * 3 + k])
                .sum();
            assert_eq!(seq.y.data()[d], expect);
        }
        assert_eq!(scan_parallel(&inp).unwrap(), seq);
    }

    #[test]
    fn prefix_sums() {
        let xs = [3.0, -1.0, 4.0, 1.0, -5.0, 9.0, 2.0];
        let expect = [3.0, 2.0, 6.0, 7.0, 2.0, 11.0, 13.0];
        for mode in [ScanMode::Sequential, ScanMode::Parallel] {
            assert_eq!(scan(&accumulator(&xs), mode).unwrap().y.data(), &expect);
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        for (seed, len) in [1usize, 2, 3, 7, 8, 9, 31, 64, 128].iter().enumerate() {
            let inp = inputs(2, *len, 4, 3, seed as u64);
            let s = scan_sequential(&inp).unwrap();
            let p = scan_parallel(&inp).unwrap();
            assert!(s.y.max_abs_diff(&p.y).unwrap() < 1e-12, "L = {len}");
            assert!(s.states.max_abs_diff(&p.states).unwrap() < 1e-12);
        }
    }

    #[test]
    fn final_state_is_last_row() {
        let inp = inputs(2, 4, 2, 2, 9);
        let out = scan_sequential(&inp).unwrap();
        let h = out.final_state().h;
        assert_eq!(h.shape(), &[2, 2, 2]);
        assert_eq!(h.at(&[1, 1, 0]), out.states.at(&[1, 3, 1, 0]));
    }

    #[test]
    fn empty_sequence() {
        let inp = inputs(1, 0, 2, 2, 0);
        let out = scan_parallel(&inp).unwrap();
        assert_eq!(out.y.shape(), &[1, 0, 2]);
        assert!(out.final_state().h.data().iter().all(|&v| v == 0.0));
    }
}
