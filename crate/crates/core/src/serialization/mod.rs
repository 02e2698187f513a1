//! Turning an unordered point set into causal sequences and back.
//!
//! [`expand`] sorts the points independently along each requested axis.
//! Each sorted sequence can then be given a learnable sorting prompt and
//! coordinate position embeddings ([`attach_prompt_and_positions`]).
//! [`merge`] drops the prompts, restores the original point order and
//! reduces the per-axis channels back to one feature vector per point.
//! [`hilbert_serialize`] is a space-filling-curve baseline.

mod hilbert;

pub use hilbert::{hilbert_index, hilbert_serialize, locality, HilbertOrder, HilbertVariant};

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Linear, Mlp};
use crate::numerics::{check_permutation, invert_permutation, Graph, NodeId, Scalar, Tensor};
use crate::params::ParamStore;

pub type Point = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    Z,
    Y,
    X,
}

impl Axis {
    /// Canonical merge order.
    pub const ALL: [Axis; 3] = [Axis::Z, Axis::Y, Axis::X];

    /// Column of this axis in an `(x, y, z)` coordinate.
    pub fn component(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

/// A subset of `{Z, Y, X}` kept in canonical `Z, Y, X` order. The empty set
/// means the points are processed as one unsorted sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct AxisSet {
    z: bool,
    y: bool,
    x: bool,
}

impl AxisSet {
    pub const NONE: AxisSet = AxisSet {
        z: false,
        y: false,
        x: false,
    };
    pub const ALL: AxisSet = AxisSet {
        z: true,
        y: true,
        x: true,
    };

    pub fn new(axes: &[Axis]) -> Self {
        let mut s = Self::NONE;
        for a in axes {
            match a {
                Axis::Z => s.z = true,
                Axis::Y => s.y = true,
                Axis::X => s.x = true,
            }
        }
        s
    }

    pub fn axes(self) -> Vec<Axis> {
        Axis::ALL
            .into_iter()
            .filter(|&a| self.contains(a))
            .collect()
    }

    pub fn contains(self, a: Axis) -> bool {
        match a {
            Axis::Z => self.z,
            Axis::Y => self.y,
            Axis::X => self.x,
        }
    }

    pub fn len(self) -> usize {
        self.z as usize + self.y as usize + self.x as usize
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    /// All eight subsets: `None`, the singletons, the pairs and the full set.
    pub fn all_subsets() -> Vec<AxisSet> {
        use Axis::*;
        [
            &[][..],
            &[X],
            &[Y],
            &[Z],
            &[X, Y],
            &[X, Z],
            &[Y, Z],
            &[X, Y, Z],
        ]
        .iter()
        .map(|a| AxisSet::new(a))
        .collect()
    }
}

impl fmt::Display for AxisSet {
    /// `none`, or axis letters in `x, y, z` order, e.g. `xz`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        for a in [Axis::X, Axis::Y, Axis::Z] {
            if self.contains(a) {
                f.write_str(a.name())?;
            }
        }
        Ok(())
    }
}

impl FromStr for AxisSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "none" || s.is_empty() {
            return Ok(Self::NONE);
        }
        let mut out = Self::NONE;
        for ch in s.chars() {
            let a = match ch {
                'x' => Axis::X,
                'y' => Axis::Y,
                'z' => Axis::Z,
                _ => return Err(Error::Config(format!("unknown axis `{ch}` in `{s}`"))),
            };
            if out.contains(a) {
                return Err(Error::Config(format!("axis `{ch}` repeated in `{s}`")));
            }
            out = AxisSet::new(&[out.axes(), vec![a]].concat());
        }
        Ok(out)
    }
}

impl Serialize for AxisSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for AxisSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The sort order of one axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AxisOrder {
    pub axis: Axis,
    /// `perm[i]` is the original index of the `i`-th point in sorted order
    pub perm: Vec<usize>,
    pub inv_perm: Vec<usize>,
}

/// Per-axis sort permutations of one point set.
#[derive(Debug, Clone, PartialEq)]
pub struct SerializedSet {
    pub coords: Vec<Point>,
    pub orders: Vec<AxisOrder>,
}

impl SerializedSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Coordinates in the sort order of `order`.
    pub fn sorted_coords(&self, order: &AxisOrder) -> Vec<Point> {
        order.perm.iter().map(|&i| self.coords[i]).collect()
    }
}

fn lex(a: &Point, b: &Point) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

/// Sort permutation along `axis`, keyed on the axis coordinate, then the
/// full coordinate lexicographically, then the original index.
pub fn sort_permutation(coords: &[Point], axis: Axis) -> Vec<usize> {
    let c = axis.component();
    let mut perm: Vec<usize> = (0..coords.len()).collect();
    perm.sort_by(|&i, &j| {
        coords[i][c]
            .total_cmp(&coords[j][c])
            .then_with(|| lex(&coords[i], &coords[j]))
            .then(i.cmp(&j))
    });
    perm
}

/// Sorts the points along every axis of `axes`.
pub fn expand(coords: &[Point], axes: AxisSet) -> Result<SerializedSet> {
    if axes.is_empty() {
        return Err(Error::Config("expand needs at least one axis".into()));
    }
    let orders = axes
        .axes()
        .into_iter()
        .map(|axis| {
            let perm = sort_permutation(coords, axis);
            let inv_perm = invert_permutation(&perm);
            AxisOrder {
                axis,
                perm,
                inv_perm,
            }
        })
        .collect();
    Ok(SerializedSet {
        coords: coords.to_vec(),
        orders,
    })
}

/// `ρ`: a two-layer perceptron from coordinates to width `D`.
#[derive(Debug, Clone)]
pub struct PositionEncoder {
    pub mlp: Mlp,
}

impl PositionEncoder {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            mlp: Mlp::new(ps, name, &[3, dim, dim], false),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        coords: &[Point],
    ) -> Result<NodeId> {
        let c = g.constant(coords_tensor(coords));
        self.mlp.forward(g, ps, c)
    }
}

pub fn coords_tensor<T: Scalar>(coords: &[Point]) -> Tensor<T> {
    Tensor::from_fn(vec![coords.len(), 3], |i| T::of(coords[i / 3][i % 3]))
}

/// Builds `[prompt + prompt_pos; t_1 + ρ(c_1); …; t_L + ρ(c_L)]`.
///
/// `seq` and `positions` are `[L, D]` in sorted order; `prompt` and
/// `prompt_pos` are `[1, D]`. Leaving out the prompt drops row 0; leaving
/// out `prompt_pos` or `positions` skips that addition.
pub fn attach_prompt_and_positions<T: Scalar>(
    g: &mut Graph<T>,
    seq: NodeId,
    prompt: Option<NodeId>,
    prompt_pos: Option<NodeId>,
    positions: Option<NodeId>,
) -> Result<NodeId> {
    let body = match positions {
        Some(p) => g.add(seq, p)?,
        None => seq,
    };
    let Some(prompt) = prompt else {
        return Ok(body);
    };
    let head = match prompt_pos {
        Some(p) => g.add(prompt, p)?,
        None => prompt,
    };
    g.concat_rows(&[head, body])
}

/// `γ`, the reduction applied after concatenating `k` axis blocks.
#[derive(Debug, Clone)]
pub enum Reduction {
    /// `silu(Linear(k·D → D))`
    Linear(Linear),
    /// Average of the `k` blocks; parameter-free.
    BlockMean,
}

impl Reduction {
    pub fn linear<T: Scalar>(
        ps: &mut ParamStore<T>,
        name: &str,
        blocks: usize,
        dim: usize,
    ) -> Self {
        Reduction::Linear(Linear::new(ps, name, blocks * dim, dim, true))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: NodeId,
        blocks: usize,
    ) -> Result<NodeId> {
        match self {
            Reduction::Linear(l) => {
                let y = l.forward(g, ps, x)?;
                g.silu(y)
            }
            Reduction::BlockMean => {
                let cols = g.value(x).dims2()?.1;
                if blocks == 0 || cols % blocks != 0 {
                    return Err(Error::Contract(format!(
                        "{cols} columns in {blocks} blocks"
                    )));
                }
                let w = cols / blocks;
                let mut acc = g.slice_cols(x, 0, w)?;
                for b in 1..blocks {
                    let part = g.slice_cols(x, b * w, (b + 1) * w)?;
                    acc = g.add(acc, part)?;
                }
                Ok(g.scale(acc, T::one() / T::of(blocks as f64)))
            }
        }
    }
}

/// Removes the prompt rows, restores original point order, concatenates the
/// axis blocks channel-wise in the order of `orders` and applies `γ`.
pub fn merge<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    processed: &[NodeId],
    orders: &[AxisOrder],
    has_prompt: bool,
    gamma: &Reduction,
) -> Result<NodeId> {
    if processed.len() != orders.len() || processed.is_empty() {
        return Err(Error::Contract(format!(
            "{} processed sequences for {} axis orders",
            processed.len(),
            orders.len()
        )));
    }
    let skip = has_prompt as usize;
    let len = orders[0].perm.len();
    let mut blocks = Vec::with_capacity(processed.len());
    for (&seq, order) in processed.iter().zip(orders) {
        let rows = g.value(seq).dims2()?.0;
        if rows != len + skip || order.perm.len() != len {
            return Err(Error::Contract(format!(
                "axis {} sequence has {rows} rows, expected {}",
                order.axis.name(),
                len + skip
            )));
        }
        check_permutation(&order.perm, len)?;
        let body = g.slice_rows(seq, skip, rows)?;
        blocks.push(g.scatter_rows(body, &order.perm)?);
    }
    let cat = if blocks.len() == 1 {
        blocks[0]
    } else {
        g.concat_cols(&blocks)?
    };
    gamma.forward(g, ps, cat, blocks.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_sorted_z() {
        let c = [[0.0, 0.0, 0.5], [0.0, 0.0, 0.1], [0.0, 0.0, 0.9]];
        assert_eq!(sort_permutation(&c, Axis::Z), vec![1, 0, 2]);
        assert_eq!(sort_permutation(&c, Axis::X), vec![1, 0, 2]);
    }

    #[test]
    fn identical_points_keep_index_order() {
        let c = vec![[0.3, 0.3, 0.3]; 5];
        for a in Axis::ALL {
            assert_eq!(sort_permutation(&c, a), (0..5).collect::<Vec<_>>());
        }
    }

    #[test]
    fn empty_axes_rejected() {
        assert!(matches!(
            expand(&[[0.0; 3]], AxisSet::NONE),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn axis_set_round_trip() {
        let subsets = AxisSet::all_subsets();
        assert_eq!(subsets.len(), 8);
        let names: Vec<String> = subsets.iter().map(|s| s.to_string()).collect();
        assert_eq!(names, ["none", "x", "y", "z", "xy", "xz", "yz", "xyz"]);
        for s in subsets {
            assert_eq!(s.to_string().parse::<AxisSet>().unwrap(), s);
        }
        assert_eq!(
            "zx".parse::<AxisSet>().unwrap().axes(),
            vec![Axis::Z, Axis::X]
        );
        assert!("xx".parse::<AxisSet>().is_err());
    }

    #[test]
    fn empty_cloud_is_single_prompt_row() {
        let mut g = Graph::<f64>::new();
        let seq = g.constant(Tensor::zeros(vec![0, 4]));
        let p = g.constant(Tensor::full(vec![1, 4], 1.0));
        let pp = g.constant(Tensor::full(vec![1, 4], 0.5));
        let out = attach_prompt_and_positions(&mut g, seq, Some(p), Some(pp), None).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 4]);
        assert!(g.value(out).data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn single_axis_merge_is_unsort() {
        let c = [[0.2, 0.0, 0.0], [0.1, 0.0, 0.0], [0.3, 0.0, 0.0]];
        let set = expand(&c, AxisSet::new(&[Axis::X])).unwrap();
        let mut g = Graph::<f64>::new();
        let ps = ParamStore::new(0);
        let seq = g.constant(Tensor::new(vec![3, 1], vec![10.0, 20.0, 30.0]).unwrap());
        let out = merge(
            &mut g,
            &ps,
            &[seq],
            &set.orders,
            false,
            &Reduction::BlockMean,
        )
        .unwrap();
        // sorted order is [1, 0, 2]
        assert_eq!(g.value(out).data(), &[20.0, 10.0, 30.0]);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let c = [[0.0; 3], [1.0; 3]];
        let set = expand(&c, AxisSet::new(&[Axis::X, Axis::Y])).unwrap();
        let mut g = Graph::<f64>::new();
        let ps = ParamStore::new(0);
        let a = g.constant(Tensor::zeros(vec![3, 2]));
        let b = g.constant(Tensor::zeros(vec![2, 2]));
        let err = merge(
            &mut g,
            &ps,
            &[a, b],
            &set.orders,
            true,
            &Reduction::BlockMean,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
