//! Cardinality reduction and recovery for point sets.
//!
//! [`Downsample`] picks centres by farthest point sampling, gathers each
//! centre's `K` nearest parents, runs a shared MLP on
//! `[feature, relative coordinate]` and max-pools over the neighbours.
//! [`Upsample`] interpolates child features back onto the parents with
//! inverse squared-distance weights over the 3 nearest children and adds a
//! skip branch.

use crate::error::{Error, Result};
use crate::layers::{Cost, Mlp};
use crate::numerics::{Graph, NodeId, Scalar, Tensor};
use crate::params::ParamStore;
use crate::serialization::Point;

/// Added to squared distances before inverting them.
pub const INTERPOLATION_EPS: f64 = 1e-8;

pub fn dist2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Index of the lexicographically smallest point (lowest index on ties).
/// Does not depend on the order the points are listed in, up to duplicates.
pub fn canonical_seed(coords: &[Point]) -> usize {
    (0..coords.len())
        .min_by(|&i, &j| {
            let (a, b) = (&coords[i], &coords[j]);
            a[0].total_cmp(&b[0])
                .then(a[1].total_cmp(&b[1]))
                .then(a[2].total_cmp(&b[2]))
                .then(i.cmp(&j))
        })
        .unwrap_or(0)
}

/// Greedy max-min selection of `m` points starting at `seed`. Ties pick
/// the lowest index.
pub fn fps(coords: &[Point], m: usize, seed: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if m == 0 || m > n {
        return Err(Error::Contract(format!("cannot sample {m} of {n} points")));
    }
    if seed >= n {
        return Err(Error::Index(format!(
            "seed {seed} out of range for {n} points"
        )));
    }
    let mut picked = Vec::with_capacity(m);
    let mut chosen = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut cur = seed;
    for _ in 0..m {
        picked.push(cur);
        chosen[cur] = true;
        let mut next = None;
        let mut far = f64::NEG_INFINITY;
        for i in 0..n {
            best[i] = best[i].min(dist2(&coords[i], &coords[cur]));
            if !chosen[i] && best[i] > far {
                far = best[i];
                next = Some(i);
            }
        }
        match next {
            Some(i) => cur = i,
            None => break,
        }
    }
    Ok(picked)
}

/// The `k` points of `points` nearest to `query`, ordered by
/// `(squared distance, index)`.
pub fn knn(points: &[Point], query: &Point, k: usize) -> Result<Vec<usize>> {
    if k > points.len() {
        return Err(Error::Contract(format!(
            "{k} neighbours requested from {} points",
            points.len()
        )));
    }
    let mut idx: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(p, query), i))
        .collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(idx.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Centres and neighbourhoods for one downsampling step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMap {
    pub centers: Vec<usize>,
    /// `neighbors[c]` are the `k` parent indices nearest to centre `c`
    pub neighbors: Vec<Vec<usize>>,
    pub rate: usize,
    pub k: usize,
}

impl SampleMap {
    /// `⌊L/rate⌋` FPS centres from `seed`, each with its `k` nearest parents.
    pub fn build(coords: &[Point], rate: usize, k: usize, seed: usize) -> Result<Self> {
        let n = coords.len();
        if rate == 0 || n / rate == 0 {
            return Err(Error::Contract(format!(
                "rate {rate} leaves no centres among {n} points"
            )));
        }
        if k == 0 || k > n {
            return Err(Error::Contract(format!(
                "K = {k} neighbours for {n} points"
            )));
        }
        let centers = fps(coords, n / rate, seed)?;
        let neighbors = centers
            .iter()
            .map(|&c| knn(coords, &coords[c], k))
            .collect::<Result<_>>()?;
        Ok(Self {
            centers,
            neighbors,
            rate,
            k,
        })
    }

    pub fn center_coords(&self, coords: &[Point]) -> Vec<Point> {
        self.centers.iter().map(|&c| coords[c]).collect()
    }
}

/// Shared MLP `H + 3 → 2H` followed by a max over each neighbourhood.
#[derive(Debug, Clone)]
pub struct Downsample {
    pub mlp: Mlp,
    pub width: usize,
}

impl Downsample {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            mlp: Mlp::new(ps, name, &[width + 3, 2 * width], true),
            width,
        }
    }

    /// `feats: [L, H]` → `[L/d, 2H]`, row `c` belonging to centre `c`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        coords: &[Point],
        feats: NodeId,
        map: &SampleMap,
    ) -> Result<NodeId> {
        let flat: Vec<usize> = map.neighbors.iter().flatten().copied().collect();
        let nf = g.select_rows(feats, &flat)?;
        let rel = Tensor::from_fn(vec![flat.len(), 3], |i| {
            let (slot, a) = (i / 3, i % 3);
            let c = map.centers[slot / map.k];
            T::of(coords[flat[slot]][a] - coords[c][a])
        });
        let rel = g.constant(rel);
        let x = g.concat_cols(&[nf, rel])?;
        let h = self.mlp.forward(g, ps, x)?;
        g.group_max(h, map.k)
    }

    pub fn cost(width: usize, centers: usize, k: usize) -> Cost {
        Mlp::cost(&[width + 3, 2 * width], centers * k)
            + Cost::new(0, (centers * k * 2 * width) as u64)
    }
}

/// Parent-to-child interpolation: `k` child indices and weights per parent.
pub fn interpolation_weights(
    child: &[Point],
    parent: &[Point],
) -> Result<(Vec<usize>, Vec<f64>, usize)> {
    if child.is_empty() {
        return Err(Error::Contract(
            "interpolation from an empty child set".into(),
        ));
    }
    let k = child.len().min(3);
    let mut index = Vec::with_capacity(parent.len() * k);
    let mut weight = Vec::with_capacity(parent.len() * k);
    for p in parent {
        let nn = knn(child, p, k)?;
        let d: Vec<f64> = nn.iter().map(|&c| dist2(&child[c], p)).collect();
        if d[0] == 0.0 {
            weight.push(1.0);
            weight.extend(std::iter::repeat_n(0.0, k - 1));
        } else {
            let inv: Vec<f64> = d.iter().map(|v| 1.0 / (v + INTERPOLATION_EPS)).collect();
            let s: f64 = inv.iter().sum();
            weight.extend(inv.iter().map(|v| v / s));
        }
        index.extend(nn);
    }
    Ok((index, weight, k))
}

/// `skip(parent) + Σ wᵢ · align(childᵢ)` over the 3 nearest children.
#[derive(Debug, Clone)]
pub struct Upsample {
    pub align: Mlp,
    pub skip: Mlp,
    pub width: usize,
}

impl Upsample {
    /// Child width `2H`, parent and output width `H`.
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            align: Mlp::new(ps, &format!("{name}.align"), &[2 * width, width], true),
            skip: Mlp::new(ps, &format!("{name}.skip"), &[width, width], true),
            width,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        child_coords: &[Point],
        child_feats: NodeId,
        parent_coords: &[Point],
        parent_skip: NodeId,
    ) -> Result<NodeId> {
        let (index, weight, k) = interpolation_weights(child_coords, parent_coords)?;
        let aligned = self.align.forward(g, ps, child_feats)?;
        let w: Vec<T> = weight.into_iter().map(T::of).collect();
        let interp = g.weighted_rows(aligned, &index, &w, k)?;
        let skip = self.skip.forward(g, ps, parent_skip)?;
        g.add(skip, interp)
    }

    pub fn cost(width: usize, children: usize, parents: usize) -> Cost {
        Mlp::cost(&[2 * width, width], children)
            + Mlp::cost(&[width, width], parents)
            + Cost::new(0, (2 * 3 * parents * width + parents * width) as u64)
    }
}
