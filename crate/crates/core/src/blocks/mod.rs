//! Mamba units, bidirectional structures and the hexa-orientation block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{matmul_flops, Cost, Linear};
use crate::numerics::{Graph, NodeId, Scalar};
use crate::params::{Init, ParamId, ParamStore};
use crate::serialization::{
    attach_prompt_and_positions, expand, merge, Axis, AxisSet, Point, PositionEncoder, Reduction,
};
use crate::ssm::{gs6_layer, Discretization, GS6Ids, GS6Params, ScanMode};

/// Approximate flops per scan lane and step: discretisation, update and
/// output contraction.
pub const SCAN_FLOPS_PER_ELEMENT: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    /// The backward scan consumes the forward scan's output.
    #[default]
    Chained,
    /// Forward and backward scans both read the block input and are summed.
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeKind {
    /// `silu(Linear(k·D → D))`
    #[default]
    Linear,
    /// Parameter-free mean of the axis blocks.
    Mean,
}

fn default_true() -> bool {
    true
}

fn default_expand() -> usize {
    2
}

/// Everything one hexa-orientation block needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    /// Model width `D`.
    pub dim: usize,
    /// State size `N`.
    pub state: usize,
    /// Grouping rate `g`; must divide the inner width `expand · D`.
    pub group: usize,
    #[serde(default = "default_expand")]
    pub expand: usize,
    pub axes: AxisSet,
    #[serde(default)]
    pub structure: Structure,
    /// Adds the block input to the merged output.
    #[serde(default = "default_true")]
    pub residual: bool,
    /// Learnable sorting prompt per axis.
    #[serde(default = "default_true")]
    pub prompt: bool,
    /// Coordinate position embeddings (and the prompt's own embedding).
    #[serde(default = "default_true")]
    pub posemb: bool,
    /// Adds the forward output to the chained result.
    #[serde(default)]
    pub chained_skip: bool,
    #[serde(default)]
    pub merge: MergeKind,
    #[serde(default)]
    pub discretization: Discretization,
    #[serde(default)]
    pub scan: ScanMode,
}

impl BlockConfig {
    pub fn new(dim: usize, state: usize, group: usize) -> Self {
        Self {
            dim,
            state,
            group,
            expand: 2,
            axes: AxisSet::ALL,
            structure: Structure::Chained,
            residual: true,
            prompt: true,
            posemb: true,
            chained_skip: false,
            merge: MergeKind::Linear,
            discretization: Discretization::Euler,
            scan: ScanMode::Parallel,
        }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.state == 0 || self.expand == 0 {
            return Err(Error::Config("block widths must be positive".into()));
        }
        if self.group == 0 || !self.inner().is_multiple_of(self.group) {
            return Err(Error::Config(format!(
                "channel width D = {} is not divisible by grouping rate g = {}",
                self.inner(),
                self.group
            )));
        }
        Ok(())
    }

    /// Number of sequences processed: one per axis, or one unsorted.
    pub fn branches(&self) -> usize {
        self.axes.len().max(1)
    }
}

/// `x + out_proj(silu(gate) ⊙ GS6(value))` with `[value, gate] =
/// in_proj(rms_norm(x))`.
#[derive(Debug, Clone)]
pub struct MambaUnit {
    pub norm: ParamId,
    pub in_proj: Linear,
    pub gs6: GS6Ids,
    pub out_proj: Linear,
    pub dim: usize,
    pub inner: usize,
    pub discretization: Discretization,
    pub scan: ScanMode,
}

impl MambaUnit {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let (dim, inner) = (cfg.dim, cfg.inner());
        Ok(Self {
            norm: ps.add(format!("{name}.norm"), &[dim], Init::Ones),
            in_proj: Linear::new(ps, &format!("{name}.in_proj"), dim, 2 * inner, false),
            gs6: GS6Ids::register(ps, &format!("{name}.gs6"), inner, cfg.state, cfg.group)?,
            out_proj: Linear::new(ps, &format!("{name}.out_proj"), inner, dim, false),
            dim,
            inner,
            discretization: cfg.discretization,
            scan: cfg.scan,
        })
    }

    /// The residual branch alone: `M(x) − x`.
    pub fn branch<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = g.param(ps, self.norm);
        let h = g.rms_norm(x, w, T::of(1e-6))?;
        let h = self.in_proj.forward(g, ps, h)?;
        let value = g.slice_cols(h, 0, self.inner)?;
        let gate = g.slice_cols(h, self.inner, 2 * self.inner)?;
        let y = gs6_layer(g, ps, &self.gs6, value, self.discretization, self.scan)?;
        let gate = g.silu(gate)?;
        let y = g.mul(y, gate)?;
        self.out_proj.forward(g, ps, y)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let f = self.branch(g, ps, x)?;
        g.add(x, f)
    }

    pub fn cost(cfg: &BlockConfig, rows: usize) -> Cost {
        let (d, e, n, g) = (cfg.dim, cfg.inner(), cfg.state, cfg.group);
        let groups = e / g;
        let r = rows as u64;
        let norm = Cost::new(d as u64, 4 * r * d as u64);
        let gs6 = Cost::new(
            GS6Params::<f64>::count(e, n, g) as u64,
            2 * matmul_flops(rows, e, n)
                + matmul_flops(rows, e, groups)
                + 2 * r * groups as u64
                + SCAN_FLOPS_PER_ELEMENT * r * (e * n) as u64,
        );
        let gate = Cost::new(0, 5 * r * e as u64);
        norm + Linear::cost(d, 2 * e, false, rows)
            + gs6
            + gate
            + Linear::cost(e, d, false, rows)
            + Cost::new(0, r * d as u64)
    }
}

/// `y = flip(M_b(flip(M_f(x))))`, optionally plus `M_f(x)`.
pub fn chained_bidirectional<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    seq: NodeId,
    fwd: &MambaUnit,
    bwd: &MambaUnit,
    skip: bool,
) -> Result<NodeId> {
    let yf = fwd.forward(g, ps, seq)?;
    let r = g.flip_rows(yf)?;
    let yb = bwd.forward(g, ps, r)?;
    let y = g.flip_rows(yb)?;
    if skip {
        g.add(y, yf)
    } else {
        Ok(y)
    }
}

/// `x + F_f(x) + flip(F_b(flip(x)))` with `F = M − identity`.
pub fn parallel_bidirectional<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    seq: NodeId,
    fwd: &MambaUnit,
    bwd: &MambaUnit,
) -> Result<NodeId> {
    let ff = fwd.branch(g, ps, seq)?;
    let r = g.flip_rows(seq)?;
    let fb = bwd.branch(g, ps, r)?;
    let fb = g.flip_rows(fb)?;
    let y = g.add(seq, ff)?;
    g.add(y, fb)
}

#[derive(Debug, Clone)]
struct Branch {
    fwd: MambaUnit,
    bwd: MambaUnit,
    prompt: Option<ParamId>,
    prompt_pos: Option<ParamId>,
}

/// Serialise → prompt and positions → bidirectional scan per axis → merge.
#[derive(Debug, Clone)]
pub struct HexaBlock {
    pub config: BlockConfig,
    branches: Vec<Branch>,
    pos: Option<PositionEncoder>,
    gamma: Reduction,
}

impl HexaBlock {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, config: BlockConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let labels: Vec<&str> = if config.axes.is_empty() {
            vec!["none"]
        } else {
            config.axes.axes().into_iter().map(Axis::name).collect()
        };
        let mut branches = Vec::with_capacity(labels.len());
        for label in labels {
            let base = format!("{name}.{label}");
            branches.push(Branch {
                fwd: MambaUnit::new(ps, &format!("{base}.fwd"), &config)?,
                bwd: MambaUnit::new(ps, &format!("{base}.bwd"), &config)?,
                prompt: config
                    .prompt
                    .then(|| ps.add(format!("{base}.prompt"), &[1, d], Init::Uniform(0.02))),
                prompt_pos: (config.prompt && config.posemb)
                    .then(|| ps.add(format!("{base}.prompt_pos"), &[1, d], Init::Uniform(0.02))),
            });
        }
        let pos = config
            .posemb
            .then(|| PositionEncoder::new(ps, &format!("{name}.pos"), d));
        let gamma = match config.merge {
            MergeKind::Linear => {
                Reduction::linear(ps, &format!("{name}.gamma"), config.branches(), d)
            }
            MergeKind::Mean => Reduction::BlockMean,
        };
        Ok(Self {
            config,
            branches,
            pos,
            gamma,
        })
    }

    fn bidirectional<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        b: &Branch,
        seq: NodeId,
    ) -> Result<NodeId> {
        match self.config.structure {
            Structure::Chained => {
                chained_bidirectional(g, ps, seq, &b.fwd, &b.bwd, self.config.chained_skip)
            }
            Structure::Parallel => parallel_bidirectional(g, ps, seq, &b.fwd, &b.bwd),
        }
    }

    /// Maps `x: [L, D]` to `[L, D]`, row `i` still belonging to point `i`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        coords: &[Point],
        x: NodeId,
    ) -> Result<NodeId> {
        let (rows, cols) = g.value(x).dims2()?;
        if rows != coords.len() || cols != self.config.dim {
            return Err(crate::error::shape_err(
                "hexa block",
                g.value(x).shape(),
                &[coords.len(), self.config.dim],
            ));
        }
        let positions = match &self.pos {
            Some(p) => Some(p.forward(g, ps, coords)?),
            None => None,
        };
        let has_prompt = self.config.prompt;
        let prompt_nodes = |g: &mut Graph<T>, b: &Branch| {
            (
                b.prompt.map(|p| g.param(ps, p)),
                b.prompt_pos.map(|p| g.param(ps, p)),
            )
        };
        let merged = if self.config.axes.is_empty() {
            let b = &self.branches[0];
            let (pr, pp) = prompt_nodes(g, b);
            let seq = attach_prompt_and_positions(g, x, pr, pp, positions)?;
            let out = self.bidirectional(g, ps, b, seq)?;
            let body = g.slice_rows(out, has_prompt as usize, rows + has_prompt as usize)?;
            self.gamma.forward(g, ps, body, 1)?
        } else {
            let set = expand(coords, self.config.axes)?;
            let mut processed = Vec::with_capacity(set.orders.len());
            for (b, order) in self.branches.iter().zip(&set.orders) {
                let seq = g.gather_rows(x, &order.perm)?;
                let pos = match positions {
                    Some(p) => Some(g.gather_rows(p, &order.perm)?),
                    None => None,
                };
                let (pr, pp) = prompt_nodes(g, b);
                let seq = attach_prompt_and_positions(g, seq, pr, pp, pos)?;
                processed.push(self.bidirectional(g, ps, b, seq)?);
            }
            merge(g, ps, &processed, &set.orders, has_prompt, &self.gamma)?
        };
        if self.config.residual {
            g.add(x, merged)
        } else {
            Ok(merged)
        }
    }

    /// Analytic parameters and flops for `points` input points.
    pub fn cost(config: &BlockConfig, points: usize) -> Cost {
        let d = config.dim;
        let k = config.branches();
        let seq = points + config.prompt as usize;
        let mut c = Cost::default();
        for _ in 0..k {
            c += MambaUnit::cost(config, seq) * 2;
            if config.prompt {
                c += Cost::new(d as u64, 0);
            }
            if config.prompt && config.posemb {
                c += Cost::new(d as u64, d as u64);
            }
            if config.posemb {
                c += Cost::new(0, (points * d) as u64);
            }
            if config.structure == Structure::Parallel || config.chained_skip {
                c += Cost::new(0, (seq * d) as u64);
            }
        }
        if config.posemb {
            c += crate::layers::Mlp::cost(&[3, d, d], points);
        }
        c += match config.merge {
            MergeKind::Linear => {
                Linear::cost(k * d, d, true, points) + Cost::new(0, 4 * (points * d) as u64)
            }
            MergeKind::Mean => Cost::new(0, (k * points * d) as u64),
        };
        if config.residual {
            c += Cost::new(0, (points * d) as u64);
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![rows, cols], |_| rng.random_range(-1.0..1.0))
    }

    fn zero_out(ps: &mut ParamStore<f64>, unit: &MambaUnit) {
        ps.set(unit.out_proj.w, Tensor::zeros(vec![unit.inner, unit.dim]))
            .unwrap();
    }

    #[test]
    fn zero_out_projection_is_identity() {
        let mut ps = ParamStore::new(0);
        let cfg = BlockConfig::new(4, 3, 2);
        let u = MambaUnit::new(&mut ps, "u", &cfg).unwrap();
        zero_out(&mut ps, &u);
        let mut g = Graph::new();
        let x = g.constant(random(5, 4, 1));
        let y = u.forward(&mut g, &ps, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn single_token_is_finite() {
        let mut ps = ParamStore::new(0);
        let u = MambaUnit::new(&mut ps, "u", &BlockConfig::new(4, 3, 2)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(random(1, 4, 2));
        let y = u.forward(&mut g, &ps, x).unwrap();
        assert!(g.value(y).is_finite());
    }

    #[test]
    fn unit_cost_counts_store() {
        let cfg = BlockConfig::new(6, 4, 3);
        let mut ps = ParamStore::<f64>::new(0);
        MambaUnit::new(&mut ps, "u", &cfg).unwrap();
        assert_eq!(MambaUnit::cost(&cfg, 10).params as usize, ps.count());
    }

    #[test]
    fn block_cost_counts_store() {
        for axes in AxisSet::all_subsets() {
            for (prompt, posemb, merge) in [
                (true, true, MergeKind::Linear),
                (false, true, MergeKind::Mean),
                (true, false, MergeKind::Linear),
            ] {
                let mut cfg = BlockConfig::new(4, 2, 2);
                cfg.axes = axes;
                cfg.prompt = prompt;
                cfg.posemb = posemb;
                cfg.merge = merge;
                let mut ps = ParamStore::<f64>::new(0);
                HexaBlock::new(&mut ps, "b", cfg).unwrap();
                assert_eq!(
                    HexaBlock::cost(&cfg, 16).params as usize,
                    ps.count(),
                    "{axes}"
                );
            }
        }
    }

    #[test]
    fn indivisible_group_rejected() {
        let mut ps = ParamStore::<f64>::new(0);
        let err = MambaUnit::new(&mut ps, "u", &BlockConfig::new(3, 2, 4)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
