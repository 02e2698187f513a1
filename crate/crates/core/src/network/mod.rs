//! Encoder/decoder assembly with recognition and segmentation heads.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, ManifestEntry};

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockConfig, HexaBlock, MergeKind, Structure};
use crate::error::{Error, Result};
use crate::layers::{Cost, Mlp};
use crate::numerics::{Graph, NodeId, Scalar, Tensor};
use crate::params::ParamStore;
use crate::sampling::{canonical_seed, Downsample, SampleMap, Upsample};
use crate::serialization::{coords_tensor, AxisSet, Point};
use crate::ssm::{Discretization, ScanMode};

/// Coordinates, optional per-point features and optional labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub coords: Vec<Point>,
    /// `L × G`, empty rows when `G = 0`
    pub features: Vec<Vec<f64>>,
    /// Class of the whole cloud.
    pub label: Option<usize>,
    /// Part label per point.
    pub point_labels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(coords: Vec<Point>) -> Self {
        let n = coords.len();
        Self {
            coords,
            features: vec![Vec::new(); n],
            label: None,
            point_labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.is_empty() {
            return Err(Error::Contract("point cloud has no points".into()));
        }
        if self.coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain(
                "point cloud has non-finite coordinates".into(),
            ));
        }
        let g = self.feature_dim();
        if self.features.len() != self.len() || self.features.iter().any(|f| f.len() != g) {
            return Err(Error::Contract("ragged feature rows".into()));
        }
        if let Some(pl) = &self.point_labels {
            if pl.len() != self.len() {
                return Err(Error::Contract(format!(
                    "{} part labels for {} points",
                    pl.len(),
                    self.len()
                )));
            }
        }
        Ok(())
    }

    /// The same cloud with points listed in the order `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            coords: perm.iter().map(|&i| self.coords[i]).collect(),
            features: perm.iter().map(|&i| self.features[i].clone()).collect(),
            label: self.label,
            point_labels: self
                .point_labels
                .as_ref()
                .map(|pl| perm.iter().map(|&i| pl[i]).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Recognition,
    Segmentation,
}

/// One encoder stage. `rate` and `k` configure the downsampling that
/// enters the stage and are ignored for the first stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub blocks: usize,
    pub width: usize,
    pub state: usize,
    pub group: usize,
    pub rate: usize,
    pub k: usize,
}

/// Switches shared by every hexa-orientation block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockOptions {
    pub axes: AxisSet,
    pub structure: Structure,
    pub prompt: bool,
    pub posemb: bool,
    pub residual: bool,
    pub chained_skip: bool,
    pub merge: MergeKind,
    pub discretization: Discretization,
    pub scan: ScanMode,
    pub expand: usize,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            axes: AxisSet::ALL,
            structure: Structure::Chained,
            prompt: true,
            posemb: true,
            residual: true,
            chained_skip: false,
            merge: MergeKind::Linear,
            discretization: Discretization::Euler,
            scan: ScanMode::Parallel,
            expand: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub task: Task,
    pub num_classes: usize,
    /// Per-point input feature width `G`.
    #[serde(default)]
    pub in_features: usize,
    /// Embedding width `H`, equal to the first stage width.
    pub embed_width: usize,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub block: BlockOptions,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkConfig {
    /// Two stages (32 → 64), one block each, `N = 8`, `g = 2`, `d = 4`, `K = 8`.
    pub fn toy(task: Task, num_classes: usize) -> Self {
        Self {
            task,
            num_classes,
            in_features: 0,
            embed_width: 32,
            stages: vec![
                StageConfig {
                    blocks: 1,
                    width: 32,
                    state: 8,
                    group: 2,
                    rate: 1,
                    k: 1,
                },
                StageConfig {
                    blocks: 1,
                    width: 64,
                    state: 8,
                    group: 2,
                    rate: 4,
                    k: 8,
                },
            ],
            block: BlockOptions::default(),
            seed: 0,
        }
    }

    /// Sets every stage's grouping rate.
    pub fn with_group(mut self, group: usize) -> Self {
        self.stages.iter_mut().for_each(|s| s.group = group);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .stages
            .first()
            .ok_or_else(|| Error::Config("at least one stage is required".into()))?;
        if first.width != self.embed_width {
            return Err(Error::Config(format!(
                "first stage width {} differs from embedding width {}",
                first.width, self.embed_width
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        for (i, w) in self.stages.windows(2).enumerate() {
            if w[1].width != 2 * w[0].width {
                return Err(Error::Config(format!(
                    "stage {} width {} must double stage {} width {}",
                    i + 1,
                    w[1].width,
                    i,
                    w[0].width
                )));
            }
            if w[1].rate == 0 || w[1].k == 0 {
                return Err(Error::Config(format!(
                    "stage {} needs positive rate and k",
                    i + 1
                )));
            }
        }
        for s in &self.stages {
            self.block_config(s).validate()?;
        }
        Ok(())
    }

    pub fn block_config(&self, s: &StageConfig) -> BlockConfig {
        let o = &self.block;
        BlockConfig {
            dim: s.width,
            state: s.state,
            group: s.group,
            expand: o.expand,
            axes: o.axes,
            structure: o.structure,
            residual: o.residual,
            prompt: o.prompt,
            posemb: o.posemb,
            chained_skip: o.chained_skip,
            merge: o.merge,
            discretization: o.discretization,
            scan: o.scan,
        }
    }

    /// Point count at each stage for an input of `points` points.
    pub fn stage_points(&self, points: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut n = points;
        for (i, s) in self.stages.iter().enumerate() {
            if i > 0 {
                n /= s.rate;
            }
            out.push(n);
        }
        out
    }
}

#[derive(Debug, Clone)]
struct EncoderStage {
    down: Option<Downsample>,
    blocks: Vec<HexaBlock>,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: Upsample,
    blocks: Vec<HexaBlock>,
}

/// Layer structure; parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    embed: Mlp,
    encoder: Vec<EncoderStage>,
    decoder: Vec<DecoderStage>,
    head: Mlp,
}

impl Network {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let h = config.embed_width;
        let embed = Mlp::new(ps, "embed", &[3 + config.in_features, h, h], false);
        let mut encoder = Vec::with_capacity(config.stages.len());
        for (i, s) in config.stages.iter().enumerate() {
            let down = (i > 0).then(|| Downsample::new(ps, &format!("enc{i}.down"), s.width / 2));
            let bc = config.block_config(s);
            let blocks = (0..s.blocks)
                .map(|j| HexaBlock::new(ps, &format!("enc{i}.block{j}"), bc))
                .collect::<Result<_>>()?;
            encoder.push(EncoderStage { down, blocks });
        }
        let mut decoder = Vec::new();
        let last = config.stages.last().expect("validated").width;
        let head = match config.task {
            Task::Recognition => Mlp::new(ps, "head", &[last, last, config.num_classes], false),
            Task::Segmentation => {
                for i in (0..config.stages.len() - 1).rev() {
                    let s = &config.stages[i];
                    let bc = config.block_config(s);
                    let blocks = (0..s.blocks)
                        .map(|j| HexaBlock::new(ps, &format!("dec{i}.block{j}"), bc))
                        .collect::<Result<_>>()?;
                    decoder.push(DecoderStage {
                        up: Upsample::new(ps, &format!("dec{i}.up"), s.width),
                        blocks,
                    });
                }
                Mlp::new(ps, "head", &[h, h, config.num_classes], false)
            }
        };
        Ok(Self {
            config,
            embed,
            encoder,
            decoder,
            head,
        })
    }

    /// `MLP([coords, features])`, `[L, H]`.
    pub fn embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        cloud: &PointCloud,
    ) -> Result<NodeId> {
        cloud.validate()?;
        if cloud.feature_dim() != self.config.in_features {
            return Err(Error::Config(format!(
                "cloud has {} features per point, network expects {}",
                cloud.feature_dim(),
                self.config.in_features
            )));
        }
        let xyz = coords_tensor::<T>(&cloud.coords);
        let x = if self.config.in_features == 0 {
            g.constant(xyz)
        } else {
            let c = g.constant(xyz);
            let f = g.constant(Tensor::from_fn(
                vec![cloud.len(), self.config.in_features],
                |i| T::of(cloud.features[i / self.config.in_features][i % self.config.in_features]),
            ));
            g.concat_cols(&[c, f])?
        };
        self.embed.forward(g, ps, x)
    }

    /// Encoder outputs per stage, with the coordinates of each stage.
    fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        cloud: &PointCloud,
    ) -> Result<Vec<(Vec<Point>, NodeId)>> {
        let mut x = self.embed(g, ps, cloud)?;
        let mut coords = cloud.coords.clone();
        let mut out = Vec::with_capacity(self.encoder.len());
        for (i, stage) in self.encoder.iter().enumerate() {
            if let Some(down) = &stage.down {
                let s = &self.config.stages[i];
                let map = SampleMap::build(&coords, s.rate, s.k, canonical_seed(&coords))?;
                x = down.forward(g, ps, &coords, x, &map)?;
                coords = map.center_coords(&coords);
            }
            for b in &stage.blocks {
                x = b.forward(g, ps, &coords, x)?;
            }
            out.push((coords.clone(), x));
        }
        Ok(out)
    }

    /// Class logits `[1, classes]` for recognition, per-point logits
    /// `[L, classes]` in input order for segmentation.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        cloud: &PointCloud,
    ) -> Result<NodeId> {
        let enc = self.encode(g, ps, cloud)?;
        match self.config.task {
            Task::Recognition => {
                let (_, x) = *enc.last().expect("validated");
                let pooled = g.mean_rows(x)?;
                self.head.forward(g, ps, pooled)
            }
            Task::Segmentation => {
                let (mut coords, mut x) = enc.last().cloned().expect("validated");
                for (dec, skip_stage) in self.decoder.iter().zip((0..enc.len() - 1).rev()) {
                    let (pc, skip) = &enc[skip_stage];
                    x = dec.up.forward(g, ps, &coords, x, pc, *skip)?;
                    coords = pc.clone();
                    for b in &dec.blocks {
                        x = b.forward(g, ps, &coords, x)?;
                    }
                }
                self.head.forward(g, ps, x)
            }
        }
    }

    /// Mean cross-entropy against the cloud's label(s).
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        cloud: &PointCloud,
    ) -> Result<(NodeId, NodeId)> {
        let logits = self.forward(g, ps, cloud)?;
        let labels = self.targets(cloud)?;
        let l = g.cross_entropy(logits, &labels)?;
        Ok((logits, l))
    }

    pub fn targets(&self, cloud: &PointCloud) -> Result<Vec<usize>> {
        let labels = match self.config.task {
            Task::Recognition => vec![cloud.label.ok_or_else(|| {
                Error::Contract("recognition sample without a class label".into())
            })?],
            Task::Segmentation => cloud
                .point_labels
                .clone()
                .ok_or_else(|| Error::Contract("segmentation sample without part labels".into()))?,
        };
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.num_classes) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {} classes",
                self.config.num_classes
            )));
        }
        Ok(labels)
    }
}

/// A network together with its parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub net: Network,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        let mut params = ParamStore::new(config.seed);
        let net = Network::new(&mut params, config)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.net.config
    }

    /// Logits for one cloud without keeping the tape.
    pub fn logits(&self, cloud: &PointCloud) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let y = self.net.forward(&mut g, &self.params, cloud)?;
        Ok(g.value(y).clone())
    }

    /// Predicted class (recognition) or class per point (segmentation).
    pub fn predict(&self, cloud: &PointCloud) -> Result<Vec<usize>> {
        let logits = self.logits(cloud)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                (0..row.len())
                    .max_by(|&a, &b| {
                        row[a]
                            .partial_cmp(&row[b])
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(b.cmp(&a))
                    })
                    .unwrap_or(0)
            })
            .collect())
    }
}

/// Analytic parameter count and forward flops for `points` input points.
pub fn count_params_flops(config: &NetworkConfig, points: usize) -> Result<Cost> {
    config.validate()?;
    let h = config.embed_width;
    let pts = config.stage_points(points);
    let mut c =
        Mlp::cost(&[3 + config.in_features, h, h], points) + Cost::new(0, (4 * points * h) as u64);
    for (i, s) in config.stages.iter().enumerate() {
        if i > 0 {
            c += Downsample::cost(s.width / 2, pts[i], s.k);
        }
        c += HexaBlock::cost(&config.block_config(s), pts[i]) * s.blocks as u64;
    }
    let last = config.stages.last().expect("validated");
    match config.task {
        Task::Recognition => {
            c += Cost::new(0, (pts[pts.len() - 1] * last.width) as u64);
            c += Mlp::cost(&[last.width, last.width, config.num_classes], 1);
        }
        Task::Segmentation => {
            for i in (0..config.stages.len() - 1).rev() {
                let s = &config.stages[i];
                c += Upsample::cost(s.width, pts[i + 1], pts[i]);
                c += HexaBlock::cost(&config.block_config(s), pts[i]) * s.blocks as u64;
            }
            c += Mlp::cost(&[h, h, config.num_classes], points);
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: Task) -> NetworkConfig {
        let mut c = NetworkConfig::toy(task, 3);
        c.embed_width = 8;
        c.stages[0].width = 8;
        c.stages[1].width = 16;
        c.stages[0].state = 4;
        c.stages[1].state = 4;
        c
    }

    #[test]
    fn counter_matches_store() {
        for task in [Task::Recognition, Task::Segmentation] {
            let cfg = small(task);
            let m = Model::<f64>::new(cfg.clone()).unwrap();
            assert_eq!(
                count_params_flops(&cfg, 64).unwrap().params as usize,
                m.params.count()
            );
        }
    }

    #[test]
    fn widths_must_double() {
        let mut c = small(Task::Recognition);
        c.stages[1].width = 12;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_json_round_trip() {
        let c = NetworkConfig::toy(Task::Segmentation, 2);
        let s = serde_json::to_string(&c).unwrap();
        let back: NetworkConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn segmentation_rows_match_points() {
        let cfg = small(Task::Segmentation);
        let m = Model::<f64>::new(cfg).unwrap();
        let coords: Vec<Point> = (0..17)
            .map(|i| [i as f64 * 0.05, (i * 7 % 5) as f64 * 0.1, 0.0])
            .collect();
        let logits = m.logits(&PointCloud::new(coords)).unwrap();
        assert_eq!(logits.shape(), &[17, 3]);
    }
}
