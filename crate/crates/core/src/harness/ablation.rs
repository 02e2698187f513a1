use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::blocks::Structure;
use crate::error::{Error, Result};
use crate::network::{count_params_flops, Model, NetworkConfig, Task};
use crate::serialization::AxisSet;

use super::data::{generate, SyntheticSpec};
use super::train::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationFactor {
    Axes,
    Structure,
    Grouping,
    Prompt,
    Posemb,
}

impl AblationFactor {
    pub fn name(self) -> &'static str {
        match self {
            AblationFactor::Axes => "axes",
            AblationFactor::Structure => "structure",
            AblationFactor::Grouping => "grouping",
            AblationFactor::Prompt => "prompt",
            AblationFactor::Posemb => "posemb",
        }
    }

    pub fn levels(self) -> Vec<AblationLevel> {
        match self {
            AblationFactor::Axes => AxisSet::all_subsets()
                .into_iter()
                .map(AblationLevel::Axes)
                .collect(),
            AblationFactor::Structure => vec![
                AblationLevel::Structure(Structure::Parallel),
                AblationLevel::Structure(Structure::Chained),
            ],
            AblationFactor::Grouping => [1, 2, 3, 6, 9]
                .into_iter()
                .map(AblationLevel::Grouping)
                .collect(),
            AblationFactor::Prompt => {
                vec![AblationLevel::Prompt(false), AblationLevel::Prompt(true)]
            }
            AblationFactor::Posemb => {
                vec![AblationLevel::Posemb(false), AblationLevel::Posemb(true)]
            }
        }
    }
}

impl std::str::FromStr for AblationFactor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "axes" => AblationFactor::Axes,
            "structure" => AblationFactor::Structure,
            "grouping" => AblationFactor::Grouping,
            "prompt" => AblationFactor::Prompt,
            "posemb" => AblationFactor::Posemb,
            other => return Err(Error::Config(format!("unknown ablation factor `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationLevel {
    Axes(AxisSet),
    Structure(Structure),
    Grouping(usize),
    Prompt(bool),
    Posemb(bool),
}

impl AblationLevel {
    pub fn apply(self, config: &mut NetworkConfig) {
        match self {
            AblationLevel::Axes(a) => config.block.axes = a,
            AblationLevel::Structure(s) => config.block.structure = s,
            AblationLevel::Grouping(g) => {
                config.stages.iter_mut().for_each(|s| s.group = g);
            }
            AblationLevel::Prompt(on) => config.block.prompt = on,
            AblationLevel::Posemb(on) => config.block.posemb = on,
        }
    }
}

impl fmt::Display for AblationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on = |b: bool| if b { "on" } else { "off" };
        match self {
            AblationLevel::Axes(a) => write!(f, "{a}"),
            AblationLevel::Structure(Structure::Chained) => f.write_str("chained"),
            AblationLevel::Structure(Structure::Parallel) => f.write_str("parallel"),
            AblationLevel::Grouping(g) => write!(f, "g={g}"),
            AblationLevel::Prompt(b) | AblationLevel::Posemb(b) => f.write_str(on(*b)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    pub factor: AblationFactor,
    pub repetitions: usize,
    pub seed: u64,
    pub base: NetworkConfig,
    pub data: SyntheticSpec,
    pub train: TrainConfig,
}

impl AblationPlan {
    /// Toy recognition setup. The grouping factor uses an embedding width
    /// of 18 so every level divides every stage width.
    pub fn toy(factor: AblationFactor, seed: u64) -> Self {
        let data = SyntheticSpec::recognition(64, 4, seed);
        let mut base = NetworkConfig::toy(Task::Recognition, data.num_classes());
        base.seed = seed;
        if factor == AblationFactor::Grouping {
            base.embed_width = 18;
            base.stages[0].width = 18;
            base.stages[1].width = 36;
        }
        Self {
            factor,
            repetitions: 1,
            seed,
            base,
            data,
            train: TrainConfig {
                epochs: 5,
                seed,
                ..TrainConfig::default()
            },
        }
    }

    pub fn levels(&self) -> Vec<AblationLevel> {
        self.factor.levels()
    }

    pub fn config_for(&self, level: AblationLevel) -> NetworkConfig {
        let mut c = self.base.clone();
        level.apply(&mut c);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub factor: AblationFactor,
    pub level: String,
    pub repetition: usize,
    pub seed: u64,
    pub params: u64,
    pub flops: u64,
    pub final_loss: f64,
    pub accuracy: f64,
}

pub fn rows_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("factor,level,repetition,seed,params,flops,final_loss,accuracy\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.6},{:.6}",
            r.factor.name(),
            r.level,
            r.repetition,
            r.seed,
            r.params,
            r.flops,
            r.final_loss,
            r.accuracy
        );
    }
    s
}

/// Trains one model per level and repetition. Repetition `r` of every level
/// uses seed `plan.seed + r` for data, initialization and shuffling.
pub fn run_ablation(plan: &AblationPlan) -> Result<Vec<AblationRow>> {
    if plan.repetitions == 0 {
        return Err(Error::Config(
            "ablation needs at least one repetition".into(),
        ));
    }
    let mut rows = Vec::new();
    for rep in 0..plan.repetitions {
        let seed = plan.seed.wrapping_add(rep as u64);
        let data = generate(&SyntheticSpec {
            seed,
            ..plan.data.clone()
        })?;
        for level in plan.levels() {
            let mut config = plan.config_for(level);
            config.seed = seed;
            let cost = count_params_flops(&config, plan.data.points)?;
            let mut model = Model::<f32>::new(config)?;
            let report = train(
                &mut model,
                &data,
                &TrainConfig {
                    seed,
                    ..plan.train.clone()
                },
            )?;
            log::info!(
                "{} {level}: accuracy {:.4}",
                plan.factor.name(),
                report.final_metrics.overall_accuracy
            );
            rows.push(AblationRow {
                factor: plan.factor,
                level: level.to_string(),
                repetition: rep,
                seed,
                params: cost.params,
                flops: cost.flops,
                final_loss: report.log.last().map_or(f64::NAN, |e| e.loss),
                accuracy: report.final_metrics.overall_accuracy,
            });
        }
    }
    Ok(rows)
}
