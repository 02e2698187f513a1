use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gs6::harness::{
    self, AblationFactor, AblationPlan, CheckOptions, GradcheckOptions, RunManifest, Suite,
    SyntheticSpec, TimingOptions, TrainConfig,
};
use gs6::network::{load_checkpoint, save_checkpoint, Model, NetworkConfig, Task};
use gs6::numerics::{Precision, Scalar};
use gs6::serialization::{expand, hilbert_serialize, locality, Axis, AxisSet, HilbertVariant};
use gs6::Error;

#[derive(Parser)]
#[command(
    name = "gs6",
    version,
    about = "Grouped selective state space models on point clouds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the scan against its oracles.
    ScanCheck(ScanCheckArgs),
    /// Compare tape gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the serialization order of a point file.
    Serialize(SerializeArgs),
    /// Train on a synthetic dataset and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Run an ablation and write a comparison CSV.
    Ablate(AblateArgs),
    /// Time the block forward pass over sequence lengths.
    Timing(TimingArgs),
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse()
}

fn parse_size(s: &str) -> Result<usize, String> {
    let s = s.trim();
    let s = s
        .strip_prefix("L=")
        .or_else(|| s.strip_prefix("l="))
        .unwrap_or(s);
    s.parse()
        .map_err(|_| format!("`{s}` is not a sequence length"))
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    ParallelScan,
    RepeatEquivalence,
    AttentionMatrix,
    ZohRk4,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::ParallelScan => Suite::ParallelScan,
            SuiteArg::RepeatEquivalence => Suite::RepeatEquivalence,
            SuiteArg::AttentionMatrix => Suite::AttentionMatrix,
            SuiteArg::ZohRk4 => Suite::ZohRk4,
        }
    }
}

#[derive(Args)]
struct ScanCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated sequence lengths, e.g. `1,7,8,128` or `L=1`.
    #[arg(long, value_delimiter = ',', value_parser = parse_size, default_values_t = vec![1, 7, 8, 32, 128])]
    sizes: Vec<usize>,
    /// Random cases per suite.
    #[arg(long, default_value_t = 50)]
    cases: usize,
    #[arg(long, env = "GS6_PRECISION", default_value = "64", value_parser = parse_precision)]
    precision: Precision,
    #[arg(long, hide = true)]
    inject_fault: Option<SuiteArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Recognition,
    Segmentation,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Recognition => Task::Recognition,
            TaskArg::Segmentation => Task::Segmentation,
        }
    }
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "recognition")]
    task: TaskArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Entries checked per parameter tensor.
    #[arg(long, default_value_t = 4)]
    per_group: usize,
    #[arg(long, default_value_t = 32)]
    points: usize,
    /// Corrupts the first analytic gradient tensor.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Axes,
    Hilbert,
    TransHilbert,
}

#[derive(Args)]
struct SerializeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "axes")]
    method: MethodArg,
    /// Cell size of the curve grid.
    #[arg(long)]
    grid_size: Option<f64>,
    /// CSV destination; standard output if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "recognition")]
    task: TaskArg,
    #[arg(long, default_value_t = 64)]
    points: usize,
    /// Clouds per class.
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
}

impl DataArgs {
    fn spec(&self, seed: u64) -> SyntheticSpec {
        let mut s = match self.task {
            TaskArg::Recognition => SyntheticSpec::recognition(self.points, self.samples, seed),
            TaskArg::Segmentation => SyntheticSpec::segmentation(self.points, self.samples, seed),
        };
        s.noise = self.noise;
        s
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop early at this train accuracy; exit 1 if it is never reached.
    #[arg(long)]
    target: Option<f64>,
    /// Network configuration JSON; the toy network if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-epoch CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "GS6_PRECISION", default_value = "32", value_parser = parse_precision)]
    precision: Precision,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Point file to label instead of the synthetic dataset.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Seed for a fresh synthetic set; the training set if omitted.
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long, env = "GS6_PRECISION", default_value = "32", value_parser = parse_precision)]
    precision: Precision,
}

#[derive(Clone, Copy, ValueEnum)]
enum FactorArg {
    Axes,
    Structure,
    Grouping,
    Prompt,
    Posemb,
}

impl From<FactorArg> for AblationFactor {
    fn from(f: FactorArg) -> Self {
        match f {
            FactorArg::Axes => AblationFactor::Axes,
            FactorArg::Structure => AblationFactor::Structure,
            FactorArg::Grouping => AblationFactor::Grouping,
            FactorArg::Prompt => AblationFactor::Prompt,
            FactorArg::Posemb => AblationFactor::Posemb,
        }
    }
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    factor: FactorArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    repetitions: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    samples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TimingArgs {
    #[arg(long, value_delimiter = ',', value_parser = parse_size,
          default_values_t = vec![128, 256, 512, 1024, 2048, 4096, 8192])]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Process outcome short of an error.
enum Outcome {
    Pass,
    CheckFailed,
}

fn write_output(path: Option<&Path>, text: &str) -> gs6::Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn scan_check(a: ScanCheckArgs) -> gs6::Result<Outcome> {
    let opts = CheckOptions {
        seed: a.seed,
        sizes: a.sizes,
        cases: a.cases,
        precision: a.precision,
        inject_fault: a.inject_fault.map(Suite::from),
        ..CheckOptions::default()
    };
    let report = harness::run_scan_checks(&Suite::ALL, &opts)?;
    for s in &report.suites {
        println!(
            "{:<20} {:>4} cases  max deviation {:.3e}  tolerance {:.0e}  {}",
            s.suite.name(),
            s.cases,
            s.max_deviation,
            s.tolerance,
            if s.passed() { "ok" } else { "FAILED" }
        );
        if !s.passed() {
            if let Some(c) = &s.worst {
                println!("  failing case: {c}");
            }
            for n in &s.notes {
                println!("  {n}");
            }
        }
    }
    Ok(if report.passed() {
        Outcome::Pass
    } else {
        Outcome::CheckFailed
    })
}

fn gradcheck_cmd(a: GradcheckArgs) -> gs6::Result<Outcome> {
    let task = Task::from(a.task);
    let spec = match task {
        Task::Recognition => SyntheticSpec::recognition(a.points, 1, a.seed),
        Task::Segmentation => SyntheticSpec::segmentation(a.points, 1, a.seed),
    };
    let data = harness::generate(&spec)?;
    let mut config = NetworkConfig::toy(task, spec.num_classes());
    config.seed = a.seed;
    let mut model = Model::<f64>::new(config)?;
    let opts = GradcheckOptions {
        tolerance: a.tolerance,
        per_group: a.per_group,
        seed: a.seed,
        ..GradcheckOptions::default()
    };
    let cloud = &data.clouds[0];
    let mut analytic = harness::analytic_gradients(&model, cloud)?;
    if a.inject_fault {
        if let Some(t) = analytic.first_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v * 1.01 + 1e-3);
        }
    }
    let report = harness::compare_gradients(&mut model, cloud, &analytic, &opts)?;
    for g in &report.groups {
        println!(
            "{:<40} {:>3} checked  max rel {:.3e}",
            g.name, g.checked, g.max_rel
        );
    }
    let failures = report.failures();
    println!(
        "{} groups, max relative error {:.3e}, tolerance {:.0e}: {}",
        report.groups.len(),
        report.max_rel(),
        report.tolerance,
        if failures.is_empty() { "ok" } else { "FAILED" }
    );
    for f in &failures {
        println!(
            "  {} entry {}: analytic {:.6e} numeric {:.6e}",
            f.name, f.worst.0, f.worst.1, f.worst.2
        );
    }
    Ok(if failures.is_empty() {
        Outcome::Pass
    } else {
        Outcome::CheckFailed
    })
}

fn serialize_cmd(a: SerializeArgs) -> gs6::Result<Outcome> {
    let cloud = harness::read_points(&a.input, None)?;
    let mut csv = String::new();
    let mut summary = Vec::new();
    match a.method {
        MethodArg::Axes => {
            if a.grid_size.is_some() {
                log::warn!("--grid-size is ignored by --method axes");
            }
            let set = expand(&cloud.coords, AxisSet::ALL)?;
            let rank = |axis: Axis| {
                &set.orders
                    .iter()
                    .find(|o| o.axis == axis)
                    .expect("all axes")
                    .inv_perm
            };
            csv.push_str("point_index,rank_z,rank_y,rank_x\n");
            for i in 0..cloud.len() {
                csv.push_str(&format!(
                    "{i},{},{},{}\n",
                    rank(Axis::Z)[i],
                    rank(Axis::Y)[i],
                    rank(Axis::X)[i]
                ));
            }
            for o in &set.orders {
                summary.push(format!(
                    "locality {}: {:.4}",
                    o.axis.name(),
                    locality(&cloud.coords, &o.perm)
                ));
            }
        }
        MethodArg::Hilbert | MethodArg::TransHilbert => {
            let variant = if a.method == MethodArg::Hilbert {
                HilbertVariant::Hilbert
            } else {
                HilbertVariant::TransHilbert
            };
            let grid = a.grid_size.unwrap_or(0.05);
            let order = hilbert_serialize(&cloud.coords, grid, variant)?;
            if let Some(w) = &order.warning {
                log::warn!("{w}");
            }
            let mut rank = vec![0; order.perm.len()];
            for (r, &p) in order.perm.iter().enumerate() {
                rank[p] = r;
            }
            csv.push_str("point_index,rank_curve\n");
            for (i, r) in rank.iter().enumerate() {
                csv.push_str(&format!("{i},{r}\n"));
            }
            summary.push(format!(
                "locality curve: {:.4}",
                locality(&cloud.coords, &order.perm)
            ));
        }
    }
    write_output(a.out.as_deref(), &csv)?;
    for s in summary {
        if a.out.is_some() {
            println!("{s}");
        } else {
            eprintln!("{s}");
        }
    }
    Ok(Outcome::Pass)
}

fn train_with<T: Scalar>(a: &TrainArgs, config: NetworkConfig) -> gs6::Result<Outcome> {
    let spec = a.data.spec(a.seed);
    let data = harness::generate(&spec)?;
    let tc = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        target: a.target,
    };
    let mut model = Model::<T>::new(config.clone())?;
    let report = harness::train(&mut model, &data, &tc)?;
    if let Some(p) = &a.log {
        fs::write(p, harness::log_csv(&report.log))?;
    }
    if let Some(dir) = &a.out {
        save_checkpoint(dir, &model.params)?;
        let manifest = RunManifest {
            network: config,
            dataset_hash: data.content_hash(),
            data: spec,
            train: tc,
            seed: a.seed,
        };
        fs::write(
            dir.join("run.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
    }
    let m = report.final_metrics;
    let last = report.log.last().map_or(f64::NAN, |e| e.loss);
    print!(
        "epochs {}  steps {}  loss {:.4}  accuracy {:.4}  class mIoU {:.4}",
        report.log.len(),
        report.steps,
        last,
        m.overall_accuracy,
        m.class_miou
    );
    if let Some(i) = m.instance_miou {
        print!("  instance mIoU {i:.4}");
    }
    println!();
    match a.target {
        Some(t) if m.overall_accuracy < t => {
            println!("target accuracy {t} not reached");
            Ok(Outcome::CheckFailed)
        }
        _ => Ok(Outcome::Pass),
    }
}

fn train_cmd(a: TrainArgs) -> gs6::Result<Outcome> {
    let classes = a.data.spec(a.seed).num_classes();
    let mut config = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => NetworkConfig::toy(a.data.task.into(), classes),
    };
    if a.config.is_none() {
        config.seed = a.seed;
    }
    match a.precision {
        Precision::F32 => train_with::<f32>(&a, config),
        Precision::F64 => train_with::<f64>(&a, config),
    }
}

fn eval_with<T: Scalar>(a: &EvalArgs, run: RunManifest) -> gs6::Result<Outcome> {
    let mut model = Model::<T>::new(run.network.clone())?;
    load_checkpoint(&a.checkpoint, &mut model.params)?;
    if let Some(input) = &a.input {
        let cloud = harness::read_points(input, Some(run.network.in_features))?;
        let preds = model.predict(&cloud)?;
        let labels: Vec<String> = preds.iter().map(usize::to_string).collect();
        println!("prediction {}", labels.join(" "));
        if let (Task::Segmentation, Some(l)) = (run.network.task, &cloud.point_labels) {
            println!("accuracy {:.4}", harness::overall_accuracy(&preds, l)?);
        }
        return Ok(Outcome::Pass);
    }
    let spec = SyntheticSpec {
        seed: a.data_seed.unwrap_or(run.data.seed),
        ..run.data
    };
    let data = harness::generate(&spec)?;
    let m = harness::evaluate(&model, &data)?;
    println!("{}", serde_json::to_string(&m)?);
    Ok(Outcome::Pass)
}

fn eval_cmd(a: EvalArgs) -> gs6::Result<Outcome> {
    let run: RunManifest =
        serde_json::from_str(&fs::read_to_string(a.checkpoint.join("run.json"))?)?;
    match a.precision {
        Precision::F32 => eval_with::<f32>(&a, run),
        Precision::F64 => eval_with::<f64>(&a, run),
    }
}

fn ablate_cmd(a: AblateArgs) -> gs6::Result<Outcome> {
    let mut plan = AblationPlan::toy(a.factor.into(), a.seed);
    plan.repetitions = a.repetitions;
    plan.train.epochs = a.epochs;
    plan.data.samples_per_class = a.samples;
    let rows = harness::run_ablation(&plan)?;
    write_output(a.out.as_deref(), &harness::rows_csv(&rows))?;
    Ok(Outcome::Pass)
}

fn timing_cmd(a: TimingArgs) -> gs6::Result<Outcome> {
    let opts = TimingOptions {
        lengths: a.lengths,
        repeats: a.repeats,
        seed: a.seed,
        ..TimingOptions::default()
    };
    let report = harness::time_forward(&opts)?;
    write_output(a.out.as_deref(), &report.csv())?;
    println!("slope {:.2}", report.slope);
    Ok(Outcome::Pass)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::ScanCheck(a) => scan_check(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Serialize(a) => serialize_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Timing(a) => timing_cmd(a),
    };
    match result {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e @ Error::Diverged { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
