//! Command-line driver: data generation, classifier and distortion-GAN
//! training, attacks, evaluation, and ablations.
//!
//! Human-readable logs go to stderr; the final machine-readable summary
//! is a single JSON object on stdout.

use clap::{Args, Parser, Subcommand};
use greedyfool::attack::AttackConfig;
use greedyfool::data::{self, LabeledImageSet};
use greedyfool::distortion::{self, GanConfig};
use greedyfool::eval::{self, DistortionSource};
use greedyfool::nn::{self, Arch, InputSpec, Model, TrainConfig};
use serde::Deserialize;
use serde_json::json;
use std::error::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

type CliError = Box<dyn Error>;

#[derive(Parser)]
#[command(name = "greedyfool", version, about = "Sparse adversarial attacks with distortion-aware pixel selection")]
struct Cli {
    /// TOML config file supplying defaults; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-image attack parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark dataset as IDX files.
    GenData(GenDataArgs),
    /// Train a classifier and write a checkpoint.
    Train(TrainArgs),
    /// Train the distortion-map generator GAN.
    DistortionTrain(DistortionTrainArgs),
    /// Attack a batch of test images and report sparsity metrics.
    Attack(AttackArgs),
    /// Dynamic/static/target evaluation and the kappa transfer sweep.
    Evaluate(EvaluateArgs),
    /// Component or direction-percentile ablation.
    Ablate(AblateArgs),
}

/// Flat key set shared by the TOML config file and the flags.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    eps: Option<f64>,
    kappa: Option<f64>,
    q: Option<f64>,
    tau_hi: Option<f64>,
    tau_lo: Option<f64>,
    seed: Option<u64>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch: Option<usize>,
    count: Option<usize>,
    lambda: Option<f64>,
    delta: Option<f64>,
    max_iterations: Option<usize>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| format!("config {}: {e}", p.display()))?;
                Ok(toml::from_str(&text).map_err(|e| format!("config {}: {e}", p.display()))?)
            }
        }
    }
}

fn pick<T: Copy>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for the IDX files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    train: usize,
    #[arg(long, default_value_t = 1000)]
    test: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DataArgs {
    /// IDX image file.
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// CIFAR-10 binary batch file (alternative to --images/--labels).
    #[arg(long)]
    cifar: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self, split: &str) -> Result<LabeledImageSet, CliError> {
        match (&self.cifar, &self.images, &self.labels) {
            (Some(c), None, None) => Ok(data::load_cifar_binary(c, split)?),
            (None, Some(i), Some(l)) => Ok(data::load_idx(i, l, split)?),
            _ => Err("supply either --cifar or both --images and --labels".into()),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Optional held-out IDX images for accuracy reporting.
    #[arg(long)]
    test_images: Option<PathBuf>,
    /// Optional held-out IDX labels.
    #[arg(long)]
    test_labels: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Training-curve manifest path (JSON), next to the checkpoint by default.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Feature widths conv1,conv2,hidden of the CNN.
    #[arg(long, default_value = "8,16,64", value_delimiter = ',')]
    widths: Vec<usize>,
}

#[derive(Args)]
struct DistortionTrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Generator checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on the number of training images.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args)]
struct AttackFlags {
    /// Max per-channel perturbation on the 0-255 scale.
    #[arg(long)]
    eps: Option<f64>,
    /// Confidence margin; > 0 disables the reduce stage.
    #[arg(long)]
    kappa: Option<f64>,
    /// Direction-ablation percentile (0 = gradient direction, 100 = sign).
    #[arg(long)]
    q: Option<f64>,
    /// Upper distortion percentile tau_1.
    #[arg(long)]
    tau_hi: Option<f64>,
    /// Lower distortion percentile tau_2.
    #[arg(long)]
    tau_lo: Option<f64>,
    /// Iteration budget of the increasing stage.
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Force the reduce stage on (rejected alongside kappa > 0).
    #[arg(long, conflicts_with = "no_reduce")]
    reduce: bool,
    /// Skip the reduce stage.
    #[arg(long)]
    no_reduce: bool,
    /// Distortion source: none, variance, or a generator checkpoint path.
    #[arg(long, default_value = "none")]
    distortion: String,
}

impl AttackFlags {
    fn build(&self, file: &FileConfig) -> Result<AttackConfig, CliError> {
        let kappa = pick(self.kappa, file.kappa, 0.0);
        let mut reduce = !self.no_reduce;
        if kappa > 0.0 {
            if self.reduce {
                log::warn!("kappa > 0 keeps a confidence margin; --reduce is ignored");
            }
            reduce = false;
        }
        let cfg = AttackConfig {
            epsilon: pick(self.eps, file.eps, 255.0),
            max_iterations: pick(self.max_iterations, file.max_iterations, 200),
            kappa,
            step_size: None,
            tau_percentiles: (
                pick(self.tau_hi, file.tau_hi, 70.0),
                pick(self.tau_lo, file.tau_lo, 25.0),
            ),
            target: None,
            direction_percentile: pick(self.q, file.q, 0.0),
            reduce,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn source<'a>(&self, gan: &'a mut Option<Model>) -> Result<DistortionSource<'a>, CliError> {
        match self.distortion.as_str() {
            "none" => Ok(DistortionSource::None),
            "variance" => Ok(DistortionSource::Variance),
            path => {
                *gan = Some(nn::load_model(Path::new(path))?);
                Ok(DistortionSource::Gan(gan.as_ref().unwrap()))
            }
        }
    }
}

#[derive(Args)]
struct AttackArgs {
    /// Classifier checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    attack: AttackFlags,
    /// Number of correctly-classified images to attack.
    #[arg(long)]
    count: Option<usize>,
    /// Targeted attack class.
    #[arg(long)]
    target_class: Option<usize>,
    /// Directory for JSONL results and optional image dumps.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Export the first N adversarial images and |r| maps as PNG.
    #[arg(long, default_value_t = 0)]
    dump_images: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    attack: AttackFlags,
    #[arg(long)]
    count: Option<usize>,
    /// Victim checkpoints; enables the transfer study.
    #[arg(long)]
    transfer: Vec<PathBuf>,
    /// Comma-separated kappa grid for the transfer study.
    #[arg(long, default_value = "0,3,6", value_delimiter = ',')]
    kappa_grid: Vec<f64>,
    /// Run the targeted-attack evaluation instead of the non-target one.
    #[arg(long)]
    target: bool,
    /// Static-curve budgets.
    #[arg(long, default_value = "10,20,50,100,200", value_delimiter = ',')]
    budgets: Vec<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    attack: AttackFlags,
    /// Ablation mode: component or direction.
    #[arg(long, value_parser = ["component", "direction"])]
    mode: String,
    /// Comma-separated q grid for the direction mode.
    #[arg(long, default_value = "0,25,50,75,100", value_delimiter = ',')]
    q_grid: Vec<f64>,
    #[arg(long)]
    count: Option<usize>,
    /// Write (q, cosine, mean-pixels) plot triples to this CSV path.
    #[arg(long)]
    emit_plot_data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a, &file),
        Command::Train(a) => cmd_train(a, &file),
        Command::DistortionTrain(a) => cmd_distortion_train(a, &file),
        Command::Attack(a) => cmd_attack(a, &file),
        Command::Evaluate(a) => cmd_evaluate(a, &file),
        Command::Ablate(a) => cmd_ablate(a, &file),
    }
}

fn cmd_gen_data(a: GenDataArgs, file: &FileConfig) -> Result<(), CliError> {
    let cfg = data::synth::SynthConfig {
        train: a.train,
        test: a.test,
        seed: pick(a.seed, file.seed, 42),
        ..Default::default()
    };
    std::fs::create_dir_all(&a.out)?;
    let (train, test) = data::synth::generate(&cfg);
    data::write_idx(&train, &a.out.join("train-images.idx"), &a.out.join("train-labels.idx"))?;
    data::write_idx(&test, &a.out.join("test-images.idx"), &a.out.join("test-labels.idx"))?;
    log::info!("wrote {} train / {} test images to {}", train.len(), test.len(), a.out.display());
    println!(
        "{}",
        json!({
            "command": "gen-data",
            "out": a.out.display().to_string(),
            "train": train.len(),
            "test": test.len(),
            "classes": train.classes,
        })
    );
    Ok(())
}

fn cmd_train(a: TrainArgs, file: &FileConfig) -> Result<(), CliError> {
    let train = a.data.load("train")?;
    let test = match (&a.test_images, &a.test_labels) {
        (Some(i), Some(l)) => Some(data::load_idx(i, l, "test")?),
        (None, None) => None,
        _ => return Err("supply both --test-images and --test-labels or neither".into()),
    };
    if a.widths.len() != 3 {
        return Err("--widths needs exactly conv1,conv2,hidden".into());
    }
    let shape = train.image_shape().to_vec();
    let spec = InputSpec {
        channels: shape[0],
        height: shape[1],
        width: shape[2],
        scale: 255.0,
    };
    let arch = Arch::ConvNet {
        conv1: a.widths[0],
        conv2: a.widths[1],
        hidden: a.widths[2],
        classes: train.classes,
    };
    let seed = pick(a.seed, file.seed, 42);
    let cfg = TrainConfig {
        learning_rate: pick(a.lr, file.lr, 1e-3),
        batch_size: pick(a.batch, file.batch, 32),
        epochs: pick(a.epochs, file.epochs, 6),
        seed,
        ..Default::default()
    };
    let mut model = Model::new(spec, arch, seed);
    let report = nn::train_classifier(&mut model, &train, test.as_ref(), &cfg)?;
    nn::save_model(&model, &a.out)?;
    let manifest = a.manifest.unwrap_or_else(|| a.out.with_extension("curve.json"));
    std::fs::write(&manifest, serde_json::to_string_pretty(&report)?)?;
    log::info!(
        "train accuracy {:.2}%, test accuracy {:?}",
        report.train_accuracy * 100.0,
        report.test_accuracy.map(|a| a * 100.0)
    );
    println!(
        "{}",
        json!({
            "command": "train",
            "checkpoint": a.out.display().to_string(),
            "manifest": manifest.display().to_string(),
            "train_accuracy": report.train_accuracy,
            "test_accuracy": report.test_accuracy,
            "epoch_losses": report.epoch_losses,
        })
    );
    Ok(())
}

fn cmd_distortion_train(a: DistortionTrainArgs, file: &FileConfig) -> Result<(), CliError> {
    let mut set = a.data.load("train")?;
    let n = pick(a.count, file.count, set.len());
    if n < set.len() {
        set = set.take(n);
    }
    let cfg = GanConfig {
        delta: pick(a.delta, file.delta, 8.0 / 255.0),
        lambda: pick(a.lambda, file.lambda, 1e-5),
        learning_rate: pick(a.lr, file.lr, 2e-3),
        batch_size: pick(a.batch, file.batch, 16),
        epochs: pick(a.epochs, file.epochs, 20),
        seed: pick(a.seed, file.seed, 42),
        ..Default::default()
    };
    let (generator, report) = distortion::train_distortion_gan(&set, &cfg)?;
    nn::save_model(&generator, &a.out)?;
    log::info!(
        "mean rho {:.4} -> {:.4} over {} epochs",
        report.initial_mean_rho,
        report.final_mean_rho,
        cfg.epochs
    );
    println!(
        "{}",
        json!({
            "command": "distortion-train",
            "checkpoint": a.out.display().to_string(),
            "initial_mean_rho": report.initial_mean_rho,
            "final_mean_rho": report.final_mean_rho,
            "epoch_d_losses": report.epoch_d_losses,
            "epoch_g_losses": report.epoch_g_losses,
        })
    );
    Ok(())
}

fn summary_value(report: &eval::EvaluationReport) -> serde_json::Value {
    json!({
        "images": report.records.len(),
        "mean_pixels": report.mean_pixels,
        "median_pixels": report.median_pixels,
        "fooling_rate": report.fooling_rate,
        "static_curve": report.static_curve,
        "total_ms": report.total_ms,
    })
}

fn cmd_attack(a: AttackArgs, file: &FileConfig) -> Result<(), CliError> {
    let model = nn::load_model(&a.model)?;
    let set = a.data.load("test")?;
    check_shapes(&model, &set)?;
    let mut cfg = a.attack.build(file)?;
    cfg.target = a.target_class;
    let mut gan = None;
    let source = a.attack.source(&mut gan)?;
    let count = pick(a.count, file.count, 100);
    let indices = eval::correctly_classified(&model, &set, count)?;
    log::info!("attacking {} correctly-classified images", indices.len());
    let report = eval::dynamic_evaluation(&model, &set, &indices, &cfg, source)?;
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir)?;
        eval::write_jsonl(&report.records, &dir.join("attack.jsonl"))?;
        eval::write_csv(&report.records, &dir.join("attack.csv"))?;
        dump_images(&model, &set, &indices, &cfg, a.dump_images, dir)?;
    }
    println!(
        "{}",
        json!({
            "command": "attack",
            "eps": cfg.epsilon,
            "kappa": cfg.kappa,
            "target_class": a.target_class,
            "summary": summary_value(&report),
        })
    );
    Ok(())
}

fn dump_images(
    model: &Model,
    set: &LabeledImageSet,
    indices: &[usize],
    cfg: &AttackConfig,
    n: usize,
    dir: &Path,
) -> Result<(), CliError> {
    for &i in indices.iter().take(n) {
        let x = &set.images[i];
        let res = greedyfool::attack::greedyfool(model, x, set.labels[i], cfg, None)?;
        data::export_image(
            &res.adversarial,
            &dir.join(format!("adv-{i}.png")),
            data::ImageFileFormat::Png,
        )?;
        // |r| stretched to full range for visibility
        let max = res.perturbation.max_abs().max(1e-12);
        let vis = res.perturbation.map(|v| v.abs() / max * 255.0);
        data::export_image(
            &vis,
            &dir.join(format!("perturbation-{i}.png")),
            data::ImageFileFormat::Png,
        )?;
    }
    Ok(())
}

fn check_shapes(model: &Model, set: &LabeledImageSet) -> Result<(), CliError> {
    let shape = set.image_shape();
    let spec = &model.input;
    if shape != [spec.channels, spec.height, spec.width] {
        return Err(format!(
            "checkpoint expects {}x{}x{} input but dataset images are {shape:?}",
            spec.channels, spec.height, spec.width
        )
        .into());
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, file: &FileConfig) -> Result<(), CliError> {
    let model = nn::load_model(&a.model)?;
    let set = a.data.load("test")?;
    check_shapes(&model, &set)?;
    let cfg = a.attack.build(file)?;
    let mut gan = None;
    let source = a.attack.source(&mut gan)?;
    let seed = pick(a.seed, file.seed, 42);
    let count = pick(a.count, file.count, 300);
    let indices = eval::correctly_classified(&model, &set, count)?;

    if !a.transfer.is_empty() {
        let victims: Vec<Model> = a
            .transfer
            .iter()
            .map(|p| nn::load_model(p))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&Model> = victims.iter().collect();
        let rep = eval::transfer_study(&model, &refs, &set, &indices, &a.kappa_grid, &cfg, source)?;
        if let Some(dir) = &a.out_dir {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("transfer.json"), serde_json::to_string_pretty(&rep)?)?;
        }
        println!(
            "{}",
            json!({
                "command": "evaluate",
                "mode": "transfer",
                "kappa_grid": a.kappa_grid,
                "victims": a.transfer.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
                "rows": rep.rows,
            })
        );
        return Ok(());
    }

    let mut report = if a.target {
        eval::target_evaluation(&model, &set, &indices, &cfg, source, seed)?
    } else {
        eval::dynamic_evaluation(&model, &set, &indices, &cfg, source)?
    };
    report.static_curve = eval::static_evaluation(&report, &a.budgets);
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir)?;
        eval::write_jsonl(&report.records, &dir.join("evaluate.jsonl"))?;
        eval::write_csv(&report.records, &dir.join("evaluate.csv"))?;
    }
    println!(
        "{}",
        json!({
            "command": "evaluate",
            "mode": if a.target { "target" } else { "dynamic" },
            "eps": cfg.epsilon,
            "kappa": cfg.kappa,
            "summary": summary_value(&report),
        })
    );
    Ok(())
}

fn cmd_ablate(a: AblateArgs, file: &FileConfig) -> Result<(), CliError> {
    let model = nn::load_model(&a.model)?;
    let set = a.data.load("test")?;
    check_shapes(&model, &set)?;
    let cfg = a.attack.build(file)?;
    let mut gan = None;
    let source = a.attack.source(&mut gan)?;
    let count = pick(a.count, file.count, 100);
    let indices = eval::correctly_classified(&model, &set, count)?;

    match a.mode.as_str() {
        "component" => {
            let rows = eval::component_ablation(&model, &set, &indices, &cfg, source)?;
            if let Some(dir) = &a.out_dir {
                std::fs::create_dir_all(dir)?;
                let mut csv = String::from("variant,mean_pixels,median_pixels,fooling_rate\n");
                for r in &rows {
                    csv.push_str(&format!(
                        "{},{},{},{}\n",
                        r.name,
                        r.mean_pixels.map(|v| v.to_string()).unwrap_or_default(),
                        r.median_pixels.map(|v| v.to_string()).unwrap_or_default(),
                        r.fooling_rate
                    ));
                }
                std::fs::write(dir.join("ablation.csv"), csv)?;
            }
            println!(
                "{}",
                json!({ "command": "ablate", "mode": "component", "rows": rows })
            );
        }
        "direction" => {
            let points = eval::direction_sweep(&model, &set, &indices, &cfg, &a.q_grid)?;
            if let Some(path) = &a.emit_plot_data {
                eval::write_plot_data(&points, path)?;
            }
            if let Some(dir) = &a.out_dir {
                std::fs::create_dir_all(dir)?;
                eval::write_plot_data(&points, &dir.join("direction.csv"))?;
            }
            println!(
                "{}",
                json!({ "command": "ablate", "mode": "direction", "points": points })
            );
        }
        other => return Err(format!("unknown ablation mode {other}").into()),
    }
    Ok(())
}
