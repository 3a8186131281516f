//! Command-line front end. [`run`] parses arguments, executes one command and
//! returns the process exit status.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attention::PositionMode;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::datagen::{self, Sample, SampleStream};
use crate::error::{Error, Result, EXIT_USAGE};
use crate::imageio;
use crate::metrics::{self, EvalReport, Transform};
use crate::network::SpanModel;
use crate::numerics::FeatureMap;
use crate::pyramid::{self, FusionMode};
use crate::training;

pub const MODEL_FILE: &str = "model.span";
pub const HISTORY_FILE: &str = "history.txt";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Parser, Debug)]
#[command(name = "span", version, about = "Pyramid local self-attention manipulation localizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic manipulated images, masks and an index.
    GenData(GenDataArgs),
    /// Train a model and write its best checkpoint and history.
    Train(TrainArgs),
    /// Predict the tampering mask of one image.
    Predict(PredictArgs),
    /// Score a model on a generated dataset directory.
    Eval(EvalArgs),
    /// Train and compare architecture variants.
    Ablate(AblateArgs),
    /// Print receptive-field and cost tables.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    count: usize,
    /// Stream seed; defaults to `data.eval_seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the checkpoint, history and config snapshot.
    #[arg(long)]
    out: PathBuf,
    /// Not supported; training always starts from a fresh initialization.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Binarize to 0/255 at this probability.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Stub {
    /// Predict the ground-truth mask itself.
    GroundTruth,
    /// Predict 0.5 everywhere.
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Table,
    Lines,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required_unless_present = "stub", conflicts_with = "stub")]
    model: Option<PathBuf>,
    /// Reference predictor used instead of a model.
    #[arg(long, value_enum)]
    stub: Option<Stub>,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated robustness transforms, e.g. `resize:0.5,blur:3,noise:15`.
    #[arg(long)]
    transforms: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_enum, default_value = "table")]
    format: ReportFormat,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "res,res_pe,res_pp")]
    variants: String,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Layers `h` and radius `N`.
    #[arg(long, num_args = 2, value_names = ["H", "N"])]
    receptive_field: Option<Vec<usize>>,
    /// Image side `S`.
    #[arg(long)]
    complexity: Option<usize>,
}

/// Sizes the global worker pool from `SPAN_THREADS` (unset or 0 means one
/// worker per core). Later calls are no-ops.
pub fn configure_threads() -> Result<()> {
    let threads = match std::env::var("SPAN_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidArgument(format!("SPAN_THREADS must be a count, got `{v}`")))?,
        Err(_) => 0,
    };
    // An already initialized pool is fine.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns the exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = configure_threads().and_then(|_| dispatch(cli.command, out));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    let text = match command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => train(a)?,
        Command::Predict(a) => predict(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Ablate(a) => ablate(a)?,
        Command::Analyze(a) => analyze(a)?,
    };
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn gen_data(a: GenDataArgs) -> Result<String> {
    let cfg = load_config(a.config.as_deref())?;
    let seed = a.seed.unwrap_or(cfg.data.eval_seed);
    let samples = datagen::dump_dataset(&a.out_dir, seed, cfg.data.image_size, a.count)?;
    Ok(format!("wrote {} samples to {}\n", samples.len(), a.out_dir.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Validation split described by the data section.
pub fn validation_set(cfg: &RunConfig) -> Result<Vec<Sample>> {
    datagen::fixed_set(cfg.data.val_seed, cfg.data.image_size, cfg.data.val_count)
}

/// Held-out evaluation split described by the data section.
pub fn evaluation_set(cfg: &RunConfig) -> Result<Vec<Sample>> {
    datagen::fixed_set(cfg.data.eval_seed, cfg.data.image_size, cfg.data.eval_count)
}

/// Trains from `cfg` and returns the fit outcome.
pub fn train_from_config(cfg: &RunConfig) -> Result<training::FitResult> {
    let model = SpanModel::new(cfg.model.clone())?;
    let stream = SampleStream::new(cfg.data.train_seed ^ cfg.train.seed, cfg.data.image_size)?;
    let val = validation_set(cfg)?;
    training::fit(model, stream, &val, &cfg.train)
}

fn train(a: TrainArgs) -> Result<String> {
    if let Some(p) = a.resume {
        return Err(Error::InvalidArgument(format!(
            "--resume {} is not supported; training always starts from a fresh initialization",
            p.display()
        )));
    }
    let cfg = load_config(a.config.as_deref())?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let fit = train_from_config(&cfg)?;
    checkpoint::save(&fit.best, &a.out.join(MODEL_FILE))?;
    write_file(&a.out.join(HISTORY_FILE), fit.history.to_text())?;
    write_file(&a.out.join(CONFIG_FILE), cfg.to_text())?;
    let best = fit.history.best().ok_or(Error::Empty("training history"))?;
    Ok(format!(
        "epochs {}\nbest_epoch {}\nval_loss {}\nval_precision {}\nval_recall {}\nval_f1 {}\n",
        fit.history.records.len(),
        best.epoch,
        best.metrics.val_loss,
        best.metrics.val.precision,
        best.metrics.val.recall,
        best.metrics.val.f1
    ))
}

fn predict(a: PredictArgs) -> Result<String> {
    if let Some(t) = a.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("threshold must lie in [0, 1], got {t}")));
        }
    }
    let model = checkpoint::load(&a.model)?;
    let image = imageio::read_rgb(&a.input)?;
    if image.height() < datagen::MIN_SIDE || image.width() < datagen::MIN_SIDE {
        return Err(Error::TooSmall { height: image.height(), width: image.width(), min: datagen::MIN_SIDE });
    }
    let mut soft = model.predict(&image)?;
    if let Some(t) = a.threshold {
        soft = soft.map(|v| if v >= t { 1.0 } else { 0.0 });
    }
    imageio::write_gray(&a.output, &soft)?;
    Ok(format!("wrote {}\n", a.output.display()))
}

struct ConstantPredictor(f64);

impl metrics::Predictor for ConstantPredictor {
    fn predict(&self, image: &FeatureMap) -> Result<FeatureMap> {
        Ok(FeatureMap::filled(image.height(), image.width(), 1, self.0))
    }
}

fn eval(a: EvalArgs) -> Result<String> {
    let cfg = load_config(a.config.as_deref())?;
    let threshold = a.threshold.unwrap_or(cfg.eval.threshold);
    let samples = datagen::load_dataset(&a.data_dir)?;
    let transforms = match &a.transforms {
        Some(list) => Some(metrics::parse_transforms(list)?),
        None => None,
    };

    let model = match &a.model {
        Some(p) => Some(checkpoint::load(p)?),
        None => None,
    };
    let preds: Vec<FeatureMap> = match (a.stub, &model) {
        (Some(Stub::GroundTruth), _) => samples.iter().map(|s| s.mask.clone()).collect(),
        (Some(Stub::Constant), _) => metrics::predict_all(&ConstantPredictor(0.5), &samples)?,
        (None, Some(m)) => metrics::predict_all(m, &samples)?,
        (None, None) => unreachable!("clap requires --model or --stub"),
    };
    let report = EvalReport::compute(&preds, &samples, threshold)?;
    let p: Vec<&FeatureMap> = preds.iter().collect();
    let m: Vec<&FeatureMap> = samples.iter().map(|s| &s.mask).collect();
    let (best_t, best_f1) = metrics::threshold_sweep(&p, &m, &cfg.eval.sweep_grid)?;

    let mut text = match a.format {
        ReportFormat::Table => format!("{report}\nbest F1 {best_f1:.4} at threshold {best_t}\n"),
        ReportFormat::Lines => format!("{}sweep.threshold {best_t}\nsweep.f1 {best_f1}\n", report.to_lines()),
    };

    if let Some(transforms) = transforms {
        let rows = match (a.stub, &model) {
            (Some(Stub::GroundTruth), _) => {
                // The oracle predictor follows the transformed mask.
                transforms
                    .iter()
                    .map(|&t| {
                        let ts = metrics::transform_samples(&samples, t, cfg.eval.seed)?;
                        let m: Vec<&FeatureMap> = ts.iter().map(|s| &s.mask).collect();
                        Ok((t, metrics::pixel_auc(&m, &m)?))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            (Some(Stub::Constant), _) => {
                metrics::robustness_suite(&ConstantPredictor(0.5), &samples, &transforms, cfg.eval.seed)?
            }
            (None, Some(m)) => metrics::robustness_suite(m, &samples, &transforms, cfg.eval.seed)?,
            (None, None) => unreachable!("clap requires --model or --stub"),
        };
        text.push_str(&robustness_text(&rows, a.format));
    }
    Ok(text)
}

fn robustness_text(rows: &[(Transform, f64)], format: ReportFormat) -> String {
    let mut s = String::new();
    match format {
        ReportFormat::Table => {
            writeln!(s, "\n{:<14} {:>8}", "transform", "AUC").expect("write to string");
            for (t, auc) in rows {
                writeln!(s, "{:<14} {:>8.4}", t.to_string(), auc).expect("write to string");
            }
        }
        ReportFormat::Lines => {
            for (t, auc) in rows {
                writeln!(s, "robustness.{t} {auc}").expect("write to string");
            }
        }
    }
    s
}

/// Architecture variant compared by `ablate`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub fusion: FusionMode,
    pub position_mode: PositionMode,
}

pub const VARIANTS: [Variant; 4] = [
    Variant { name: "res", fusion: FusionMode::Residual, position_mode: PositionMode::None },
    Variant { name: "res_pe", fusion: FusionMode::Residual, position_mode: PositionMode::Embedding },
    Variant { name: "res_pp", fusion: FusionMode::Residual, position_mode: PositionMode::Projection },
    Variant { name: "none_pp", fusion: FusionMode::None, position_mode: PositionMode::Projection },
];

pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    list.split(',')
        .map(|name| {
            let name = name.trim();
            VARIANTS.iter().copied().find(|v| v.name == name).ok_or_else(|| {
                Error::InvalidArgument(format!("unknown variant `{name}` (expected res, res_pe, res_pp or none_pp)"))
            })
        })
        .collect()
}

/// Trains every variant under the same seeds and budget and tabulates held-out scores.
pub fn ablation_table(cfg: &RunConfig, variants: &[Variant]) -> Result<String> {
    let eval_set = evaluation_set(cfg)?;
    let mut s = format!(
        "{:<8} {:<9} {:<11} {:>7} {:>7} {:>8} {:>8}\n",
        "variant", "fusion", "position", "params", "epochs", "AUC", "F1"
    );
    for v in variants {
        let mut run = cfg.clone();
        run.model.fusion = v.fusion;
        run.model.position_mode = v.position_mode;
        let fit = train_from_config(&run)?;
        let report = metrics::evaluate(&fit.best, &eval_set, Transform::Identity, cfg.eval.threshold, cfg.eval.seed)?;
        writeln!(
            s,
            "{:<8} {:<9} {:<11} {:>7} {:>7} {:>8.4} {:>8.4}",
            v.name,
            v.fusion.to_string(),
            v.position_mode.to_string(),
            fit.best.parameter_count(),
            fit.history.records.len(),
            report.auc,
            report.scores.f1
        )
        .expect("write to string");
    }
    Ok(s)
}

fn ablate(a: AblateArgs) -> Result<String> {
    let cfg = load_config(a.config.as_deref())?;
    let variants = parse_variants(&a.variants)?;
    let table = ablation_table(&cfg, &variants)?;
    if let Some(path) = &a.out {
        write_file(path, &table)?;
    }
    Ok(table)
}

/// Candidate block sides for the cost table.
pub const BLOCK_SIDES: [usize; 4] = [3, 5, 7, 9];

fn analyze(a: AnalyzeArgs) -> Result<String> {
    if a.receptive_field.is_none() && a.complexity.is_none() {
        return Err(Error::InvalidArgument("analyze needs --receptive-field H N and/or --complexity S".into()));
    }
    let mut s = String::new();
    if let Some(hn) = &a.receptive_field {
        let (h, n) = (hn[0], hn[1]);
        let fields = pyramid::receptive_fields(h, n);
        writeln!(s, "receptive field per layer (h={h}, N={n}):").expect("write to string");
        writeln!(s, "{}", fields.iter().map(ToString::to_string).collect::<Vec<_>>().join(" "))
            .expect("write to string");
    }
    if let Some(side) = a.complexity {
        let candidates: Vec<usize> = BLOCK_SIDES.iter().copied().filter(|&m| m <= side).collect();
        let best = pyramid::best_block_side(side, &candidates)?;
        writeln!(s, "{:>3} {:>16}", "M", "S^2 M^2 log_M S").expect("write to string");
        for m in candidates {
            let mark = if m == best { "  <- min" } else { "" };
            writeln!(s, "{:>3} {:>16.1}{mark}", m, pyramid::complexity_estimate(side, m)?).expect("write to string");
        }
        writeln!(s, "argmin M={best}").expect("write to string");
    }
    Ok(s)
}
