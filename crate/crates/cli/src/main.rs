//! `capsvid` — train, evaluate, and explain the capsule video classifier.
//!
//! Exit codes: 0 success, 2 configuration or argument problems, 3 weights
//! problems, 4 data problems, 5 numeric failures, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use capsvid::data::{
    batch_iterator, build_clips, load_metadata, select_clips, split_dataset, ClipRecord, Label,
};
use capsvid::error::Error;
use capsvid::explain::{
    gradcam, heatmap_filename, render_overlay, write_image, DEFAULT_GRADCAM_LAYER,
};
use capsvid::model::{build_model, ModelConfig, ModelGraph};
use capsvid::tensor::Tensor;
use capsvid::training::{evaluate_clips, train_loop, OptimizerConfig, TrainSettings};

const EXIT_CONFIG: u8 = 2;
const EXIT_WEIGHTS: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_NUMERIC: u8 = 5;

#[derive(Parser)]
#[command(
    name = "capsvid",
    version,
    about = "Video-clip deepfake classifier: training, evaluation, and heat-map explanations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the architecture's layer table
    Summary {
        #[command(flatten)]
        common: ConfigArgs,
        /// Fail unless the total trainable parameter count equals this value
        #[arg(long)]
        check_params: Option<usize>,
    },
    /// Train on the configured dataset; writes history.csv, summary.json,
    /// and the best-validation weights
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one dataset split with saved weights
    Evaluate {
        #[command(flatten)]
        common: ConfigArgs,
        /// Weights file produced by `train`
        #[arg(long)]
        weights: PathBuf,
        /// Split to score
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
    },
    /// Emit one JSON line per clip with the predicted label
    Predict {
        #[command(flatten)]
        common: ConfigArgs,
        /// Weights file produced by `train`
        #[arg(long)]
        weights: PathBuf,
        /// Comma-separated clip ids (default: every labeled clip)
        #[arg(long, value_delimiter = ',')]
        clips: Vec<String>,
    },
    /// Write heat-map overlays showing where the model looked
    Explain {
        #[command(flatten)]
        common: ConfigArgs,
        /// Weights file produced by `train`
        #[arg(long)]
        weights: PathBuf,
        /// Output directory for the overlay images
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated clip ids (default: every labeled clip)
        #[arg(long, value_delimiter = ',')]
        clips: Vec<String>,
        /// Layer whose activation map is explained
        #[arg(long, default_value = DEFAULT_GRADCAM_LAYER)]
        layer: String,
        /// Class index to explain (default: each clip's predicted class)
        #[arg(long)]
        class: Option<usize>,
        /// Overlay opacity in [0, 1]
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Run-configuration JSON file
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum SplitName {
    Train,
    Validation,
    Test,
    All,
}

impl SplitName {
    fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
            SplitName::All => "all",
        }
    }
}

/// One JSON file that pins everything a run needs. Unknown keys are
/// rejected. Exactly one of `preset` ("full" or "small") and `model` (a
/// complete architecture object) must be present.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    preset: Option<String>,
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    data_root: Option<PathBuf>,
    #[serde(default = "default_epochs")]
    epochs: usize,
    #[serde(default = "default_batch_size")]
    batch_size: usize,
    #[serde(default)]
    optimizer: OptimizerConfig,
    #[serde(default)]
    seed: Option<u64>,
    /// Reserved key for wiring in an externally trained feature extractor;
    /// this build rejects any value here.
    #[serde(default)]
    pretrained_feature_import: Option<serde_json::Value>,
}

fn default_epochs() -> usize {
    30
}

fn default_batch_size() -> usize {
    4
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn config(message: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, message)
    }
}

/// Maps a library error to the exit code of its family.
fn family(e: Error) -> CliError {
    let code = match &e {
        Error::Config(_) | Error::Argument(_) | Error::Dimension(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Format(_) => EXIT_DATA,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Io(_) => 1,
    };
    CliError::new(code, e.to_string())
}

trait OrExit<T> {
    /// Classify by error family.
    fn or_family(self) -> Result<T, CliError>;
    /// Force every failure of this phase onto one exit code.
    fn or_phase(self, code: u8, what: &str) -> Result<T, CliError>;
}

impl<T> OrExit<T> for Result<T, Error> {
    fn or_family(self) -> Result<T, CliError> {
        self.map_err(family)
    }

    fn or_phase(self, code: u8, what: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(code, format!("{what}: {e}")))
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Summary {
            common,
            check_params,
        } => cmd_summary(&common, check_params),
        Command::Train { common, out } => cmd_train(&common, &out),
        Command::Evaluate {
            common,
            weights,
            split,
        } => cmd_evaluate(&common, &weights, split),
        Command::Predict {
            common,
            weights,
            clips,
        } => cmd_predict(&common, &weights, &clips),
        Command::Explain {
            common,
            weights,
            out,
            clips,
            layer,
            class,
            alpha,
        } => cmd_explain(&common, &weights, &out, &clips, &layer, class, alpha),
    }
}

fn load_run_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config '{}': {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("config '{}': {e}", path.display())))?;
    if cfg.pretrained_feature_import.is_some() {
        return Err(CliError::config(
            "config key 'pretrained_feature_import' is reserved for importing an externally \
             trained feature extractor and is not supported by this build; remove it",
        ));
    }
    if cfg.epochs == 0 {
        return Err(CliError::config("epochs must be at least 1"));
    }
    if cfg.batch_size == 0 {
        return Err(CliError::config("batch_size must be at least 1"));
    }
    Ok(cfg)
}

fn resolve_model(cfg: &RunConfig, seed_flag: Option<u64>) -> Result<ModelConfig, CliError> {
    let mut mc = match (&cfg.preset, &cfg.model) {
        (Some(name), None) => match name.as_str() {
            "full" => ModelConfig::full(),
            "small" => ModelConfig::small(),
            other => {
                return Err(CliError::config(format!(
                    "unknown preset '{other}'; valid presets are full, small"
                )))
            }
        },
        (None, Some(model)) => model.clone(),
        (Some(_), Some(_)) => {
            return Err(CliError::config(
                "config sets both 'preset' and 'model'; use exactly one",
            ))
        }
        (None, None) => {
            return Err(CliError::config(
                "config needs 'preset' (\"full\" or \"small\") or a 'model' object",
            ))
        }
    };
    if let Some(seed) = cfg.seed {
        mc.seed = seed;
    }
    if let Some(seed) = seed_flag {
        mc.seed = seed;
    }
    Ok(mc)
}

fn data_root(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.data_root
        .as_deref()
        .ok_or_else(|| CliError::config("config needs 'data_root' for this command"))
}

/// Labeled clips plus the seeded split, with scan warnings forwarded to
/// stderr.
struct Dataset {
    clips: Vec<ClipRecord>,
    train: Vec<ClipRecord>,
    validation: Vec<ClipRecord>,
    test: Vec<ClipRecord>,
}

fn load_dataset(root: &Path, mc: &ModelConfig) -> Result<Dataset, CliError> {
    let metadata = load_metadata(root).or_family()?;
    let scan = build_clips(root, &metadata, mc.frames).or_family()?;
    for warning in &scan.warnings {
        eprintln!("warning: {warning}");
    }
    let plan = split_dataset(&scan.clips, mc.seed).or_family()?;
    let train = select_clips(&scan.clips, &plan.train).or_family()?;
    let validation = select_clips(&scan.clips, &plan.validation).or_family()?;
    let test = select_clips(&scan.clips, &plan.test).or_family()?;
    Ok(Dataset {
        clips: scan.clips,
        train,
        validation,
        test,
    })
}

fn load_weights_into(model: &mut ModelGraph<f32>, path: &Path) -> Result<(), CliError> {
    model
        .load_weights(path)
        .or_phase(EXIT_WEIGHTS, &format!("weights file '{}'", path.display()))
}

fn cmd_summary(common: &ConfigArgs, check_params: Option<usize>) -> Result<(), CliError> {
    let cfg = load_run_config(&common.config)?;
    let mc = resolve_model(&cfg, common.seed)?;
    let model: ModelGraph<f32> = build_model(&mc).or_family()?;
    print!("{}", model.summary());
    if let Some(expected) = check_params {
        let actual = model.param_count();
        if actual != expected {
            return Err(CliError::new(
                1,
                format!("parameter count {actual} does not match expected {expected}"),
            ));
        }
        println!("parameter count matches {expected}");
    }
    Ok(())
}

fn cmd_train(common: &ConfigArgs, out: &Path) -> Result<(), CliError> {
    let cfg = load_run_config(&common.config)?;
    let mc = resolve_model(&cfg, common.seed)?;
    let dataset = load_dataset(data_root(&cfg)?, &mc)?;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::new(1, format!("cannot create '{}': {e}", out.display())))?;
    let mut model: ModelGraph<f32> = build_model(&mc).or_family()?;
    let settings = TrainSettings {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        optimizer: cfg.optimizer,
        checkpoint_path: Some(out.join("weights.capw")),
    };
    let history =
        train_loop(&mut model, &dataset.train, &dataset.validation, &settings).or_family()?;
    let write = |name: &str, text: String| {
        std::fs::write(out.join(name), text)
            .map_err(|e| CliError::new(1, format!("cannot write '{name}': {e}")))
    };
    write("history.csv", history.to_csv())?;
    let summary =
        serde_json::to_string_pretty(&history.summary_json()).expect("history serializes") + "\n";
    write("summary.json", summary)?;
    println!(
        "trained {} epochs on {} clips ({} validation); best validation accuracy {} at epoch {}; artifacts in {}",
        history.records.len(),
        dataset.train.len(),
        dataset.validation.len(),
        history.best_validation_accuracy,
        history.best_epoch,
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(common: &ConfigArgs, weights: &Path, split: SplitName) -> Result<(), CliError> {
    let cfg = load_run_config(&common.config)?;
    let mc = resolve_model(&cfg, common.seed)?;
    let dataset = load_dataset(data_root(&cfg)?, &mc)?;
    let clips = match split {
        SplitName::Train => &dataset.train,
        SplitName::Validation => &dataset.validation,
        SplitName::Test => &dataset.test,
        SplitName::All => &dataset.clips,
    };
    let mut model: ModelGraph<f32> = build_model(&mc).or_family()?;
    load_weights_into(&mut model, weights)?;
    let report = evaluate_clips(&model, clips, cfg.batch_size).or_family()?;
    let line = serde_json::json!({
        "split": split.as_str(),
        "clips": clips.len(),
        "loss": report.loss,
        "accuracy": report.accuracy,
        "recall": report.recall,
        "auc": report.auc,
    });
    println!("{line}");
    Ok(())
}

/// Resolves `--clips` (or defaults to every labeled clip) in a stable order.
fn target_clips(dataset: &Dataset, requested: &[String]) -> Result<Vec<ClipRecord>, CliError> {
    if requested.is_empty() {
        Ok(dataset.clips.clone())
    } else {
        select_clips(&dataset.clips, requested).or_family()
    }
}

fn cmd_predict(common: &ConfigArgs, weights: &Path, requested: &[String]) -> Result<(), CliError> {
    let cfg = load_run_config(&common.config)?;
    let mc = resolve_model(&cfg, common.seed)?;
    let dataset = load_dataset(data_root(&cfg)?, &mc)?;
    let targets = target_clips(&dataset, requested)?;
    let mut model: ModelGraph<f32> = build_model(&mc).or_family()?;
    load_weights_into(&mut model, weights)?;
    let mut next = 0usize;
    for batch in batch_iterator::<f32>(&targets, cfg.batch_size, mc.frames, mc.height, mc.width)
        .or_family()?
    {
        let (frames, _) = batch.or_family()?;
        let probs = model.model_forward(&frames).or_family()?;
        for row in 0..frames.shape()[0] {
            let p_fake = probs.data()[row * 2 + 1] as f64;
            let label = if p_fake > probs.data()[row * 2] as f64 {
                Label::Fake
            } else {
                Label::Real
            };
            let line = serde_json::json!({
                "clip_id": targets[next].clip_id,
                "label": label.as_str(),
                "p_fake": p_fake,
            });
            println!("{line}");
            next += 1;
        }
    }
    Ok(())
}

fn cmd_explain(
    common: &ConfigArgs,
    weights: &Path,
    out: &Path,
    requested: &[String],
    layer: &str,
    class: Option<usize>,
    alpha: f64,
) -> Result<(), CliError> {
    let cfg = load_run_config(&common.config)?;
    let mc = resolve_model(&cfg, common.seed)?;
    let dataset = load_dataset(data_root(&cfg)?, &mc)?;
    let targets = target_clips(&dataset, requested)?;
    let mut model: ModelGraph<f32> = build_model(&mc).or_family()?;
    load_weights_into(&mut model, weights)?;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::new(1, format!("cannot create '{}': {e}", out.display())))?;
    let frame_len = mc.height * mc.width * mc.channels;
    for record in &targets {
        let mut batches = batch_iterator::<f32>(
            std::slice::from_ref(record),
            1,
            mc.frames,
            mc.height,
            mc.width,
        )
        .or_family()?;
        let (frames, _) = batches
            .next()
            .expect("one clip yields one batch")
            .or_family()?;
        let clip = frames
            .reshape(&[mc.frames, mc.height, mc.width, mc.channels])
            .or_family()?;
        let target_class = match class {
            Some(c) => c,
            None => {
                let (probs, _) = model.forward_clip(&clip).or_family()?;
                usize::from(probs.data()[1] > probs.data()[0])
            }
        };
        let cam = gradcam(&mut model, &clip, target_class, layer).or_family()?;
        // Overlay on the clip's final frame: it is the frame nearest in time
        // to the recurrent state the map was computed from.
        let last = Tensor::new(
            &[mc.height, mc.width, mc.channels],
            clip.data()[(mc.frames - 1) * frame_len..].to_vec(),
        )
        .or_family()?;
        let overlay = render_overlay(&last, &cam.map, alpha).or_family()?;
        let file = out.join(heatmap_filename(&record.clip_id, target_class));
        write_image(&file, &overlay).or_family()?;
        let line = serde_json::json!({
            "clip_id": record.clip_id,
            "class": target_class,
            "p_fake": cam.probs.data()[1] as f64,
            "file": file.display().to_string(),
        });
        println!("{line}");
    }
    Ok(())
}
