use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use commet_core::dataset::write_records;
use commet_core::eval::{
    evaluate, export_finetune, grid, split_dataset, sweep, EvalOptions, Parameter, SeparateRetrieval, SplitPlan,
    Tunable, UnifiedRetrieval,
};
use commet_core::retrieval::{build_multimodal_buffer, build_speech_buffer, PromptStyle, SpeechBufferOptions};
use commet_core::synth::{write_corpus, SynthConfig};
use commet_core::{
    ConflictDetector, Dataset, DatasetRecord, DetectionInput, EngineConfig, Error, ImageRef, MultiModalBuffer,
    Result,
};
use commet_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "commet", version, about = "Human-induced conflict detection and preference prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled corpus (dataset.jsonl + images/).
    Synth(SynthArgs),
    /// Hold out whole trajectories and some statics; writes train.jsonl, test.jsonl, plan.json.
    Split(SplitArgs),
    /// Write an engine config using mock providers and backend.
    InitConfig(InitConfigArgs),
    /// Embed a dataset into the speech and multi-modal buffers named by the config.
    BuildBuffer(BuildBufferArgs),
    /// Detect the conflict in one observation; prints a JSON result.
    Detect(DetectArgs),
    /// Evaluate a detector on a labeled test set; prints metrics JSON and a table.
    Eval(EvalArgs),
    /// Evaluate over a grid of one parameter and select the best value.
    Sweep(SweepArgs),
    /// Write chat-format fine-tuning records.
    ExportFinetune(ExportArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Same shape as the reference dataset: 134 statics, 1625 trajectory frames.
    Full,
    /// 40 statics and six 40-frame trajectories.
    Small,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Defaults to the dataset's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Explicit hold-out plan (JSON with `trajectories` and `statics` id lists).
    #[arg(long, conflicts_with_all = ["tasks", "statics"])]
    plan: Option<PathBuf>,
    /// Hold out every trajectory of this many tasks (alphabetical).
    #[arg(long, default_value_t = 2)]
    tasks: usize,
    /// Hold out this many static records (alphabetical by id).
    #[arg(long, default_value_t = 32)]
    statics: usize,
}

#[derive(Args)]
struct InitConfigArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    dimension: usize,
    /// Buffer paths, relative to the config file.
    #[arg(long, default_value = "buffers/speech.jsonl")]
    speech: PathBuf,
    #[arg(long, default_value = "buffers/multimodal.jsonl")]
    multimodal: PathBuf,
    #[arg(long, default_value = "buffers/unified.jsonl")]
    unified: PathBuf,
}

#[derive(Args)]
struct BuildBufferArgs {
    #[arg(long)]
    config: PathBuf,
    /// Usually the training split.
    #[arg(long)]
    dataset: PathBuf,
    /// Also build the speech-inclusive buffer for the unified baseline.
    #[arg(long)]
    unified: bool,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long)]
    step: String,
    #[arg(long)]
    speech: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DetectorKind {
    /// Speech gate, task gate, model escalation.
    Pipeline,
    /// Speech gate then best multi-modal match; never calls the model.
    Separate,
    /// One retrieval over speech-inclusive prompts.
    Unified,
}

#[derive(Args)]
struct EvalTarget {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_enum)]
    detector: Option<DetectorKind>,
    /// Run records concurrently; disables per-record latency measurement.
    #[arg(long)]
    parallel: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    target: EvalTarget,
    /// Write the full report (metrics and per-record outcomes) here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    target: EvalTarget,
    #[arg(long, value_parser = parse_parameter)]
    param: Parameter,
    /// `start:end:step`, or a comma-separated list. Defaults per parameter.
    #[arg(long)]
    grid: Option<String>,
    /// Accuracy points within which two values count as tied.
    #[arg(long, default_value_t = 0.0)]
    tolerance: f64,
    #[arg(long)]
    json: Option<PathBuf>,
    /// Accuracy-versus-value table.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Takes the detection prompt from this config's backend section.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Engine config. Without it only the preference endpoints work.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "commet-data")]
    data_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Require `Authorization: Bearer <token>` on every route but health.
    #[arg(long, env = "COMMET_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Allowed browser origin; repeatable, `*` for any.
    #[arg(long = "cors-origin")]
    cors_origins: Vec<String>,
}

fn parse_parameter(s: &str) -> std::result::Result<Parameter, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::InitConfig(a) => init_config(a),
        Command::BuildBuffer(a) => build_buffer(a),
        Command::Detect(a) => detect(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::ExportFinetune(a) => export(a),
        Command::Serve(a) => serve(a),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json("stdout", e))?;
    print_line(&text)
}

/// Like `println!`, but a closed pipe (`commet ... | head`) is not an error.
fn print_line(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn synth(a: SynthArgs) -> Result<()> {
    let config = match a.preset {
        Preset::Full => SynthConfig::full(a.seed),
        Preset::Small => SynthConfig::small(a.seed),
    };
    let dataset = write_corpus(&config, &a.out)?;
    print_json(&serde_json::json!({
        "dataset": a.out.join("dataset.jsonl"),
        "records": dataset.len(),
        "statics": dataset.records.iter().filter(|r| r.is_static()).count(),
    }))
}

fn split(a: SplitArgs) -> Result<()> {
    let dataset = Dataset::load(&a.dataset)?;
    let plan = match &a.plan {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?
        }
        None => SplitPlan::first(&dataset.records, a.tasks, a.statics),
    };
    let parts = split_dataset(&dataset.records, &plan)?;
    let out = a.out.unwrap_or_else(|| dataset.root.clone());
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    // relative image paths only survive if the files stay next to the images
    let same_dir = same_path(&out, &dataset.root);
    let fix = |records: Vec<DatasetRecord>| -> Result<Vec<DatasetRecord>> {
        if same_dir {
            return Ok(records);
        }
        records
            .into_iter()
            .map(|mut r| {
                let path = r.image_path(&dataset.root);
                let abs = std::fs::canonicalize(&path).map_err(|e| Error::io(&path, e))?;
                r.image = abs.to_string_lossy().into_owned();
                Ok(r)
            })
            .collect()
    };
    let (train, test) = (fix(parts.buffer_train)?, fix(parts.test)?);
    write_records(&out.join("train.jsonl"), &train)?;
    write_records(&out.join("test.jsonl"), &test)?;
    write_file(
        &out.join("plan.json"),
        serde_json::to_string_pretty(&plan).map_err(|e| Error::json("plan", e))?,
    )?;
    print_json(&serde_json::json!({
        "train": train.len(),
        "test": test.len(),
        "held_out_trajectories": plan.trajectories,
        "held_out_statics": plan.statics.len(),
    }))
}

fn same_path(a: &Path, b: &Path) -> bool {
    match (std::fs::canonicalize(a), std::fs::canonicalize(b)) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}

fn init_config(a: InitConfigArgs) -> Result<()> {
    let mut config = EngineConfig::mock(a.seed, a.dimension, a.speech, a.multimodal);
    config.buffers.unified = Some(a.unified);
    write_file(&a.out, config.to_toml()?)?;
    print_line(&a.out.display().to_string())
}

fn build_buffer(a: BuildBufferArgs) -> Result<()> {
    let config = EngineConfig::load(&a.config)?;
    let providers = config.build_providers()?;
    let dataset = Dataset::load(&a.dataset)?;
    let options = SpeechBufferOptions {
        store_noise: config.buffers.store_noise,
    };
    let speech = build_speech_buffer(&dataset.records, providers.text.as_ref(), options)?;
    speech.save(&config.buffers.speech)?;
    let mm = build_multimodal_buffer(&dataset.records, &dataset.root, &providers, PromptStyle::Separate)?;
    mm.save(&config.buffers.multimodal)?;
    let mut summary = serde_json::json!({
        "speech": { "path": config.buffers.speech, "entries": speech.len() },
        "multimodal": { "path": config.buffers.multimodal, "entries": mm.len() },
    });
    if a.unified {
        let path = config
            .buffers
            .unified
            .clone()
            .ok_or_else(|| Error::Config("--unified needs buffers.unified in the config".into()))?;
        let unified = build_multimodal_buffer(&dataset.records, &dataset.root, &providers, PromptStyle::Unified)?;
        unified.save(&path)?;
        summary["unified"] = serde_json::json!({ "path": path, "entries": unified.len() });
    }
    print_json(&summary)
}

fn detect(a: DetectArgs) -> Result<()> {
    let config = EngineConfig::load(&a.config)?;
    let detector = config.build_detector(config.build_providers()?)?;
    let input = DetectionInput::new(ImageRef::Path(a.image), a.task, a.step, a.speech);
    print_json(&detector.detect(&input)?)
}

/// The pipeline, or one of the retrieval-only baselines.
enum Target {
    Pipeline(commet_core::Detector),
    Separate(SeparateRetrieval),
    Unified(UnifiedRetrieval),
}

impl Target {
    fn load(config_path: &Path, kind: DetectorKind) -> Result<Target> {
        let config = EngineConfig::load(config_path)?;
        let providers = config.build_providers()?;
        Ok(match kind {
            DetectorKind::Pipeline => Target::Pipeline(config.build_detector(providers)?),
            DetectorKind::Separate => Target::Separate(SeparateRetrieval::from_detector(&config.build_detector(providers)?)?),
            DetectorKind::Unified => {
                let path = config
                    .buffers
                    .unified
                    .as_ref()
                    .ok_or_else(|| Error::Config("the unified baseline needs buffers.unified in the config".into()))?;
                let buffer = MultiModalBuffer::load(path)?;
                Target::Unified(UnifiedRetrieval::new(providers, Arc::new(buffer), config.detection.w)?)
            }
        })
    }

    fn detector(&self) -> &dyn ConflictDetector {
        match self {
            Target::Pipeline(d) => d,
            Target::Separate(d) => d,
            Target::Unified(d) => d,
        }
    }

    fn tunable(&self) -> &dyn Tunable {
        match self {
            Target::Pipeline(d) => d,
            Target::Separate(d) => d,
            Target::Unified(d) => d,
        }
    }
}

fn eval_options(parallel: Option<usize>) -> EvalOptions {
    match parallel {
        Some(n) if n > 1 => EvalOptions {
            parallelism: n,
            measure_latency: false,
        },
        _ => EvalOptions::default(),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let target = Target::load(&a.target.config, a.target.detector.unwrap_or(DetectorKind::Pipeline))?;
    let test = Dataset::load(&a.target.test)?;
    let report = evaluate(&test, target.detector(), &eval_options(a.target.parallel))?;
    if let Some(path) = &a.report {
        write_file(path, serde_json::to_string_pretty(&report).map_err(|e| Error::json("report", e))?)?;
    }
    print_json(&report.metrics)?;
    eprint!("{}", report.metrics.table());
    Ok(())
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidArgument(format!("bad grid {spec:?}; use start:end:step or a,b,c"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() == 3 {
        let nums: Vec<f64> = parts.iter().map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
        return grid(nums[0], nums[1], nums[2]);
    }
    let values: Vec<f64> = spec
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(bad());
    }
    Ok(values)
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    // tau_t only exists on the full pipeline; w and tau_s are swept retrieval-only so
    // the model is never called
    let kind = a.target.detector.unwrap_or(match a.param {
        Parameter::TauT => DetectorKind::Pipeline,
        Parameter::W | Parameter::TauS => DetectorKind::Separate,
    });
    let target = Target::load(&a.target.config, kind)?;
    let test = Dataset::load(&a.target.test)?;
    let values = match &a.grid {
        Some(spec) => parse_grid(spec)?,
        None => a.param.default_grid(),
    };
    let result = sweep(a.param, &values, &test, target.tunable(), &eval_options(a.target.parallel), a.tolerance)?;
    if let Some(path) = &a.csv {
        write_file(path, result.to_csv())?;
    }
    let json = serde_json::to_string_pretty(&result).map_err(|e| Error::json("sweep", e))?;
    match &a.json {
        Some(path) => {
            write_file(path, json)?;
            print_line(&format!("{}={}", a.param.as_str(), result.selected))?;
        }
        None => print_line(&json)?,
    }
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let prompt = match &a.config {
        Some(path) => EngineConfig::load(path)?.detection_prompt()?,
        None => Default::default(),
    };
    let dataset = Dataset::load(&a.dataset)?;
    let n = export_finetune(&dataset, &dataset.records, &prompt, &a.out)?;
    print_json(&serde_json::json!({ "out": a.out, "records": n }))
}

fn serve(a: ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        listen: a.listen,
        engine_config: a.config,
        data_dir: a.data_dir,
        auth_token: a.token.filter(|t| !t.is_empty()),
        cors_origins: a.cors_origins,
    }
    .with_env_overrides()?;
    commet_service::run(config)
}
