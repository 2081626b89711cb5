//! The `tee` command line: generation, sampling, training, inference and
//! reporting as separate, reproducible steps sharing one run directory.
//!
//! Configuration precedence: built-in defaults, then the `--config` file, then
//! flags. The run seed is fanned out to every module, so module-level seeds in
//! the file are overwritten.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::Backbone;
use crate::detector::{
    load_detector, save_detector, train_toy_detector, write_detections, DetectionSet, Detector, DetectorKind,
    DetectorTrainConfig, OracleDetector,
};
use crate::error::Error;
use crate::geometry::{ObjectAnnotation, SceneryLabel};
use crate::metrics::{
    assemble_report, classifier_csv, comparison_csv, default_iou_thresholds, mac_csv, mean_average_precision, mean_iou,
    reference_rows, ComparisonRow, EvalInputs, EvalReport, MacReport, RunStats, Tagged,
};
use crate::pipeline::{write_trace, GateKind, Models, Pipeline, PipelineConfig};
use crate::sampler::{read_pairs, sample_balanced_pairs, split_dataset, write_pairs, SamplerConfig};
use crate::seeds::derive_named;
use crate::synthgen::{
    generate_corpus_configs, generate_video, mostly_static_scene, read_corpus, read_dataset, write_corpus,
    write_dataset, write_png, CorpusConfig, Image, SuiteConfig, SyntheticVideo,
};
use crate::teem::Teem;
use crate::trainer::{evaluate_classifier, load_teems, save_teems, train_teems, ClassifierReport, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub iou_thresholds: Vec<f64>,
    /// Recompute intervals of the fixed-step baselines in the comparison table.
    pub fixed_steps: Vec<usize>,
    /// Test pairs rendered by `cam`.
    pub cam_pairs: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: default_iou_thresholds(),
            fixed_steps: vec![7, 10, 20],
            cam_pairs: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub version: u32,
    pub run_id: String,
    pub seed: u64,
    pub corpus: CorpusConfig,
    /// Evaluation video; omitted means inference runs on the corpus.
    pub suite: Option<SuiteConfig>,
    pub sampler: SamplerConfig,
    /// Train and test shares of the sampled pairs.
    pub split: [f64; 2],
    pub detector: DetectorTrainConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub metrics: MetricsConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            run_id: "run".into(),
            seed: 0,
            corpus: CorpusConfig::default(),
            suite: Some(SuiteConfig::default()),
            sampler: SamplerConfig::default(),
            split: [0.8, 0.2],
            detector: DetectorTrainConfig::default(),
            train: TrainConfig::default(),
            pipeline: PipelineConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl CliConfig {
    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: CliConfig = serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::schema(
                path,
                format!("config version {} is not supported (expected {CONFIG_VERSION})", cfg.version),
            ));
        }
        Ok(cfg)
    }

    fn apply(&mut self, flags: &CommonArgs) {
        if let Some(s) = flags.seed {
            self.seed = s;
        }
        if let Some(g) = flags.gamma {
            self.pipeline.gamma = g;
        }
        if let Some(t) = flags.tau_var {
            self.sampler.tau_var = t;
            self.train.tau_var = t;
            self.pipeline.tau_var = t;
        }
        if let Some(e) = &flags.exits {
            self.pipeline.exits = e.clone();
        }
        if let Some(d) = flags.detector {
            self.pipeline.detector = match d {
                DetectorArg::Toy => DetectorKind::ToyHead,
                DetectorArg::Oracle => match self.pipeline.detector {
                    k @ DetectorKind::Oracle { .. } => k,
                    DetectorKind::ToyHead => DetectorKind::Oracle {
                        jitter_sigma: 0.0,
                        drop_prob: 0.0,
                    },
                },
            };
        }
        if let Some(n) = flags.fixed_step {
            self.pipeline.fixed_step = Some(n);
        }
    }

    /// Fans the run seed out to every module.
    fn fan_out_seeds(&mut self) {
        let s = self.seed;
        self.corpus.seed = derive_named(s, "corpus");
        if let Some(suite) = &mut self.suite {
            suite.seed = derive_named(s, "suite");
        }
        self.sampler.seed = derive_named(s, "sampler");
        self.detector.seed = derive_named(s, "detector");
        self.detector.backbone.seed = derive_named(s, "backbone");
        self.train.seed = derive_named(s, "train");
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.corpus.validate()?;
        self.sampler.validate()?;
        self.detector.backbone.validate()?;
        self.detector.head.validate()?;
        self.train.validate()?;
        self.pipeline.validate()?;
        let [a, b] = self.split;
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || (a + b - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split [{a}, {b}] must lie in [0, 1] and sum to 1")));
        }
        if self.metrics.fixed_steps.contains(&0) {
            return Err(Error::Config("fixed_steps must be positive".into()));
        }
        if self.run_id.is_empty() {
            return Err(Error::Config("run_id must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DetectorArg {
    Toy,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataArg {
    Suite,
    Corpus,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed, fanned out to every module
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Entropy threshold of the exit gate
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub gamma: Option<f64>,
    /// Variation threshold for the scenery-change label
    #[arg(long = "tau-var", global = true, allow_negative_numbers = true)]
    pub tau_var: Option<f64>,
    /// Enabled exits, e.g. 1,2,3,4
    #[arg(long, global = true, value_delimiter = ',')]
    pub exits: Option<Vec<usize>>,
    #[arg(long, global = true, value_enum)]
    pub detector: Option<DetectorArg>,
    /// Recompute every N frames instead of gating (baseline mode)
    #[arg(long = "fixed-step", global = true)]
    pub fixed_step: Option<usize>,
}

#[derive(Debug, Parser)]
#[command(name = "tee", version, about = "Temporal early-exit video object detection")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the training corpus and the evaluation suite
    GenData,
    /// Draw bin-balanced frame pairs and split them
    SamplePairs,
    /// Train the feature network and toy detection head
    TrainDetector,
    /// Train the exits on the frozen feature network
    TrainTeems,
    /// Run the pipeline, writing traces and detections
    Infer {
        #[arg(long, value_enum)]
        data: Option<DataArg>,
    },
    /// Score the last inference run
    Eval,
    /// Render class activation maps of test pairs
    Cam,
    /// Assemble the report and comparison tables
    Report,
}

/// Exit status categories.
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(err) if err.is_config_error() => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("TEE_LOG_LEVEL", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

struct Ctx {
    cfg: CliConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn corpus(&self) -> anyhow::Result<Vec<SyntheticVideo>> {
        Ok(read_corpus(&self.path("data/corpus")).context("reading the corpus (run gen-data first)")?)
    }

    fn eval_videos(&self, data: Option<DataArg>) -> anyhow::Result<(DataArg, Vec<SyntheticVideo>)> {
        let which = data.unwrap_or(if self.cfg.suite.is_some() { DataArg::Suite } else { DataArg::Corpus });
        let videos = match which {
            DataArg::Suite => vec![read_dataset(&self.path("data/suite")).context("reading the suite (run gen-data first)")?],
            DataArg::Corpus => self.corpus()?,
        };
        Ok((which, videos))
    }

    fn models(&self) -> anyhow::Result<Models> {
        let (backbone, head) =
            load_detector(&self.path("models/detector.ckpt")).context("loading the detector (run train-detector first)")?;
        let teems = load_teems(&self.path("models/teems.ckpt")).context("loading the exits (run train-teems first)")?;
        let detector = match self.cfg.pipeline.detector {
            DetectorKind::ToyHead => Detector::Toy(head),
            DetectorKind::Oracle { jitter_sigma, drop_prob } => Detector::Oracle(OracleDetector {
                jitter_sigma,
                drop_prob,
                seed: self.cfg.seed,
            }),
        };
        Ok(Models {
            backbone,
            teems,
            detector,
        })
    }

    fn manifest(&self, command: &str, stage_dir: &str, inputs: &[&str]) -> anyhow::Result<()> {
        let dir = self.path(stage_dir);
        let m = Manifest {
            command: command.into(),
            run_id: self.cfg.run_id.clone(),
            seed: self.cfg.seed,
            config: self.cfg.clone(),
            inputs: hash_paths(&self.out, inputs)?,
            outputs: hash_paths(&self.out, &[stage_dir])?,
        };
        write_json(&dir.join("manifest.json"), &m)
    }
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    run_id: String,
    seed: u64,
    config: CliConfig,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))?)
}

/// SHA-256 of every file under the given paths (relative to `root`), keyed by
/// relative path; manifests themselves are skipped.
fn hash_paths(root: &Path, rels: &[&str]) -> anyhow::Result<BTreeMap<String, String>> {
    fn walk(p: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        if p.is_dir() {
            for e in fs::read_dir(p)? {
                walk(&e?.path(), out)?;
            }
        } else if p.is_file() && p.file_name().is_some_and(|n| n != "manifest.json") {
            out.push(p.to_path_buf());
        }
        Ok(())
    }
    let mut files = Vec::new();
    for r in rels {
        let p = root.join(r);
        if p.exists() {
            walk(&p, &mut files).with_context(|| format!("listing {}", p.display()))?;
        }
    }
    let mut out = BTreeMap::new();
    for f in files {
        let bytes = fs::read(&f).with_context(|| format!("hashing {}", f.display()))?;
        let rel = f.strip_prefix(root).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        out.insert(rel, hex::encode(Sha256::digest(&bytes)));
    }
    Ok(out)
}

/// Removes and recreates a stage directory so reruns never mix outputs.
fn fresh_dir(p: &Path) -> anyhow::Result<()> {
    if p.exists() {
        fs::remove_dir_all(p).with_context(|| format!("clearing {}", p.display()))?;
    }
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    cfg.apply(&cli.common);
    cfg.fan_out_seeds();
    cfg.validate()?;
    let ctx = Ctx {
        cfg,
        out: cli.common.out.clone().unwrap_or_else(|| PathBuf::from("tee-run")),
    };
    fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    match cli.command {
        Command::GenData => gen_data(&ctx),
        Command::SamplePairs => sample_pairs(&ctx),
        Command::TrainDetector => train_detector(&ctx),
        Command::TrainTeems => train_exits(&ctx),
        Command::Infer { data } => infer(&ctx, data),
        Command::Eval => eval(&ctx),
        Command::Cam => cam(&ctx),
        Command::Report => report(&ctx),
    }
}

fn gen_data(ctx: &Ctx) -> anyhow::Result<()> {
    fresh_dir(&ctx.path("data"))?;
    let videos = generate_corpus_configs(&ctx.cfg.corpus)?
        .iter()
        .map(generate_video)
        .collect::<crate::Result<Vec<_>>>()?;
    write_corpus(&videos, &ctx.path("data/corpus"))?;
    log::info!("wrote {} corpus videos", videos.len());
    if let Some(suite) = &ctx.cfg.suite {
        let v = generate_video(&mostly_static_scene(suite)?)?;
        write_dataset(&v, &ctx.path("data/suite"))?;
        log::info!("wrote suite of {} frames", v.len());
    }
    ctx.manifest("gen-data", "data", &[])
}

fn sample_pairs(ctx: &Ctx) -> anyhow::Result<()> {
    let videos = ctx.corpus()?;
    fresh_dir(&ctx.path("pairs"))?;
    let (samples, ledger) = sample_balanced_pairs(&videos, &ctx.cfg.sampler)?;
    let [a, b] = ctx.cfg.split;
    let (train, test) = split_dataset(&samples, (a, b), derive_named(ctx.cfg.seed, "split"))?;
    write_pairs(&ctx.path("pairs/all.jsonl"), &samples)?;
    write_pairs(&ctx.path("pairs/train.jsonl"), &train)?;
    write_pairs(&ctx.path("pairs/test.jsonl"), &test)?;
    write_json(&ctx.path("pairs/ledger.json"), &ledger)?;
    log::info!("sampled {} pairs ({} train / {} test)", samples.len(), train.len(), test.len());
    ctx.manifest("sample-pairs", "pairs", &["data/corpus"])
}

fn train_detector(ctx: &Ctx) -> anyhow::Result<()> {
    let videos = ctx.corpus()?;
    fs::create_dir_all(ctx.path("models"))?;
    let (backbone, head, history) = train_toy_detector(&videos, &ctx.cfg.detector)?;
    save_detector(&ctx.path("models/detector.ckpt"), &backbone, &head)?;
    write_json(&ctx.path("models/detector_history.json"), &history)?;
    ctx.manifest("train-detector", "models", &["data/corpus"])
}

fn train_exits(ctx: &Ctx) -> anyhow::Result<()> {
    let videos = ctx.corpus()?;
    let train = read_pairs(&ctx.path("pairs/train.jsonl")).context("reading pairs (run sample-pairs first)")?;
    let test = read_pairs(&ctx.path("pairs/test.jsonl"))?;
    let (backbone, _) = load_detector(&ctx.path("models/detector.ckpt")).context("run train-detector first")?;
    let (teems, history) = train_teems(&backbone, &train, &videos, &ctx.cfg.train)?;
    save_teems(
        &ctx.path("models/teems.ckpt"),
        &teems,
        serde_json::json!({ "run_id": ctx.cfg.run_id, "train": ctx.cfg.train }),
    )?;
    write_json(&ctx.path("models/teem_history.json"), &history)?;
    if !test.is_empty() {
        let report = evaluate_classifier(&teems, &backbone, &test, &videos)?;
        write_json(&ctx.path("models/classifier.json"), &Tagged::new(ctx.cfg.run_id.clone(), report))?;
    }
    ctx.manifest("train-teems", "models", &["data/corpus", "pairs"])
}

#[derive(Debug, Serialize, Deserialize)]
struct InferSummary {
    run_id: String,
    data: String,
    frames_per_video: BTreeMap<String, usize>,
    pipeline: PipelineConfig,
    costs: MacReport,
    stats: RunStats,
}

fn run_pipeline(
    models: &Models,
    config: &PipelineConfig,
    videos: &[SyntheticVideo],
) -> anyhow::Result<(Vec<Vec<crate::pipeline::FrameResult>>, RunStats, MacReport)> {
    let mut p = Pipeline::with_models(config.clone(), models.clone())?;
    let mut all = Vec::new();
    let mut stats = Vec::new();
    for v in videos {
        let (res, s) = p.process_video(v)?;
        all.push(res);
        stats.push(s);
    }
    let costs = p.costs().expect("models loaded").clone();
    Ok((all, RunStats::merge(&stats)?, costs))
}

fn infer(ctx: &Ctx, data: Option<DataArg>) -> anyhow::Result<()> {
    let (which, videos) = ctx.eval_videos(data)?;
    let models = ctx.models()?;
    fresh_dir(&ctx.path("infer"))?;
    let (results, stats, costs) = run_pipeline(&models, &ctx.cfg.pipeline, &videos)?;
    for (v, res) in videos.iter().zip(&results) {
        write_trace(&ctx.path("infer/traces.jsonl"), &v.video_id, res)?;
        let sets: Vec<DetectionSet> = res.iter().map(|r| r.detections.clone()).collect();
        write_detections(&ctx.path("infer/detections.jsonl"), &v.video_id, &sets)?;
    }
    // make sure both files exist even for detection-free runs
    for f in ["infer/traces.jsonl", "infer/detections.jsonl"] {
        if !ctx.path(f).exists() {
            fs::write(ctx.path(f), "")?;
        }
    }
    log::info!(
        "{} frames, updating ratio {:.2}, MAC speedup {:.2}",
        stats.frames,
        stats.updating_ratio,
        stats.mac_speedup
    );
    let summary = InferSummary {
        run_id: ctx.cfg.run_id.clone(),
        data: format!("{which:?}").to_lowercase(),
        frames_per_video: videos.iter().map(|v| (v.video_id.clone(), v.len())).collect(),
        pipeline: ctx.cfg.pipeline.clone(),
        costs,
        stats,
    };
    write_json(&ctx.path("infer/summary.json"), &summary)?;
    ctx.manifest("infer", "infer", &["data", "models"])
}

fn annotations(videos: &[SyntheticVideo]) -> Vec<Vec<ObjectAnnotation>> {
    videos
        .iter()
        .flat_map(|v| v.frames.iter().map(|f| f.annotations.clone()))
        .collect()
}

fn eval(ctx: &Ctx) -> anyhow::Result<()> {
    let summary: InferSummary = read_json(&ctx.path("infer/summary.json")).context("run infer first")?;
    let which = if summary.data == "suite" { DataArg::Suite } else { DataArg::Corpus };
    let (_, videos) = ctx.eval_videos(Some(which))?;
    let by_video = crate::detector::read_detections(&ctx.path("infer/detections.jsonl"), &summary.frames_per_video)?;
    let detections: Vec<DetectionSet> = videos
        .iter()
        .flat_map(|v| by_video.get(&v.video_id).cloned().unwrap_or_default())
        .collect();
    let inputs = EvalInputs {
        detections,
        annotations: annotations(&videos),
        thresholds: ctx.cfg.metrics.iou_thresholds.clone(),
    };
    let classifier: Option<Tagged<ClassifierReport>> = if ctx.path("models/classifier.json").exists() {
        Some(read_json(&ctx.path("models/classifier.json"))?)
    } else {
        None
    };
    let report = assemble_report(
        classifier.as_ref().map(|c| Tagged::new(c.run_id.clone(), &c.value)),
        Some(Tagged::new(summary.run_id.clone(), &summary.stats)),
        Tagged::new(ctx.cfg.run_id.clone(), &inputs),
        serde_json::to_value(&ctx.cfg)?,
    )?;
    fresh_dir(&ctx.path("eval"))?;
    fs::write(ctx.path("eval/report.json"), report.to_json()?)?;
    println!(
        "mAP {:.4}  mIoU {:.4}  updating ratio {:.2}  MAC speedup {:.2}",
        report.map, report.miou, summary.stats.updating_ratio, summary.stats.mac_speedup
    );
    ctx.manifest("eval", "eval", &["infer", "models/classifier.json"])
}

/// Nearest-neighbour upsampling of a `[0, 1]` map into a grey image.
fn heat_image(map: &ndarray::Array2<f64>, size: (usize, usize)) -> Image {
    let (h, w) = map.dim();
    let (iw, ih) = size;
    let mut data = Vec::with_capacity(iw * ih * 3);
    for y in 0..ih {
        for x in 0..iw {
            let v = map[[y * h / ih, x * w / iw]].clamp(0.0, 1.0);
            let g = (v * 255.0).round() as u8;
            data.extend_from_slice(&[g, g, g]);
        }
    }
    Image::new(iw, ih, data).expect("sized buffer")
}

/// Tiles images left to right.
fn hstack(images: &[Image]) -> Image {
    let h = images.iter().map(|i| i.height).max().unwrap_or(0);
    let w: usize = images.iter().map(|i| i.width).sum();
    let mut data = vec![0u8; w * h * 3];
    let mut x0 = 0;
    for img in images {
        for y in 0..img.height {
            let src = &img.data[y * img.width * 3..(y + 1) * img.width * 3];
            let dst = (y * w + x0) * 3;
            data[dst..dst + src.len()].copy_from_slice(src);
        }
        x0 += img.width;
    }
    Image::new(w, h, data).expect("sized buffer")
}

fn cam(ctx: &Ctx) -> anyhow::Result<()> {
    let videos = ctx.corpus()?;
    let test = read_pairs(&ctx.path("pairs/test.jsonl")).context("run sample-pairs first")?;
    let (backbone, _) = load_detector(&ctx.path("models/detector.ckpt"))?;
    let teems = load_teems(&ctx.path("models/teems.ckpt"))?;
    let mut pairs: Vec<_> = test.iter().filter(|s| s.label == SceneryLabel::Changed).collect();
    pairs.sort_by(|a, b| b.max_mfi.partial_cmp(&a.max_mfi).unwrap());
    pairs.truncate(ctx.cfg.metrics.cam_pairs);
    fresh_dir(&ctx.path("cam"))?;
    for (k, s) in pairs.iter().enumerate() {
        let v = videos
            .iter()
            .find(|v| v.video_id == s.video_id)
            .with_context(|| format!("pair refers to unknown video {}", s.video_id))?;
        let (fi, fj) = (&v.frames[s.frame_i], &v.frames[s.frame_j]);
        let ti = backbone.forward_taps(&fi.image)?;
        let tj = backbone.forward_taps(&fj.image)?;
        let mut row = vec![fi.image.clone(), fj.image.clone()];
        for (l, teem) in teems.iter().enumerate() {
            let m = teem.class_activation_map(&ti[l], &tj[l], SceneryLabel::Changed)?;
            row.push(heat_image(&m, (fi.image.width, fi.image.height)));
        }
        write_png(&ctx.path(&format!("cam/pair_{k:02}.png")), &hstack(&row))?;
    }
    ctx.manifest("cam", "cam", &["data/corpus", "pairs/test.jsonl", "models"])
}

fn score(
    sets: &[Vec<crate::pipeline::FrameResult>],
    anns: &[Vec<ObjectAnnotation>],
    thresholds: &[f64],
) -> anyhow::Result<(f64, f64)> {
    let dets: Vec<DetectionSet> = sets.iter().flatten().map(|r| r.detections.clone()).collect();
    let ap = mean_average_precision(&dets, anns, thresholds)?;
    Ok((ap.map, mean_iou(&dets, anns)?))
}

#[derive(Debug, Serialize)]
struct FullReport {
    eval: EvalReport,
    costs: MacReport,
    comparison: Vec<ComparisonRow>,
}

fn report(ctx: &Ctx) -> anyhow::Result<()> {
    let (_, videos) = ctx.eval_videos(None)?;
    let models = ctx.models()?;
    let anns = annotations(&videos);
    let thresholds = &ctx.cfg.metrics.iou_thresholds;
    let mut rows = Vec::new();
    let mut variant = |name: String, cfg: PipelineConfig| -> anyhow::Result<(RunStats, Vec<DetectionSet>, MacReport)> {
        let (res, stats, costs) = run_pipeline(&models, &cfg, &videos)?;
        let (map, miou) = score(&res, &anns, thresholds)?;
        rows.push(ComparisonRow {
            method: name,
            map,
            miou,
            updating_ratio: stats.updating_ratio,
            mac_speedup: stats.mac_speedup,
        });
        let dets = res.into_iter().flatten().map(|r| r.detections).collect();
        Ok((stats, dets, costs))
    };
    let base = PipelineConfig {
        fixed_step: None,
        gate: GateKind::Teem,
        ..ctx.cfg.pipeline.clone()
    };
    variant("per-frame".into(), PipelineConfig {
        fixed_step: Some(1),
        ..base.clone()
    })?;
    for &n in &ctx.cfg.metrics.fixed_steps {
        variant(format!("fixed-step-{n}"), PipelineConfig {
            fixed_step: Some(n),
            ..base.clone()
        })?;
    }
    variant("ground-truth gate".into(), PipelineConfig {
        gate: GateKind::GroundTruth,
        ..base.clone()
    })?;
    let (stats, dets, costs) = variant("temporal early exit".into(), base)?;

    let classifier: Option<Tagged<ClassifierReport>> = if ctx.path("models/classifier.json").exists() {
        Some(read_json(&ctx.path("models/classifier.json"))?)
    } else {
        None
    };
    let inputs = EvalInputs {
        detections: dets,
        annotations: anns,
        thresholds: thresholds.clone(),
    };
    let run_id = ctx.cfg.run_id.clone();
    let eval = assemble_report(
        classifier.as_ref().map(|c| Tagged::new(c.run_id.clone(), &c.value)),
        Some(Tagged::new(run_id.clone(), &stats)),
        Tagged::new(run_id, &inputs),
        serde_json::to_value(&ctx.cfg)?,
    )?;
    fresh_dir(&ctx.path("report"))?;
    if let Some(c) = &classifier {
        fs::write(ctx.path("report/table1_classifier.csv"), classifier_csv(&c.value))?;
    }
    fs::write(ctx.path("report/table2_compute.csv"), mac_csv(&costs))?;
    fs::write(ctx.path("report/table3_comparison.csv"), comparison_csv(&rows, &reference_rows()))?;
    for r in &rows {
        println!(
            "{:<22} mAP {:.4}  mIoU {:.4}  updating ratio {:>6.2}  MAC speedup {:>6.2}",
            r.method, r.map, r.miou, r.updating_ratio, r.mac_speedup
        );
    }
    write_json(
        &ctx.path("report/report.json"),
        &FullReport {
            eval,
            costs,
            comparison: rows,
        },
    )?;
    ctx.manifest("report", "report", &["data", "models"])
}

/// Loads a backbone-and-exits pair from a run directory.
pub fn load_run_models(out: &Path) -> crate::Result<(Backbone, Vec<Teem>)> {
    let (backbone, _) = load_detector(&out.join("models/detector.ckpt"))?;
    let teems = load_teems(&out.join("models/teems.ckpt"))?;
    Ok((backbone, teems))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_command(["tee", "no-such-command"]), EXIT_USAGE);
        assert_eq!(run_command(["tee", "gen-data", "--bogus"]), EXIT_USAGE);
    }

    #[test]
    fn config_errors_exit_three() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, r#"{"version": 1, "unknown_key": 3}"#).unwrap();
        let out = dir.path().join("out");
        let args = |c: &Path| {
            vec![
                "tee".to_string(),
                "gen-data".into(),
                "--config".into(),
                c.display().to_string(),
                "--out".into(),
                out.display().to_string(),
            ]
        };
        assert_eq!(run_command(args(&cfg)), EXIT_CONFIG);
        fs::write(&cfg, r#"{"version": 2}"#).unwrap();
        assert_eq!(run_command(args(&cfg)), EXIT_CONFIG);
        fs::write(&cfg, r#"{"version": 1}"#).unwrap();
        let mut a = args(&cfg);
        a.extend(["--gamma".into(), "-1".into()]);
        assert_eq!(run_command(a), EXIT_CONFIG);
    }

    #[test]
    fn missing_inputs_are_runtime_errors() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().display().to_string();
        assert_eq!(run_command(["tee", "sample-pairs", "--out", &out]), EXIT_RUNTIME);
    }

    #[test]
    fn flags_override_and_seeds_fan_out() {
        let mut cfg = CliConfig::default();
        let flags = CommonArgs {
            seed: Some(9),
            gamma: Some(0.5),
            tau_var: Some(0.3),
            exits: Some(vec![1, 3]),
            detector: Some(DetectorArg::Oracle),
            fixed_step: Some(4),
            ..Default::default()
        };
        cfg.apply(&flags);
        cfg.fan_out_seeds();
        assert_eq!(cfg.pipeline.gamma, 0.5);
        assert_eq!((cfg.sampler.tau_var, cfg.train.tau_var, cfg.pipeline.tau_var), (0.3, 0.3, 0.3));
        assert_eq!(cfg.pipeline.exits, vec![1, 3]);
        assert!(matches!(cfg.pipeline.detector, DetectorKind::Oracle { .. }));
        assert_eq!(cfg.pipeline.fixed_step, Some(4));
        assert_eq!(cfg.corpus.seed, derive_named(9, "corpus"));
        assert_ne!(cfg.corpus.seed, cfg.sampler.seed);
        cfg.validate().unwrap();
    }
}
