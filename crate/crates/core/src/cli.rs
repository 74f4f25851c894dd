//! Command-line front end: `synth`, `train`, `finetune`, `render`, `eval`.
//!
//! Every subcommand resolves its settings as flag > `--config` file > default,
//! writes a run manifest with the fully resolved settings before doing any
//! work, and prints JSON lines to stdout. A manifest can be passed back as
//! `--config` to repeat the run.
//!
//! Exit codes: 0 success, 2 validation, 3 I/O, 4 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::geometry::{Camera, Vec3};
use crate::metrics::{psnr, MetricError};
use crate::network::{NetworkConfig, NetworkError, Networks};
use crate::render::{render_image, RenderConfig, RenderError};
use crate::scene_io::{camera_from_rows, load_scene, Scene, SceneError};
use crate::synth::{generate_scene, Preset, SceneSpec, SynthError};
use crate::trainer::{evaluate, LogLine, Phase, TrainConfig, TrainError, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io(_) => EXIT_IO,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Io(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::MissingManifest(_) | SceneError::MissingImage(_) | SceneError::Io { .. } => {
                CliError::Io(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Invalid(_) => CliError::Validation(e.to_string()),
            SynthError::Scene(s) => s.into(),
            SynthError::Io { .. } => CliError::Io(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Checkpoint(c) => c.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Render(r) => r.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "ibrnet", version, about = "Novel view synthesis from nearby posed images")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Seed for scene generation, initialisation and sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Keyed sampling streams for bitwise-reproducible output.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    pub deterministic: Option<bool>,
    /// JSON settings file (or a previous run manifest).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Where to write the run manifest.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    RayTransformer,
    ViewDirections,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::RayTransformer => "ray-transformer",
            Ablation::ViewDirections => "view-directions",
        }
    }

    fn apply(self, cfg: &mut NetworkConfig) {
        match self {
            Ablation::RayTransformer => cfg.model.ablate_ray_transformer = true,
            Ablation::ViewDirections => cfg.model.ablate_view_directions = true,
        }
    }
}

fn ablation_tag(cfg: &NetworkConfig) -> Option<String> {
    let mut tags = Vec::new();
    if cfg.model.ablate_ray_transformer {
        tags.push(Ablation::RayTransformer.name());
    }
    if cfg.model.ablate_view_directions {
        tags.push(Ablation::ViewDirections.name());
    }
    (!tags.is_empty()).then(|| tags.join("+"))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene with ground-truth views.
    Synth {
        /// Scene description (JSON).
        #[arg(long, conflicts_with = "preset")]
        spec: Option<PathBuf>,
        /// `forward-facing` or `hemisphere`.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the feature network and both IBRNets on one or more scenes.
    Train {
        #[arg(long, num_args = 1..)]
        scenes: Vec<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        rays: Option<usize>,
        /// Checkpoint path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON-lines training log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        /// Scenes whose held-out views are scored at the eval cadence.
        #[arg(long, num_args = 1..)]
        eval_scenes: Vec<PathBuf>,
        #[arg(long)]
        eval_every: Option<u64>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
        #[arg(long)]
        m_coarse: Option<usize>,
        #[arg(long)]
        m_fine: Option<usize>,
    },
    /// Continue training a checkpoint on a single scene.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        rays: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Render a scene view, an explicit pose, or an orbit.
    Render {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Render the pose of this scene view and report PSNR against it.
        #[arg(long, conflicts_with_all = ["pose", "orbit"])]
        view: Option<usize>,
        /// Pose file: `{"intrinsics", "extrinsics", "image_size": [h, w]}`.
        #[arg(long, conflicts_with = "orbit")]
        pose: Option<PathBuf>,
        /// Number of frames on a circular path around the scene.
        #[arg(long)]
        orbit: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_sources: Option<usize>,
        #[arg(long)]
        m_coarse: Option<usize>,
        #[arg(long)]
        m_fine: Option<usize>,
        #[arg(long)]
        chunk_size: Option<usize>,
    },
    /// Score held-out views of a scene.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Require the checkpoint to have been trained with this ablation.
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        /// Report path (JSON); the report is always printed too.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        holdout: Option<f64>,
        #[arg(long)]
        n_sources: Option<usize>,
        #[arg(long)]
        m_coarse: Option<usize>,
        #[arg(long)]
        m_fine: Option<usize>,
        #[arg(long)]
        max_views: Option<usize>,
    },
}

/// Record of a run, written before any work starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSettings {
    pub spec: Option<PathBuf>,
    pub preset: Option<String>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// The scene description actually generated.
    pub scene: Option<SceneSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub out: PathBuf,
    pub log: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub eval_scenes: Vec<PathBuf>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            train: TrainConfig::default(),
            out: PathBuf::from("checkpoint.ibrn"),
            log: None,
            resume: None,
            eval_scenes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSettings {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub checkpoint: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub out: PathBuf,
    pub log: Option<PathBuf>,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        FinetuneSettings {
            train: TrainConfig { steps: 2000, ..TrainConfig::default() },
            checkpoint: None,
            scene: None,
            out: PathBuf::from("finetuned.ibrn"),
            log: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub checkpoint: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub view: Option<usize>,
    pub pose: Option<PathBuf>,
    pub orbit: Option<usize>,
    pub out: PathBuf,
    pub render: RenderConfig,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            checkpoint: None,
            scene: None,
            view: None,
            pose: None,
            orbit: None,
            out: PathBuf::from("renders"),
            render: RenderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub checkpoint: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub ablate: Vec<Ablation>,
    pub out: Option<PathBuf>,
    pub holdout_fraction: f64,
    pub max_views: Option<usize>,
    pub render: RenderConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            checkpoint: None,
            scene: None,
            ablate: Vec::new(),
            out: None,
            holdout_fraction: 1.0 / 8.0,
            max_views: None,
            render: RenderConfig::default(),
        }
    }
}

/// Camera pose file accepted by `render --pose`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub intrinsics: [[f64; 3]; 3],
    pub extrinsics: [[f64; 4]; 3],
    pub image_size: [usize; 2],
}

fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T, CliError> {
    serde_json::from_str(text).map_err(|e| {
        CliError::Validation(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
    })
}

/// Settings from `--config`, unwrapping a run manifest if given one.
fn load_settings<T: DeserializeOwned + Default>(path: Option<&Path>, subcommand: &str) -> Result<T, CliError> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let value: serde_json::Value = parse_json(path, &text)?;
    let inner = match (&value.get("subcommand"), value.get("config")) {
        (Some(sub), Some(cfg)) => {
            if sub.as_str() != Some(subcommand) {
                return Err(CliError::Validation(format!(
                    "{}: manifest is for `{}`, not `{subcommand}`",
                    path.display(),
                    sub.as_str().unwrap_or("?")
                )));
            }
            cfg.clone()
        }
        _ => value,
    };
    serde_json::from_value(inner).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn manifest_for_file(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".run.json");
    PathBuf::from(name)
}

fn start_run<T: Serialize>(
    common: &CommonArgs,
    default_path: PathBuf,
    subcommand: &str,
    seed: u64,
    settings: &T,
    outputs: Vec<PathBuf>,
) -> Result<(), CliError> {
    let manifest = RunManifest {
        subcommand: subcommand.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config: serde_json::to_value(settings).expect("settings serialize"),
        outputs,
    };
    write_manifest(common.manifest.as_deref().unwrap_or(&default_path), &manifest)
}

fn emit(value: &impl Serialize) {
    let line = serde_json::to_string(value).expect("report serializes");
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

fn require(field: Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    field.ok_or_else(|| CliError::Validation(format!("missing required setting `{name}`")))
}

fn load_scene_dir(dir: &Path) -> Result<Scene, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Io(format!("scene directory {} does not exist", dir.display())));
    }
    Ok(load_scene(dir)?)
}

fn load_networks(path: &Path) -> Result<(Networks<f32>, Option<ibr_tensor::AdamState<f32>>, u64), CliError> {
    if !path.is_file() {
        return Err(CliError::Io(format!("checkpoint {} does not exist", path.display())));
    }
    let ck = load_checkpoint(path).map_err(|e| match e {
        CheckpointError::Io(err) => io_error(path, err),
        other => CliError::Validation(format!("{}: {other}", path.display())),
    })?;
    let (nets, adam) = Networks::from_checkpoint(&ck)?;
    Ok((nets, adam, ck.step))
}

fn apply_render_flags(
    r: &mut RenderConfig,
    common: &CommonArgs,
    n_sources: Option<usize>,
    m_coarse: Option<usize>,
    m_fine: Option<usize>,
) {
    if let Some(v) = n_sources {
        r.n_source_views = v;
    }
    if let Some(v) = m_coarse {
        r.m_coarse = v;
    }
    if let Some(v) = m_fine {
        r.m_fine = v;
    }
    if let Some(v) = common.deterministic {
        r.deterministic = v;
    }
    if let Some(v) = common.seed {
        r.seed = v;
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.common.workers {
        if n == 0 {
            return Err(CliError::Validation("--workers must be at least 1".into()));
        }
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::warn!("worker pool already initialised; --workers ignored");
        }
    }
    let common = cli.common;
    match cli.command {
        Command::Synth { spec, preset, out } => cmd_synth(&common, spec, preset, out),
        Command::Train {
            scenes,
            steps,
            rays,
            out,
            log,
            resume,
            ablate,
            eval_scenes,
            eval_every,
            checkpoint_every,
            m_coarse,
            m_fine,
        } => {
            let mut s: TrainSettings = load_settings(common.config.as_deref(), "train")?;
            if !scenes.is_empty() {
                s.train.scenes = scenes;
            }
            if !eval_scenes.is_empty() {
                s.eval_scenes = eval_scenes;
            }
            set(&mut s.train.steps, steps);
            set(&mut s.train.rays_per_batch, rays);
            set(&mut s.train.eval_every, eval_every);
            set(&mut s.train.checkpoint_every, checkpoint_every);
            set(&mut s.train.render.m_coarse, m_coarse);
            set(&mut s.train.render.m_fine, m_fine);
            set(&mut s.train.eval_render.m_coarse, m_coarse);
            set(&mut s.train.eval_render.m_fine, m_fine);
            set(&mut s.out, out);
            if log.is_some() {
                s.log = log;
            }
            if resume.is_some() {
                s.resume = resume;
            }
            for a in ablate {
                a.apply(&mut s.train.network);
            }
            apply_common_train(&mut s.train, &common);
            cmd_train(&common, s)
        }
        Command::Finetune { checkpoint, scene, steps, rays, out, log } => {
            let mut s: FinetuneSettings = load_settings(common.config.as_deref(), "finetune")?;
            if checkpoint.is_some() {
                s.checkpoint = checkpoint;
            }
            if scene.is_some() {
                s.scene = scene;
            }
            set(&mut s.train.steps, steps);
            set(&mut s.train.rays_per_batch, rays);
            set(&mut s.out, out);
            if log.is_some() {
                s.log = log;
            }
            apply_common_train(&mut s.train, &common);
            cmd_finetune(&common, s)
        }
        Command::Render { checkpoint, scene, view, pose, orbit, out, n_sources, m_coarse, m_fine, chunk_size } => {
            let mut s: RenderSettings = load_settings(common.config.as_deref(), "render")?;
            if checkpoint.is_some() {
                s.checkpoint = checkpoint;
            }
            if scene.is_some() {
                s.scene = scene;
            }
            if view.is_some() || pose.is_some() || orbit.is_some() {
                s.view = view;
                s.pose = pose;
                s.orbit = orbit;
            }
            set(&mut s.out, out);
            set(&mut s.render.chunk_size, chunk_size);
            apply_render_flags(&mut s.render, &common, n_sources, m_coarse, m_fine);
            cmd_render(&common, s)
        }
        Command::Eval { checkpoint, scene, ablate, out, holdout, n_sources, m_coarse, m_fine, max_views } => {
            let mut s: EvalSettings = load_settings(common.config.as_deref(), "eval")?;
            if checkpoint.is_some() {
                s.checkpoint = checkpoint;
            }
            if scene.is_some() {
                s.scene = scene;
            }
            if !ablate.is_empty() {
                s.ablate = ablate;
            }
            if out.is_some() {
                s.out = out;
            }
            set(&mut s.holdout_fraction, holdout);
            if max_views.is_some() {
                s.max_views = max_views;
            }
            apply_render_flags(&mut s.render, &common, n_sources, m_coarse, m_fine);
            cmd_eval(&common, s)
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_common_train(t: &mut TrainConfig, common: &CommonArgs) {
    set(&mut t.seed, common.seed);
    if let Some(d) = common.deterministic {
        t.render.deterministic = d;
        t.eval_render.deterministic = d;
    }
}

fn cmd_synth(common: &CommonArgs, spec: Option<PathBuf>, preset: Option<String>, out: Option<PathBuf>) -> Result<(), CliError> {
    let mut s: SynthSettings = load_settings(common.config.as_deref(), "synth")?;
    if spec.is_some() || preset.is_some() {
        s.spec = spec;
        s.preset = preset;
    }
    set(&mut s.seed, common.seed);
    if out.is_some() {
        s.out = out;
    }
    let out = require(s.out.clone(), "out")?;
    let scene = match (&s.spec, &s.preset, &s.scene) {
        (Some(_), Some(_), _) => return Err(CliError::Validation("give either a spec or a preset, not both".into())),
        (Some(path), None, _) => {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            let mut spec: SceneSpec = parse_json(path, &text)?;
            if let Some(seed) = common.seed {
                spec.seed = seed;
            }
            spec
        }
        (None, Some(name), _) => {
            let preset = Preset::parse(name).ok_or_else(|| {
                CliError::Validation(format!("unknown preset `{name}` (expected forward-facing or hemisphere)"))
            })?;
            SceneSpec::preset(preset, s.seed)
        }
        (None, None, Some(scene)) => scene.clone(),
        (None, None, None) => return Err(CliError::Validation("synth needs --spec or --preset".into())),
    };
    scene.validate()?;
    s.seed = scene.seed;
    s.scene = Some(scene.clone());
    start_run(common, out.join("run.json"), "synth", s.seed, &s, vec![out.clone()])?;
    let built = generate_scene(&scene, &out)?;
    emit(&serde_json::json!({
        "scene": built.name,
        "out": out,
        "views": built.views.len(),
        "width": scene.width,
        "height": scene.height,
        "near": built.near,
        "far": built.far,
    }));
    Ok(())
}

fn open_log(path: &Path) -> Result<fs::File, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_error(path, e))
}

fn default_log(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".log.jsonl");
    PathBuf::from(name)
}

/// Shared loop of `train` and `finetune`.
fn run_training(
    mut trainer: Trainer,
    steps: u64,
    eval_scenes: &[Scene],
    out: &Path,
    log_path: &Path,
) -> Result<(), CliError> {
    let mut log = open_log(log_path)?;
    let mut io_failure = None;
    let mut on_log = |line: &LogLine| {
        let text = serde_json::to_string(line).expect("log line serializes");
        if let Err(e) = writeln!(log, "{text}") {
            io_failure.get_or_insert_with(|| io_error(log_path, e));
        }
        emit(line);
    };
    let mut on_checkpoint = |t: &Trainer| {
        save_checkpoint(out, &t.nets.to_checkpoint(t.step, Some(&t.adam)))
            .map_err(|e| TrainError::Config(format!("writing {}: {e}", out.display())))
    };
    trainer.run(steps, eval_scenes, &mut on_log, &mut on_checkpoint)?;
    if let Some(e) = io_failure {
        return Err(e);
    }
    save_checkpoint(out, &trainer.nets.to_checkpoint(trainer.step, Some(&trainer.adam))).map_err(|e| io_error(out, e))?;
    emit(&serde_json::json!({ "checkpoint": out, "step": trainer.step }));
    Ok(())
}

fn cmd_train(common: &CommonArgs, s: TrainSettings) -> Result<(), CliError> {
    s.train.validate()?;
    if s.train.scenes.is_empty() {
        return Err(CliError::Validation("train needs at least one scene (--scenes)".into()));
    }
    let log_path = s.log.clone().unwrap_or_else(|| default_log(&s.out));
    start_run(common, manifest_for_file(&s.out), "train", s.train.seed, &s, vec![s.out.clone(), log_path.clone()])?;
    let scenes = s.train.scenes.iter().map(|d| load_scene_dir(d)).collect::<Result<Vec<_>, _>>()?;
    let eval = s.eval_scenes.iter().map(|d| load_scene_dir(d)).collect::<Result<Vec<_>, _>>()?;
    let (nets, adam, step) = match &s.resume {
        Some(path) => {
            let (nets, adam, step) = load_networks(path)?;
            if nets.config != s.train.network {
                return Err(CliError::Validation(format!(
                    "checkpoint {} was trained with a different network configuration",
                    path.display()
                )));
            }
            (nets, adam, step)
        }
        None => (Networks::new(s.train.network.clone(), s.train.seed), None, 0),
    };
    let remaining = s.train.steps.saturating_sub(step);
    let trainer = Trainer::new(s.train.clone(), Phase::Pretrain, scenes, nets, adam, step)?;
    run_training(trainer, remaining, &eval, &s.out, &log_path)
}

fn cmd_finetune(common: &CommonArgs, s: FinetuneSettings) -> Result<(), CliError> {
    s.train.validate()?;
    let ck = require(s.checkpoint.clone(), "checkpoint")?;
    let scene_dir = require(s.scene.clone(), "scene")?;
    let log_path = s.log.clone().unwrap_or_else(|| default_log(&s.out));
    start_run(common, manifest_for_file(&s.out), "finetune", s.train.seed, &s, vec![s.out.clone(), log_path.clone()])?;
    let scene = load_scene_dir(&scene_dir)?;
    let (nets, _, _) = load_networks(&ck)?;
    let mut cfg = s.train.clone();
    cfg.network = nets.config.clone();
    let trainer = Trainer::new(cfg, Phase::Finetune, vec![scene.clone()], nets, None, 0)?;
    run_training(trainer, s.train.steps, std::slice::from_ref(&scene), &s.out, &log_path)
}

/// Circle of `n` cameras around the mean source position, all looking at a
/// point mid-way into the scene along the mean viewing direction.
pub fn orbit_cameras(scene: &Scene, n: usize) -> Result<Vec<Camera>, CliError> {
    let cams = scene.cameras();
    let k = cams.len() as f64;
    let center: Vec3 = cams.iter().map(|c| c.center()).sum::<Vec3>() / k;
    let forward: Vec3 = (cams.iter().map(|c| c.forward()).sum::<Vec3>() / k).normalize();
    let spread = (cams.iter().map(|c| (c.center() - center).norm_squared()).sum::<f64>() / k).sqrt().max(1e-3);
    let target = center + forward * 0.5 * (scene.near + scene.far);
    let world_up = Vec3::new(0.0, 1.0, 0.0);
    let mut right = forward.cross(&world_up);
    if right.norm() < 1e-6 {
        right = forward.cross(&Vec3::new(0.0, 0.0, 1.0));
    }
    let right = right.normalize();
    let up = right.cross(&forward).normalize();
    let base = cams[0];
    (0..n)
        .map(|i| {
            let theta = std::f64::consts::TAU * i as f64 / n as f64;
            let eye = center + (right * theta.cos() + up * theta.sin()) * 0.5 * spread;
            Camera::look_at(eye, target, up, base.intrinsics, base.width, base.height, scene.near, scene.far)
                .map_err(|e| CliError::Validation(e.to_string()))
        })
        .collect()
}

fn save_png(img: &crate::image::Image, path: &Path) -> Result<(), CliError> {
    img.save_png(path).map_err(|e| io_error(path, e))
}

fn cmd_render(common: &CommonArgs, s: RenderSettings) -> Result<(), CliError> {
    let ck = require(s.checkpoint.clone(), "checkpoint")?;
    let scene_dir = require(s.scene.clone(), "scene")?;
    if s.render.n_source_views == 0 || s.render.m_coarse < 2 || s.render.chunk_size == 0 {
        return Err(CliError::Validation("n_source_views, chunk_size must be ≥ 1 and m_coarse ≥ 2".into()));
    }
    start_run(common, s.out.join("run.json"), "render", s.render.seed, &s, vec![s.out.clone()])?;
    fs::create_dir_all(&s.out).map_err(|e| io_error(&s.out, e))?;
    let scene = load_scene_dir(&scene_dir)?;
    let (nets, _, _) = load_networks(&ck)?;
    let n_avail = scene.views.len();
    let mut cfg = s.render.clone();
    if cfg.n_source_views > n_avail {
        log::warn!("scene has {n_avail} views; using all of them as sources");
        cfg.n_source_views = n_avail;
    }
    if let Some(v) = s.view {
        let view = scene.views.get(v).ok_or_else(|| {
            CliError::Validation(format!("view {v} out of range (scene has {n_avail} views)"))
        })?;
        let out = render_image(&nets, &view.camera, &scene, None, &cfg)?;
        let path = s.out.join(format!("view_{v:03}.png"));
        save_png(&out.fine, &path)?;
        let p = psnr(&out.fine.quantized(), &view.image)?;
        emit(&serde_json::json!({ "file": path, "view": v, "psnr": p }));
    } else if let Some(pose_path) = &s.pose {
        let text = fs::read_to_string(pose_path).map_err(|e| io_error(pose_path, e))?;
        let pose: PoseFile = parse_json(pose_path, &text)?;
        let [h, w] = pose.image_size;
        let cam = camera_from_rows("pose", &pose.intrinsics, &pose.extrinsics, w, h, scene.near, scene.far)?;
        let out = render_image(&nets, &cam, &scene, None, &cfg)?;
        let path = s.out.join("pose.png");
        save_png(&out.fine, &path)?;
        emit(&serde_json::json!({ "file": path }));
    } else {
        let n = s.orbit.unwrap_or(8);
        if n == 0 {
            return Err(CliError::Validation("orbit needs at least one frame".into()));
        }
        let width = (n - 1).to_string().len().max(3);
        for (i, cam) in orbit_cameras(&scene, n)?.iter().enumerate() {
            let out = render_image(&nets, cam, &scene, None, &cfg)?;
            let path = s.out.join(format!("frame_{i:0width$}.png"));
            save_png(&out.fine, &path)?;
            emit(&serde_json::json!({ "file": path, "frame": i }));
        }
    }
    Ok(())
}

fn cmd_eval(common: &CommonArgs, s: EvalSettings) -> Result<(), CliError> {
    let ck = require(s.checkpoint.clone(), "checkpoint")?;
    let scene_dir = require(s.scene.clone(), "scene")?;
    if !(s.holdout_fraction > 0.0 && s.holdout_fraction <= 1.0) {
        return Err(CliError::Validation(format!("holdout fraction {} outside (0, 1]", s.holdout_fraction)));
    }
    let manifest = match &s.out {
        Some(out) => manifest_for_file(out),
        None => PathBuf::from("eval.run.json"),
    };
    start_run(common, manifest, "eval", s.render.seed, &s, s.out.iter().cloned().collect())?;
    let scene = load_scene_dir(&scene_dir)?;
    let (nets, _, _) = load_networks(&ck)?;
    if !s.ablate.is_empty() {
        let mut expected = nets.config.clone();
        expected.model.ablate_ray_transformer = false;
        expected.model.ablate_view_directions = false;
        for a in &s.ablate {
            a.apply(&mut expected);
        }
        if expected.fingerprint() != nets.fingerprint() {
            return Err(CliError::Validation(format!(
                "checkpoint fingerprint {:016x} does not match the requested configuration {:016x}",
                nets.fingerprint(),
                expected.fingerprint()
            )));
        }
    }
    let mut report = evaluate(&nets, &scene, s.holdout_fraction, &s.render, s.max_views, None)?;
    report.ablation = ablation_tag(&nets.config);
    if let Some(out) = &s.out {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        fs::write(out, text).map_err(|e| io_error(out, e))?;
    }
    emit(&report);
    Ok(())
}
