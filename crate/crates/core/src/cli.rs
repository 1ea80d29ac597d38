//! Command-line front end: `synth`, `train`, `decompose`, `render`, `eval`.
//!
//! Training runs are driven by a TOML [`RunConfig`]; every key can be
//! overridden with `--set section.key=value`. The effective configuration
//! is echoed to `config.toml` in the run directory, and the other commands
//! read it back from there.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sfnerf_tape::Real;

use crate::data::synthetic::{generate_synthetic_scene, SyntheticSpec};
use crate::data::{load_photocollection, LoadOptions, SceneDataset};
use crate::error::{Error, Result};
use crate::raster::GrayMap;
use crate::trainer::{
    self, decompose, decomposition_ious, evaluate_test_views, fit_test_embedding, render_view,
    Checkpoint, Model, Precision, TrainConfig, Trainer, CHECKPOINT_FILE,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.tsv";
pub const IOU_FILE: &str = "train_iou.tsv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory (see [`crate::data`] for the layout).
    pub path: PathBuf,
    pub downsample: usize,
    /// Keep this many training images, drawn with `split_seed`.
    pub few_shot: Option<usize>,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::new(),
            downsample: 2,
            few_shot: None,
            split_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<SceneDataset> {
        if self.path.as_os_str().is_empty() {
            return Err(Error::Config("data.path is not set".into()));
        }
        load_photocollection(
            &self.path,
            &LoadOptions {
                downsample: self.downsample,
                few_shot: self.few_shot,
                seed: self.split_seed,
            },
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides and validates.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut tree: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Sets a dotted key in a TOML tree. The value is read as a TOML literal
/// and falls back to a plain string.
pub fn apply_override(tree: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut node = tree;
    for part in path {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Refuses to write into a non-empty directory unless `force` is set.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to write into it",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Parser)]
#[command(
    name = "sfnerf",
    version,
    about = "Static/transient decomposition of photo collections"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene with injected occluders into a dataset directory.
    Synth(SynthArgs),
    /// Train a model; writes a checkpoint, scalar log and config echo.
    Train(TrainArgs),
    /// Write static, transient, opacity, uncertainty and blended images of training views.
    Decompose(DecomposeArgs),
    /// Render the static scene from a dataset camera.
    Render(RenderArgs),
    /// Score held-out views: fit appearance on the left half, measure the right half.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Total number of views written.
    #[arg(long, default_value_t = 15)]
    pub images: usize,
    /// How many of those views are held out (rendered without occluders).
    #[arg(long, default_value_t = 0)]
    pub test_images: usize,
    /// Occluders per training view.
    #[arg(long)]
    pub occluders: Option<usize>,
    /// Image width and height.
    #[arg(long)]
    pub size: Option<usize>,
    /// Per-channel gain range around 1.
    #[arg(long)]
    pub jitter: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML scene description; flags override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set data.path=...`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Shorthand for `--set train.seed=...`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shorthand for `--set train.steps=...`.
    #[arg(long)]
    pub steps: Option<u64>,
}

impl ConfigArgs {
    fn all_overrides(&self) -> Vec<String> {
        let mut v = self.overrides.clone();
        if let Some(d) = &self.data {
            v.push(format!(
                "data.path={}",
                toml::Value::String(d.display().to_string())
            ));
        }
        if let Some(s) = self.seed {
            v.push(format!("train.seed={s}"));
        }
        if let Some(s) = self.steps {
            v.push(format!("train.steps={s}"));
        }
        v
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.all_overrides())
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the checkpoint in the run directory up to `train.steps`.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Use this dataset instead of the one recorded in the run.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Dataset image ids from the training split; all training views when omitted.
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write 32-bit float dumps next to the PNGs.
    #[arg(long)]
    pub float: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Dataset image id whose camera is rendered.
    #[arg(long)]
    pub id: usize,
    /// Output PNG path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub float: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Decompose(a) => cmd_decompose(&a),
        Command::Render(a) => cmd_render(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => SyntheticSpec::default(),
    };
    if a.test_images >= a.images {
        return Err(Error::Config("--test-images must be below --images".into()));
    }
    spec.train_images = a.images - a.test_images;
    spec.test_images = a.test_images;
    if let Some(n) = a.occluders {
        spec.occluders.min_count = n;
        spec.occluders.max_count = n;
    }
    if let Some(s) = a.size {
        spec.width = s;
        spec.height = s;
    }
    if let Some(j) = a.jitter {
        spec.jitter = j;
    }
    let ds = generate_synthetic_scene(&spec, a.seed)?;
    prepare_output_dir(&a.out, a.force)?;
    ds.export(&a.out)?;
    let echo = toml::to_string(&spec).expect("spec serializes");
    let path = a.out.join("synthetic.toml");
    fs::write(&path, format!("# seed = {}\n{echo}", a.seed)).map_err(|e| Error::io(&path, e))
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    let ds = cfg.data.load()?;
    // Later commands read the dataset location back from the echo.
    if let Ok(abs) = fs::canonicalize(&cfg.data.path) {
        cfg.data.path = abs;
    }
    if a.resume {
        let mut ck = Checkpoint::load_expecting(&a.out.join(CHECKPOINT_FILE), &cfg.train.encoding)?;
        ck.config.steps = cfg.train.steps;
        write_config(
            &a.out,
            &RunConfig {
                data: cfg.data.clone(),
                train: ck.config.clone(),
            },
        )?;
        return match ck.config.precision {
            Precision::F32 => resume_run::<f32>(&ck, &ds, &a.out),
            Precision::F64 => resume_run::<f64>(&ck, &ds, &a.out),
        };
    }
    prepare_output_dir(&a.out, a.force)?;
    write_config(&a.out, &cfg)?;
    match cfg.train.precision {
        Precision::F32 => fresh_run::<f32>(&cfg.train, &ds, &a.out),
        Precision::F64 => fresh_run::<f64>(&cfg.train, &ds, &a.out),
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))
}

fn fresh_run<T: Real>(cfg: &TrainConfig, ds: &SceneDataset, out: &Path) -> Result<()> {
    let mut t = Trainer::<T>::new(cfg.clone(), ds)?;
    trainer::train(&mut t, out).map(|_| ())
}

fn resume_run<T: Real>(ck: &Checkpoint, ds: &SceneDataset, out: &Path) -> Result<()> {
    let mut t = Trainer::<T>::resume(ck, ds)?;
    trainer::train(&mut t, out).map(|_| ())
}

/// Run configuration, checkpoint and dataset of a run directory.
pub struct LoadedRun {
    pub config: RunConfig,
    pub checkpoint: Checkpoint,
    pub dataset: SceneDataset,
}

pub fn load_run(a: &RunArgs) -> Result<LoadedRun> {
    let mut config = RunConfig::load(Some(&a.run.join(CONFIG_FILE)), &[])?;
    if let Some(d) = &a.data {
        config.data.path = d.clone();
    }
    let checkpoint =
        Checkpoint::load_expecting(&a.run.join(CHECKPOINT_FILE), &config.train.encoding)?;
    let dataset = config.data.load()?;
    Ok(LoadedRun {
        config,
        checkpoint,
        dataset,
    })
}

/// Scales an uncertainty map into `[0, 1]` for display.
fn normalized(map: &GrayMap) -> GrayMap {
    let max = map.data.iter().cloned().fold(0.0f32, f32::max);
    let mut out = map.clone();
    if max > 0.0 {
        out.data.iter_mut().for_each(|v| *v /= max);
    }
    out
}

pub fn cmd_decompose(a: &DecomposeArgs) -> Result<()> {
    let run = load_run(&a.run)?;
    let ids: Vec<usize> = if a.ids.is_empty() {
        run.dataset.train.clone()
    } else {
        a.ids.clone()
    };
    let mut positions = Vec::with_capacity(ids.len());
    for &id in &ids {
        let pos = run
            .dataset
            .train
            .iter()
            .position(|&i| i == id)
            .ok_or_else(|| {
                Error::Input(format!(
                    "image {id} is not in the training split; valid ids: {:?}",
                    run.dataset.train
                ))
            })?;
        positions.push((id, pos));
    }
    prepare_output_dir(&a.out, a.force)?;
    match run.checkpoint.config.precision {
        Precision::F32 => write_decompositions::<f32>(&run, &positions, a),
        Precision::F64 => write_decompositions::<f64>(&run, &positions, a),
    }
}

fn write_decompositions<T: Real>(
    run: &LoadedRun,
    ids: &[(usize, usize)],
    a: &DecomposeArgs,
) -> Result<()> {
    let model = Model::<T>::from_checkpoint(&run.checkpoint)?;
    let cfg = &run.checkpoint.config;
    let inputs = run.dataset.feature_inputs(&cfg.features)?;
    let temperature = cfg.temperature_at(run.checkpoint.step);
    for &(id, pos) in ids {
        let d = decompose(&model, cfg, &run.dataset, &inputs, pos, temperature)?;
        let name = &run.dataset.names[id];
        let path = |s: &str, ext: &str| a.out.join(format!("{name}_{s}.{ext}"));
        d.static_render.write_png(&path("static", "png"))?;
        d.transient_color.write_png(&path("transient", "png"))?;
        d.opacity.write_png(&path("opacity", "png"))?;
        normalized(&d.uncertainty).write_png(&path("uncertainty", "png"))?;
        d.blended.write_png(&path("blended", "png"))?;
        if a.float {
            d.static_render.write_f32(&path("static", "f32"))?;
            d.transient_color.write_f32(&path("transient", "f32"))?;
            d.opacity.write_f32(&path("opacity", "f32"))?;
            d.uncertainty.write_f32(&path("uncertainty", "f32"))?;
            d.blended.write_f32(&path("blended", "f32"))?;
        }
    }
    Ok(())
}

pub fn cmd_render(a: &RenderArgs) -> Result<()> {
    let run = load_run(&a.run)?;
    if a.id >= run.dataset.len() {
        return Err(Error::Input(format!(
            "image {} does not exist; the dataset has {} images",
            a.id,
            run.dataset.len()
        )));
    }
    let img = match run.checkpoint.config.precision {
        Precision::F32 => render_one::<f32>(&run, a.id)?,
        Precision::F64 => render_one::<f64>(&run, a.id)?,
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.write_png(&a.out)?;
    if a.float {
        img.write_f32(&a.out.with_extension("f32"))?;
    }
    Ok(())
}

/// Training views use their own embedding; other views get one fitted on
/// their left half.
fn render_one<T: Real>(run: &LoadedRun, id: usize) -> Result<crate::raster::Image> {
    let model = Model::<T>::from_checkpoint(&run.checkpoint)?;
    let cfg = &run.checkpoint.config;
    let cam = &run.dataset.cameras[id];
    let appearance = match run.dataset.train.iter().position(|&i| i == id) {
        Some(pos) => model.appearance_row(pos),
        None => fit_test_embedding(&model, cfg, cam, &run.dataset.images[id], id)?.embedding,
    };
    render_view(&model, cfg, cam, &appearance)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let run = load_run(&a.run)?;
    prepare_output_dir(&a.out, a.force)?;
    match run.checkpoint.config.precision {
        Precision::F32 => eval_run::<f32>(&run, &a.out),
        Precision::F64 => eval_run::<f64>(&run, &a.out),
    }
}

fn eval_run<T: Real>(run: &LoadedRun, out: &Path) -> Result<()> {
    let model = Model::<T>::from_checkpoint(&run.checkpoint)?;
    let cfg = &run.checkpoint.config;
    let ev = evaluate_test_views(&model, cfg, &run.dataset, None)?;
    ev.report.write(&out.join(REPORT_FILE))?;
    for (img, &i) in ev.renders.iter().zip(&run.dataset.test) {
        let name = &run.dataset.names[i];
        img.write_png(&out.join(format!("{name}_render.png")))?;
        img.write_f32(&out.join(format!("{name}_render.f32")))?;
    }
    let inputs = run.dataset.feature_inputs(&cfg.features)?;
    let temperature = cfg.temperature_at(run.checkpoint.step);
    if let Some(ious) = decomposition_ious(&model, cfg, &run.dataset, &inputs, temperature, 0.5)? {
        let mut s = String::from("image\tiou\n");
        for (v, &i) in ious.iter().zip(&run.dataset.train) {
            s.push_str(&format!("{}\t{v:.6}\n", run.dataset.names[i]));
        }
        let mean = ious.iter().sum::<f64>() / ious.len().max(1) as f64;
        s.push_str(&format!("mean\t{mean:.6}\n"));
        let path = out.join(IOU_FILE);
        fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads a report written by `eval` back into per-image PSNR values.
pub fn read_report_psnr(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .map(|l| {
            let mut f = l.split('\t');
            let name = f.next().unwrap_or_default().to_string();
            let psnr = f
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Ingestion(format!("bad report row `{l}`")))?;
            Ok((name, psnr))
        })
        .collect()
}
