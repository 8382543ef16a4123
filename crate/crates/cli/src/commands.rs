use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::Args;
use serde::Serialize;

use procdiff::checkpoint::{
    checkpoint_dir, latest_checkpoint, load_checkpoint, read_state, save_checkpoint, ArchConfig, CheckpointState,
    STATE_FILE,
};
use procdiff::config::{toy_preset, write_run_record, BaselineChoice, ConfigLoader, ExtractorChoice, RunConfig};
use procdiff::diffusion::train::{model_vars, smoothed_endpoints, train_diffusion};
use procdiff::diffusion::{
    manipulate_and_generate, sample_sequence, ImageEmbeddingCache, ProceduralDiffusion, StepEdit, Trainer, TrainingSet,
};
use procdiff::encoder::{load_rgb, ToyEncoder};
use procdiff::imaging::save_png;
use procdiff::metrics::{
    avg_pcon, consistency_by_history, fid_over_sets, ConsistencyReport, FidReport, GeneratedRecipe, ImageItem,
    ToyFeatureExtractor,
};
use procdiff::pipeline::{build_manifest, load_youcook_annotations, DirectoryFrames, Frame, FrameSource};
use procdiff::procedure::{load_manifest, make_prompt_sequence, Manifest, PromptSequence, Recipe};
use procdiff::{Error, Result};

use crate::GlobalArgs;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn path_value(p: &Path) -> String {
    quoted(&p.to_string_lossy())
}

/// Resolves the layered configuration. `flags` are the subcommand's own
/// options as `key=value` pairs, applied above `--toy` and below `--set`.
fn resolve(g: &GlobalArgs, mut flags: Vec<(String, String)>) -> Result<RunConfig> {
    if let Some(seed) = g.seed {
        flags.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &g.out {
        flags.push(("out_dir".into(), path_value(out)));
    }
    let set = g
        .set
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("--set `{kv}` is not KEY=VALUE")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loader = ConfigLoader::new();
    if let Some(path) = &g.config {
        loader = loader.file(path)?;
    }
    if g.toy {
        loader = loader.overrides(toy_preset())?;
    }
    loader
        .overrides(flags)?
        .overrides(set)?
        .env(std::env::vars())?
        .resolve()
}

fn encoder_for(cfg: &RunConfig) -> ToyEncoder {
    ToyEncoder::with_dim(cfg.encoder.seed, cfg.encoder.dim)
}

fn manifest_path(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.data
        .manifest
        .clone()
        .ok_or_else(|| Error::Config("no manifest given (--manifest or data.manifest)".into()))
}

#[derive(Debug, Clone, Default, Args)]
pub struct ScenarioFlags {
    /// text_only, image_history or multimodal.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Fraction of image prompts in the multimodal scenario.
    #[arg(long)]
    pub p: Option<f64>,
    /// ordered or random image placement.
    #[arg(long)]
    pub placement: Option<String>,
}

impl ScenarioFlags {
    fn pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if let Some(s) = &self.scenario {
            out.push(("scenario.kind".into(), quoted(s)));
        }
        if let Some(p) = self.p {
            out.push(("scenario.p".into(), format!("{p:?}")));
        }
        if let Some(pl) = &self.placement {
            out.push(("scenario.placement".into(), quoted(pl)));
        }
        out
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataFlags {
    /// Manifest produced by `preprocess`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// train or validation.
    #[arg(long)]
    pub split: Option<String>,
}

impl DataFlags {
    fn pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if let Some(m) = &self.manifest {
            out.push(("data.manifest".into(), path_value(m)));
        }
        if let Some(s) = &self.split {
            out.push(("data.split".into(), quoted(s)));
        }
        out
    }
}

// ---------------------------------------------------------------- preprocess

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Annotation file (YouCookII JSON layout).
    #[arg(long)]
    pub annotations: PathBuf,
    /// Directory holding one sub-directory of extracted frames per video,
    /// each frame named by its timestamp in seconds.
    #[arg(long)]
    pub frames_root: PathBuf,
}

/// Source standing in for a video whose frames cannot be opened; every read
/// fails, so the pipeline skips the video with this reason.
struct Unavailable(String);

impl FrameSource for Unavailable {
    fn rewind(&mut self) -> Result<()> {
        Ok(())
    }

    fn peek_timestamp(&mut self) -> Option<Result<f64>> {
        Some(Err(Error::Validation(self.0.clone())))
    }

    fn next_frame(&mut self) -> Option<Result<Frame>> {
        Some(Err(Error::Validation(self.0.clone())))
    }
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        if path.is_dir() {
            files_under(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

pub fn preprocess(g: &GlobalArgs, a: PreprocessArgs) -> Result<()> {
    let cfg = resolve(g, Vec::new())?;
    let annotations = load_youcook_annotations(&a.annotations)?;
    let encoder = encoder_for(&cfg);
    let mut videos: Vec<(procdiff::pipeline::VideoAnnotation, Box<dyn FrameSource>)> = Vec::new();
    let mut inputs = vec![a.annotations.clone()];
    for ann in annotations {
        let dir = a.frames_root.join(&ann.recipe_id);
        let source: Box<dyn FrameSource> = match DirectoryFrames::open(&dir) {
            Ok(frames) => {
                let mut files = Vec::new();
                files_under(&dir, &mut files)?;
                files.sort();
                inputs.extend(files);
                Box::new(frames)
            }
            Err(e) => Box::new(Unavailable(format!("frames unavailable: {e}"))),
        };
        videos.push((ann, source));
    }
    let report = build_manifest(videos, &encoder, &cfg.pipeline, &cfg.out_dir)?;
    write_run_record(&cfg.out_dir, "preprocess", &cfg, &inputs)?;
    println!(
        "manifest {} with {} recipes ({} skipped)",
        report.manifest_path.display(),
        report.manifest.recipes.len(),
        report.skipped.len()
    );
    Ok(())
}

// --------------------------------------------------------------------- train

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub scenario: ScenarioFlags,
    /// none, tmn, imn or mmn.
    #[arg(long)]
    pub memory: Option<String>,
    /// Continue from the newest checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Serialize)]
struct LossRecord {
    step: usize,
    loss: f64,
}

pub fn train(g: &GlobalArgs, a: TrainArgs) -> Result<()> {
    let mut flags = a.data.pairs();
    flags.extend(a.scenario.pairs());
    if let Some(m) = &a.memory {
        flags.push(("memory.kind".into(), quoted(m)));
    }
    let cfg = resolve(g, flags)?;
    if cfg.baseline.kind != BaselineChoice::None {
        return Err(Error::Config(
            "the train command fits the memory-conditioned model; set baseline.kind = \"none\"".into(),
        ));
    }
    let manifest_file = manifest_path(&cfg)?;
    let manifest = load_manifest(&manifest_file)?;
    let encoder = encoder_for(&cfg);
    let model_cfg = cfg.model_config();
    let model = ProceduralDiffusion::new(model_cfg, cfg.seed, DType::F32)?;
    let data = TrainingSet::from_manifest(
        &manifest,
        cfg.data.split,
        &cfg.scenario_config(),
        &encoder,
        model.memory_kind(),
        cfg.model.image_size as u32,
        DType::F32,
        &Device::Cpu,
    )?;
    let train_cfg = cfg.train_config();
    let mut trainer = Trainer::new(model_vars(&model), train_cfg)?;
    let arch = ArchConfig::Diffusion(model_cfg);
    let run_dir = cfg.out_dir.clone();
    fs::create_dir_all(&run_dir).map_err(|e| io_err(&run_dir, e))?;
    let log_path = run_dir.join("losses.jsonl");
    if a.resume {
        let dir = latest_checkpoint(&run_dir)?
            .ok_or_else(|| Error::Incomplete(format!("no checkpoint under {} to resume", run_dir.display())))?;
        let state = load_checkpoint(&dir, &arch, &model.store, Some(trainer.optimizer_mut()))?;
        trainer.resume_at(state.step);
        truncate_log(&log_path, state.step)?;
        log::info!("resumed from {} at step {}", dir.display(), state.step);
    } else if log_path.exists() {
        fs::remove_file(&log_path).map_err(|e| io_err(&log_path, e))?;
    }
    write_run_record(&run_dir, "train", &cfg, &[manifest_file])?;
    let total = train_cfg.total_steps(data.pair_count());
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let config_hash = cfg.hash()?;
    let state_for = |step: usize| CheckpointState {
        step,
        seed: cfg.seed,
        config_hash: config_hash.clone(),
        arch,
        scenario: cfg.scenario_config(),
        train: train_cfg,
        tensors: BTreeMap::new(),
    };
    let every = cfg.train.checkpoint_every.max(1);
    let log_every = cfg.train.log_every.max(1);
    let snapshots = run_dir.join("snapshots");
    while trainer.step() < total {
        let chunk = (every - trainer.step() % every).min(total - trainer.step());
        let mut write_err = None;
        train_diffusion(&model, &data, &mut trainer, chunk, Some(&snapshots), |step, loss| {
            if step % log_every == 0 {
                log::info!("step {step} loss {loss:.5}");
            }
            let line = serde_json::to_string(&LossRecord { step, loss }).expect("plain record");
            if let Err(e) = writeln!(log_file, "{line}") {
                write_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = write_err {
            return Err(io_err(&log_path, e));
        }
        let step = trainer.step();
        save_checkpoint(
            &checkpoint_dir(&run_dir, step),
            &model.store,
            Some(trainer.optimizer()),
            state_for(step),
        )?;
    }
    match smoothed_endpoints(trainer.losses(), 50) {
        Some((first, last)) => println!(
            "trained to step {} of {total}; smoothed loss {first:.5} -> {last:.5}",
            trainer.step()
        ),
        None => println!("nothing to do: already at step {} of {total}", trainer.step()),
    }
    Ok(())
}

/// Drops log records past `step` so a resumed run continues one curve.
fn truncate_log(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut kept = String::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v["step"].as_u64().is_some_and(|s| s as usize <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| io_err(path, e))
}

// ------------------------------------------------------------------ generate

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Checkpoint directory, or a run directory (its newest checkpoint).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub scenario: ScenarioFlags,
    /// Restrict to these recipe ids; repeatable.
    #[arg(long = "recipe")]
    pub recipes: Vec<String>,
    /// Step edit `K:find->replace`, `K:+text` or `K:-`; repeatable, applied
    /// in order to every selected recipe.
    #[arg(long = "edit")]
    pub edits: Vec<String>,
}

fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join(STATE_FILE).exists() {
        return Ok(path.to_path_buf());
    }
    latest_checkpoint(path)?.ok_or_else(|| Error::Incomplete(format!("no checkpoint found at {}", path.display())))
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(ProceduralDiffusion, PathBuf)> {
    let dir = resolve_checkpoint(checkpoint)?;
    let state = read_state(&dir)?;
    let ArchConfig::Diffusion(model_cfg) = state.arch else {
        return Err(Error::Config(format!(
            "{} holds a control-branch checkpoint; generation needs the diffusion model",
            dir.display()
        )));
    };
    if model_cfg.denoiser.context_dim != cfg.encoder.dim {
        return Err(Error::Config(format!(
            "checkpoint expects {}-wide text embeddings, encoder.dim is {}",
            model_cfg.denoiser.context_dim, cfg.encoder.dim
        )));
    }
    let model = ProceduralDiffusion::new(model_cfg, state.seed, DType::F32)?;
    load_checkpoint(&dir, &state.arch, &model.store, None)?;
    model.check_scenario(cfg.scenario.kind)?;
    Ok((model, dir))
}

fn parse_edits(edits: &[String]) -> Result<Vec<StepEdit>> {
    edits.iter().map(|e| e.parse()).collect()
}

fn write_recipe_images(gen_root: &Path, recipe: &Recipe, images: &[image::RgbImage]) -> Result<()> {
    let dir = gen_root.join(&recipe.recipe_id);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    for (step, image) in recipe.steps.iter().zip(images) {
        save_png(image, &dir.join(format!("{}.png", step.index)))?;
    }
    Ok(())
}

fn selected<'m>(manifest: &'m Manifest, cfg: &RunConfig, ids: &[String]) -> Result<Vec<&'m Recipe>> {
    if ids.is_empty() {
        return Ok(manifest.split(cfg.data.split).collect());
    }
    ids.iter()
        .map(|id| {
            manifest
                .get(id)
                .ok_or_else(|| Error::Referential(format!("recipe `{id}` is not in the manifest")))
        })
        .collect()
}

/// Generates the selected recipes (edited when `edits` is non-empty) into
/// `out_dir/gen/<recipe_id>/<step>.png`.
fn run_generation(cfg: &RunConfig, checkpoint: &Path, ids: &[String], edits: &[StepEdit], command: &str) -> Result<()> {
    let manifest_file = manifest_path(cfg)?;
    let manifest = load_manifest(&manifest_file)?;
    let (model, ckpt_dir) = load_model(cfg, checkpoint)?;
    let encoder = encoder_for(cfg);
    let scenario = cfg.scenario_config();
    let sampler = cfg.sampler_config();
    let gen_root = cfg.out_dir.join("gen");
    let mut cache = ImageEmbeddingCache::default();
    let mut written = 0;
    for recipe in selected(&manifest, cfg, ids)? {
        if edits.is_empty() {
            let sequence = make_prompt_sequence(recipe, &scenario, &manifest.root)?;
            let images = sample_sequence(&model, &sequence, &encoder, &mut cache, &sampler)?;
            write_recipe_images(&gen_root, recipe, &images)?;
        } else {
            let (edited, images) =
                manipulate_and_generate(&model, recipe, edits, &scenario, &manifest.root, &encoder, &sampler)?;
            write_recipe_images(&gen_root, &edited, &images)?;
            let path = gen_root.join(&edited.recipe_id).join("recipe.json");
            fs::write(&path, serde_json::to_string_pretty(&edited)?).map_err(|e| io_err(&path, e))?;
            for step in &edited.steps {
                println!("{} step {}: {}", edited.recipe_id, step.index, step.text);
            }
        }
        written += 1;
    }
    let mut inputs = vec![manifest_file];
    let mut ckpt_files = Vec::new();
    files_under(&ckpt_dir, &mut ckpt_files)?;
    ckpt_files.sort();
    inputs.extend(ckpt_files);
    write_run_record(&cfg.out_dir, command, cfg, &inputs)?;
    println!("generated {written} recipes under {}", gen_root.display());
    Ok(())
}

pub fn generate(g: &GlobalArgs, a: GenerateArgs) -> Result<()> {
    let mut flags = a.data.pairs();
    flags.extend(a.scenario.pairs());
    let cfg = resolve(g, flags)?;
    let edits = parse_edits(&a.edits)?;
    run_generation(&cfg, &a.checkpoint, &a.recipes, &edits, "generate")
}

// ---------------------------------------------------------------- manipulate

#[derive(Debug, Args)]
pub struct ManipulateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub scenario: ScenarioFlags,
    #[arg(long)]
    pub recipe: String,
    /// Step edit `K:find->replace`, `K:+text` or `K:-`; repeatable.
    #[arg(long = "edit", required = true)]
    pub edits: Vec<String>,
}

pub fn manipulate(g: &GlobalArgs, a: ManipulateArgs) -> Result<()> {
    let mut flags = a.data.pairs();
    flags.extend(a.scenario.pairs());
    let cfg = resolve(g, flags)?;
    let edits = parse_edits(&a.edits)?;
    run_generation(&cfg, &a.checkpoint, &[a.recipe], &edits, "manipulate")
}

// ------------------------------------------------------------------ evaluate

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataFlags,
    /// Generated tree: `<recipe_id>/<step>.png`.
    #[arg(long)]
    pub gen: PathBuf,
    /// Also report consistency grouped by the number of preceding steps.
    #[arg(long)]
    pub by_history_length: bool,
}

#[derive(Debug, Serialize)]
struct HistoryRow {
    history: String,
    mean_pcon: f64,
    count: usize,
}

#[derive(Debug, Serialize)]
struct EvaluationReport {
    split: String,
    fid: FidReport,
    consistency: ConsistencyReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    by_history_length: Option<Vec<HistoryRow>>,
}

pub fn evaluate(g: &GlobalArgs, a: EvaluateArgs) -> Result<()> {
    let cfg = resolve(g, a.data.pairs())?;
    if cfg.metrics.fid.extractor == ExtractorChoice::Inception {
        return Err(Error::Config(
            "metrics.fid.extractor = \"inception\" needs pretrained weights this build does not ship".into(),
        ));
    }
    let manifest_file = manifest_path(&cfg)?;
    let manifest = load_manifest(&manifest_file)?;
    let recipes: Vec<&Recipe> = manifest.split(cfg.data.split).collect();
    if recipes.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut missing = Vec::new();
    let mut real = Vec::new();
    let mut generated = Vec::new();
    let mut inputs = vec![manifest_file];
    for recipe in &recipes {
        for step in &recipe.steps {
            let path = a.gen.join(&recipe.recipe_id).join(format!("{}.png", step.index));
            if path.exists() {
                generated.push(path);
            } else {
                missing.push(path);
            }
            match manifest.image_path(step) {
                Some(p) => real.push(p),
                None => {
                    return Err(Error::Incomplete(format!(
                        "recipe {} step {} has no ground-truth keyframe",
                        recipe.recipe_id, step.index
                    )))
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Incomplete(format!(
            "{} generated images missing, first {}",
            missing.len(),
            missing[0].display()
        )));
    }
    inputs.extend(generated.iter().cloned());
    let fid = fid_over_sets(
        &real.into_iter().map(ImageItem::Path).collect::<Vec<_>>(),
        &generated.iter().cloned().map(ImageItem::Path).collect::<Vec<_>>(),
        &ToyFeatureExtractor,
    )?;
    let mut gen_recipes = Vec::with_capacity(recipes.len());
    for recipe in &recipes {
        let images = recipe
            .steps
            .iter()
            .map(|s| load_rgb(&a.gen.join(&recipe.recipe_id).join(format!("{}.png", s.index))).map(Some))
            .collect::<Result<Vec<_>>>()?;
        gen_recipes.push(GeneratedRecipe {
            recipe_id: recipe.recipe_id.clone(),
            texts: recipe.steps.iter().map(|s| s.text.clone()).collect(),
            images,
        });
    }
    let consistency = avg_pcon(&gen_recipes, &encoder_for(&cfg))?;
    let by_history_length = a.by_history_length.then(|| {
        consistency_by_history(&consistency)
            .into_iter()
            .map(|(bucket, (mean_pcon, count))| HistoryRow {
                history: bucket.to_string(),
                mean_pcon,
                count,
            })
            .collect()
    });
    let report = EvaluationReport {
        split: cfg.data.split.to_string(),
        fid,
        consistency,
        by_history_length,
    };
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| io_err(&path, e))?;
    write_run_record(&cfg.out_dir, "evaluate", &cfg, &inputs)?;
    println!(
        "FID {:.6} ({} real, {} generated); {}",
        report.fid.fid,
        report.fid.real_count,
        report.fid.gen_count,
        report.consistency.summary()
    );
    if let Some(rows) = &report.by_history_length {
        for row in rows {
            println!(
                "  history {:>11}: Avg-PCon {:.3} over {} images",
                row.history, row.mean_pcon, row.count
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------- simulate-scenario

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub scenario: ScenarioFlags,
}

pub fn simulate(g: &GlobalArgs, a: SimulateArgs) -> Result<()> {
    let mut flags = a.data.pairs();
    flags.extend(a.scenario.pairs());
    let cfg = resolve(g, flags)?;
    let manifest_file = manifest_path(&cfg)?;
    let manifest = load_manifest(&manifest_file)?;
    let scenario = cfg.scenario_config();
    let mut sequences: Vec<PromptSequence> = Vec::new();
    let mut skipped = 0;
    for recipe in manifest.split(cfg.data.split) {
        match make_prompt_sequence(recipe, &scenario, &manifest.root) {
            Ok(seq) => sequences.push(seq),
            Err(e @ Error::Coverage { .. }) => {
                log::warn!("{e}");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join("scenario.jsonl");
    let mut text = String::new();
    for seq in &sequences {
        text.push_str(&serde_json::to_string(seq)?);
        text.push('\n');
        let layout: Vec<&str> = seq
            .entries
            .iter()
            .map(|e| match (e.modality.has_text(), e.modality.has_image()) {
                (true, true) => "TI",
                (false, true) => "I",
                _ => "T",
            })
            .collect();
        println!(
            "{}: {} text, {} image [{}]",
            seq.recipe_id,
            seq.n_text(),
            seq.n_image(),
            layout.join(" ")
        );
    }
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    write_run_record(&cfg.out_dir, "simulate-scenario", &cfg, &[manifest_file])?;
    println!("{} sequences, {skipped} recipes lacked image coverage", sequences.len());
    Ok(())
}
