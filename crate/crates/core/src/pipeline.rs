//! Turns annotated cooking videos into a procedure manifest: one keyframe per
//! step, picked by text-image similarity inside the step's time span, stored
//! as a 256x256 PNG under `images/<recipe_id>/<step_idx>.png`.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{clip_score, encode_step_text, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::imaging::{crop_and_resize, save_png};
use crate::procedure::{Manifest, Recipe, Split, Step};

pub const STORED_SIZE: u32 = 256;

#[derive(Debug, Clone)]
pub struct Frame {
    pub timestamp: f64,
    pub image: RgbImage,
}

/// Pull-style frame reader for one video. Timestamps are non-decreasing.
pub trait FrameSource: Send {
    /// Restarts at the first frame.
    fn rewind(&mut self) -> Result<()>;
    /// Timestamp of the frame the next `next_frame` call returns.
    fn peek_timestamp(&mut self) -> Option<Result<f64>>;
    fn next_frame(&mut self) -> Option<Result<Frame>>;
    /// Advances past the next frame without decoding it where possible.
    fn skip_frame(&mut self) -> Option<Result<()>> {
        self.next_frame().map(|r| r.map(|_| ()))
    }
}

/// Frames held in memory.
#[derive(Debug, Clone, Default)]
pub struct VecFrames {
    frames: Vec<Frame>,
    pos: usize,
}

impl VecFrames {
    pub fn new(mut frames: Vec<Frame>) -> Self {
        frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        VecFrames { frames, pos: 0 }
    }
}

impl FrameSource for VecFrames {
    fn rewind(&mut self) -> Result<()> {
        self.pos = 0;
        Ok(())
    }

    fn peek_timestamp(&mut self) -> Option<Result<f64>> {
        self.frames.get(self.pos).map(|f| Ok(f.timestamp))
    }

    fn next_frame(&mut self) -> Option<Result<Frame>> {
        let f = self.frames.get(self.pos).cloned();
        self.pos += 1;
        f.map(Ok)
    }
}

/// Pre-extracted frames in a directory, one image per frame, each named by
/// its timestamp in seconds (`12.5.png`, `0003.jpg`).
#[derive(Debug, Clone)]
pub struct DirectoryFrames {
    files: Vec<(f64, PathBuf)>,
    pos: usize,
}

impl DirectoryFrames {
    pub fn open(dir: &Path) -> Result<Self> {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let is_image = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"));
            if !is_image {
                continue;
            }
            let ts: f64 = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse().ok())
                .filter(|t: &f64| t.is_finite() && *t >= 0.0)
                .ok_or_else(|| Error::Validation(format!("frame name {} is not a timestamp", path.display())))?;
            files.push((ts, path));
        }
        files.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        Ok(DirectoryFrames { files, pos: 0 })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }
}

impl FrameSource for DirectoryFrames {
    fn rewind(&mut self) -> Result<()> {
        self.pos = 0;
        Ok(())
    }

    fn peek_timestamp(&mut self) -> Option<Result<f64>> {
        self.files.get(self.pos).map(|f| Ok(f.0))
    }

    fn next_frame(&mut self) -> Option<Result<Frame>> {
        let (timestamp, path) = self.files.get(self.pos)?.clone();
        self.pos += 1;
        Some(crate::encoder::load_rgb(&path).map(|image| Frame { timestamp, image }))
    }

    fn skip_frame(&mut self) -> Option<Result<()>> {
        let has = self.pos < self.files.len();
        self.pos += 1;
        has.then_some(Ok(()))
    }
}

/// Sampling instants `t_start + k / rate` strictly before `t_end`.
pub fn sample_times(t_start: f64, t_end: f64, rate: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 0u64;
    loop {
        let t = t_start + k as f64 / rate;
        if t >= t_end {
            break;
        }
        out.push(t);
        k += 1;
    }
    out
}

/// For each sampling instant, the first frame at or after it and inside the
/// span; frames matched by several instants are scored once.
pub fn span_candidates(source: &mut dyn FrameSource, t_start: f64, t_end: f64, rate: f64) -> Result<Vec<Frame>> {
    source.rewind()?;
    let mut out: Vec<Frame> = Vec::new();
    for tau in sample_times(t_start, t_end, rate) {
        if out.last().is_some_and(|f| f.timestamp >= tau) {
            continue;
        }
        loop {
            match source.peek_timestamp() {
                None => return Ok(out),
                Some(ts) => {
                    let ts = ts?;
                    if ts >= t_end {
                        return Ok(out);
                    }
                    if ts >= tau {
                        let f = source.next_frame().expect("peeked")?;
                        out.push(f);
                        break;
                    }
                    source.skip_frame().expect("peeked")?;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeRecord {
    pub step: usize,
    pub timestamp: f64,
    pub score: f64,
    pub image_path: Option<PathBuf>,
}

/// The in-span frame with the highest clip score against the step text;
/// the earliest frame wins ties.
pub fn select_keyframe(
    source: &mut dyn FrameSource,
    recipe_id: &str,
    step: &Step,
    encoder: &dyn EmbeddingProvider,
    sample_rate: f64,
) -> Result<(KeyframeRecord, RgbImage)> {
    if !(sample_rate > 0.0 && sample_rate.is_finite()) {
        return Err(Error::Config(format!("sample rate {sample_rate} must be positive")));
    }
    let (t0, t1) = step
        .span()
        .ok_or_else(|| Error::Validation(format!("recipe {recipe_id} step {} has no time span", step.index)))?;
    let text = encode_step_text(encoder, &step.text)?.vector;
    let no_frame = || Error::NoFrame {
        recipe_id: recipe_id.to_string(),
        step: step.index,
    };
    let mut best: Option<(f64, Frame)> = None;
    for frame in span_candidates(source, t0, t1, sample_rate)? {
        let score = clip_score(&encoder.encode_image(&frame.image)?, &text)?;
        if best.as_ref().map_or(true, |(s, _)| score > *s) {
            best = Some((score, frame));
        }
    }
    let (score, frame) = best.ok_or_else(no_frame)?;
    Ok((
        KeyframeRecord {
            step: step.index,
            timestamp: frame.timestamp,
            score,
            image_path: None,
        },
        frame.image,
    ))
}

/// Center-crop, resize to 256x256 and write a PNG.
pub fn resize_and_store(image: &RgbImage, out_path: &Path) -> Result<RgbImage> {
    let stored = crop_and_resize(image, STORED_SIZE)?;
    save_png(&stored, out_path)?;
    Ok(stored)
}

/// One annotated video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoAnnotation {
    pub recipe_id: String,
    pub split: Split,
    pub label: Option<String>,
    /// `(text, t_start, t_end)` in order.
    pub steps: Vec<(String, f64, f64)>,
}

#[derive(Deserialize)]
struct RawDatabase {
    database: std::collections::BTreeMap<String, RawVideo>,
}

#[derive(Deserialize)]
struct RawVideo {
    subset: String,
    #[serde(default)]
    recipe_type: Option<serde_json::Value>,
    #[serde(default)]
    annotations: Vec<RawSegment>,
}

#[derive(Deserialize)]
struct RawSegment {
    segment: [f64; 2],
    sentence: String,
}

/// Parses the YouCookII annotation file. Videos outside the training and
/// validation subsets, or without annotations, are left out.
pub fn parse_youcook_annotations(text: &str) -> Result<Vec<VideoAnnotation>> {
    let raw: RawDatabase = serde_json::from_str(text)?;
    let mut out = Vec::new();
    for (id, video) in raw.database {
        let split = match video.subset.as_str() {
            "training" => Split::Train,
            "validation" => Split::Validation,
            _ => continue,
        };
        if video.annotations.is_empty() {
            continue;
        }
        let label = video.recipe_type.map(|v| match v {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        });
        out.push(VideoAnnotation {
            recipe_id: id,
            split,
            label,
            steps: video
                .annotations
                .into_iter()
                .map(|a| (a.sentence.trim().to_string(), a.segment[0], a.segment[1]))
                .collect(),
        });
    }
    Ok(out)
}

pub fn load_youcook_annotations(path: &Path) -> Result<Vec<VideoAnnotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_youcook_annotations(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Candidate frames per second inside each span.
    pub sample_rate: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { sample_rate: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub recipe_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct BuildReport {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub keyframes: Vec<(String, Vec<KeyframeRecord>)>,
    pub skipped: Vec<SkipEntry>,
}

pub fn image_ref(recipe_id: &str, step: usize) -> PathBuf {
    Path::new("images").join(recipe_id).join(format!("{step}.png"))
}

fn process_video(
    annotation: &VideoAnnotation,
    source: &mut dyn FrameSource,
    encoder: &dyn EmbeddingProvider,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<(Recipe, Vec<KeyframeRecord>)> {
    let mut steps = Vec::with_capacity(annotation.steps.len());
    let mut chosen = Vec::with_capacity(annotation.steps.len());
    for (i, (text, t0, t1)) in annotation.steps.iter().enumerate() {
        let step = Step::new(i + 1, text.clone()).with_span(*t0, *t1);
        let (record, frame) = select_keyframe(source, &annotation.recipe_id, &step, encoder, config.sample_rate)?;
        chosen.push((step, record, frame));
    }
    let mut records = Vec::with_capacity(chosen.len());
    for (step, mut record, frame) in chosen {
        let rel = image_ref(&annotation.recipe_id, step.index);
        resize_and_store(&frame, &out_dir.join(&rel))?;
        record.image_path = Some(rel.clone());
        records.push(record);
        steps.push(step.with_image(rel));
    }
    let recipe = Recipe {
        recipe_id: annotation.recipe_id.clone(),
        split: annotation.split,
        steps,
        label: annotation.label.clone(),
    };
    recipe.validate()?;
    Ok((recipe, records))
}

/// Processes videos in parallel, writes `manifest.jsonl` and `skipped.jsonl`
/// under `out_dir`. A video that fails anywhere is skipped whole.
pub fn build_manifest(
    videos: Vec<(VideoAnnotation, Box<dyn FrameSource>)>,
    encoder: &dyn EmbeddingProvider,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<BuildReport> {
    let results: Vec<(String, Result<(Recipe, Vec<KeyframeRecord>)>)> = videos
        .into_par_iter()
        .map(|(annotation, mut source)| {
            let r = process_video(&annotation, source.as_mut(), encoder, config, out_dir);
            (annotation.recipe_id, r)
        })
        .collect();
    let mut recipes = Vec::new();
    let mut keyframes = Vec::new();
    let mut skipped = Vec::new();
    for (id, r) in results {
        match r {
            Ok((recipe, records)) => {
                keyframes.push((id, records));
                recipes.push(recipe);
            }
            Err(e) => {
                log::warn!("skipping {id}: {e}");
                skipped.push(SkipEntry {
                    recipe_id: id,
                    reason: e.to_string(),
                });
            }
        }
    }
    skipped.sort_by(|a, b| a.recipe_id.cmp(&b.recipe_id));
    keyframes.sort_by(|a, b| a.0.cmp(&b.0));
    let skip_path = out_dir.join("skipped.jsonl");
    let mut skip_text = String::new();
    for s in &skipped {
        skip_text.push_str(&serde_json::to_string(s)?);
        skip_text.push('\n');
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    fs::write(&skip_path, skip_text).map_err(|e| Error::io(&skip_path, e))?;
    if recipes.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let manifest = Manifest::new(out_dir, recipes)?;
    let manifest_path = out_dir.join("manifest.jsonl");
    manifest.save(&manifest_path)?;
    Ok(BuildReport {
        manifest,
        manifest_path,
        keyframes,
        skipped,
    })
}
