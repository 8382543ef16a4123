//! Procedures (recipes), the JSON-lines manifest format, and the scenario
//! transform that turns a recipe into a procedural prompt sequence.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" | "training" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            other => Err(Error::Validation(format!("unknown split `{other}`"))),
        }
    }
}

/// One instruction of a procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// 1-based position in the recipe.
    #[serde(rename = "idx")]
    pub index: usize,
    pub text: String,
    pub t_start: Option<f64>,
    pub t_end: Option<f64>,
    /// Image path relative to the manifest directory.
    #[serde(rename = "image")]
    pub image_ref: Option<PathBuf>,
}

impl Step {
    pub fn new(index: usize, text: impl Into<String>) -> Self {
        Step {
            index,
            text: text.into(),
            t_start: None,
            t_end: None,
            image_ref: None,
        }
    }

    pub fn with_span(mut self, t_start: f64, t_end: f64) -> Self {
        self.t_start = Some(t_start);
        self.t_end = Some(t_end);
        self
    }

    pub fn with_image(mut self, image_ref: impl Into<PathBuf>) -> Self {
        self.image_ref = Some(image_ref.into());
        self
    }

    pub fn span(&self) -> Option<(f64, f64)> {
        self.t_start.zip(self.t_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub recipe_id: String,
    pub split: Split,
    pub steps: Vec<Step>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Recipe {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.text.as_str()).collect()
    }

    /// Checks the structural invariants that do not need the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.recipe_id.is_empty() {
            return Err(Error::Validation("empty recipe_id".into()));
        }
        if self.steps.is_empty() {
            return Err(Error::Validation(format!("recipe {} has no steps", self.recipe_id)));
        }
        for (pos, step) in self.steps.iter().enumerate() {
            if step.index != pos + 1 {
                return Err(Error::Referential(format!(
                    "recipe {}: step indices must be contiguous from 1, found {} at position {}",
                    self.recipe_id,
                    step.index,
                    pos + 1
                )));
            }
            if let Some((start, end)) = step.span() {
                if !(start < end) {
                    return Err(Error::Validation(format!(
                        "recipe {} step {}: t_start {start} must precede t_end {end}",
                        self.recipe_id, step.index
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A loaded manifest: recipes sorted by id plus the directory image paths
/// are rooted at.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub recipes: Vec<Recipe>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, mut recipes: Vec<Recipe>) -> Result<Self> {
        recipes.sort_by(|a, b| a.recipe_id.cmp(&b.recipe_id));
        for pair in recipes.windows(2) {
            if pair[0].recipe_id == pair[1].recipe_id {
                return Err(Error::Integrity(format!("duplicate recipe_id `{}`", pair[0].recipe_id)));
            }
        }
        for recipe in &recipes {
            recipe.validate()?;
        }
        Ok(Manifest {
            root: root.into(),
            recipes,
        })
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }

    pub fn image_path(&self, step: &Step) -> Option<PathBuf> {
        step.image_ref.as_deref().map(|p| self.resolve(p))
    }

    pub fn get(&self, recipe_id: &str) -> Option<&Recipe> {
        self.recipes
            .binary_search_by(|r| r.recipe_id.as_str().cmp(recipe_id))
            .ok()
            .map(|i| &self.recipes[i])
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Recipe> {
        self.recipes.iter().filter(move |r| r.split == split)
    }

    pub fn pair_count(&self, split: Split) -> usize {
        self.split(split).map(Recipe::len).sum()
    }

    /// Canonical serialization: one JSON object per line, sorted by id.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for recipe in &self.recipes {
            out.push_str(&serde_json::to_string(recipe)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_jsonl()?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Reads and validates a JSON-lines manifest. Image references are resolved
/// against the manifest's directory and must point at decodable images.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut recipes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let recipe: Recipe = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        recipes.push(recipe);
    }
    let manifest = Manifest::new(root, recipes)?;
    for recipe in &manifest.recipes {
        for step in &recipe.steps {
            if let Some(img) = manifest.image_path(step) {
                if !img.is_file() {
                    return Err(Error::Referential(format!(
                        "recipe {} step {}: missing image {}",
                        recipe.recipe_id,
                        step.index,
                        img.display()
                    )));
                }
                image::image_dimensions(&img).map_err(|e| Error::image(&img, e))?;
            }
        }
    }
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    TextOnly,
    ImageHistory,
    Multimodal,
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text_only" | "text-only" | "1" => Ok(ScenarioKind::TextOnly),
            "image_history" | "image-history" | "2" => Ok(ScenarioKind::ImageHistory),
            "multimodal" | "3" => Ok(ScenarioKind::Multimodal),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::TextOnly => "text_only",
            ScenarioKind::ImageHistory => "image_history",
            ScenarioKind::Multimodal => "multimodal",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Ordered,
    Random,
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ordered" => Ok(Placement::Ordered),
            "random" => Ok(Placement::Random),
            other => Err(Error::Config(format!("unknown placement `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptScenario {
    pub kind: ScenarioKind,
    /// Fraction of positions that carry an image (multimodal only).
    pub p: f64,
    pub placement: Placement,
    /// Image positions also keep their text, mixed into one token.
    pub retain_text: bool,
    pub seed: u64,
}

impl PromptScenario {
    pub fn text_only() -> Self {
        PromptScenario {
            kind: ScenarioKind::TextOnly,
            p: 0.0,
            placement: Placement::Ordered,
            retain_text: false,
            seed: 0,
        }
    }

    pub fn image_history() -> Self {
        PromptScenario {
            kind: ScenarioKind::ImageHistory,
            ..Self::text_only()
        }
    }

    pub fn multimodal(p: f64, placement: Placement, seed: u64) -> Self {
        PromptScenario {
            kind: ScenarioKind::Multimodal,
            p,
            placement,
            retain_text: false,
            seed,
        }
    }

    pub fn with_retain_text(mut self, retain_text: bool) -> Self {
        self.retain_text = retain_text;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ScenarioKind::Multimodal && !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Validation(format!(
                "available-image fraction p = {} outside [0, 1]",
                self.p
            )));
        }
        Ok(())
    }

    /// Number of image positions for a recipe of length `n`: `ceil(p * n)`.
    pub fn image_count(&self, n: usize) -> usize {
        // 0.3 * 10 evaluates to 3.0000000000000004; absorb that before ceil.
        let raw = self.p * n as f64;
        let count = (raw - 1e-9).ceil().max(0.0) as usize;
        count.min(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
    TextImage,
}

impl Modality {
    pub fn has_text(self) -> bool {
        matches!(self, Modality::Text | Modality::TextImage)
    }

    pub fn has_image(self) -> bool {
        matches!(self, Modality::Image | Modality::TextImage)
    }
}

/// One position of a prompt sequence. `modality` states what the position
/// contributes to the procedural prompt; `text` is always the step's
/// conditional prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub position: usize,
    pub modality: Modality,
    pub text: String,
    pub image: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSequence {
    pub recipe_id: String,
    pub kind: ScenarioKind,
    pub entries: Vec<PromptEntry>,
    /// 1-based positions contributing text (n_i).
    pub text_positions: Vec<usize>,
    /// 1-based positions contributing an image (m_j).
    pub image_positions: Vec<usize>,
}

impl PromptSequence {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_text(&self) -> usize {
        self.text_positions.len()
    }

    pub fn n_image(&self) -> usize {
        self.image_positions.len()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.text.as_str()).collect()
    }

    /// Images of steps strictly before `position` (1-based); the image history
    /// of that step.
    pub fn history_images(&self, position: usize) -> Vec<&Path> {
        self.entries
            .iter()
            .take(position.saturating_sub(1))
            .filter_map(|e| e.image.as_deref())
            .collect()
    }
}

/// Builds the prompt sequence of `recipe` under `scenario`. Image paths in
/// the result are resolved against `root`.
pub fn make_prompt_sequence(recipe: &Recipe, scenario: &PromptScenario, root: &Path) -> Result<PromptSequence> {
    scenario.validate()?;
    let n = recipe.len();
    let with_image: Vec<usize> = recipe
        .steps
        .iter()
        .filter(|s| s.image_ref.is_some())
        .map(|s| s.index)
        .collect();

    let image_set: BTreeSet<usize> = match scenario.kind {
        ScenarioKind::TextOnly => BTreeSet::new(),
        ScenarioKind::ImageHistory => {
            if with_image.len() < n {
                return Err(Error::Coverage {
                    recipe_id: recipe.recipe_id.clone(),
                    required: n,
                    available: with_image.len(),
                });
            }
            (1..=n).collect()
        }
        ScenarioKind::Multimodal => {
            let k = scenario.image_count(n);
            match scenario.placement {
                Placement::Ordered => {
                    let prefix = recipe.steps.iter().take_while(|s| s.image_ref.is_some()).count();
                    if prefix < k {
                        return Err(Error::Coverage {
                            recipe_id: recipe.recipe_id.clone(),
                            required: k,
                            available: prefix,
                        });
                    }
                    (1..=k).collect()
                }
                Placement::Random => {
                    if with_image.len() < k {
                        return Err(Error::Coverage {
                            recipe_id: recipe.recipe_id.clone(),
                            required: k,
                            available: with_image.len(),
                        });
                    }
                    let mut rng = rng_for(scenario.seed, &format!("placement/{}", recipe.recipe_id));
                    sample(&mut rng, with_image.len(), k)
                        .into_iter()
                        .map(|i| with_image[i])
                        .collect()
                }
            }
        }
    };

    let mut entries = Vec::with_capacity(n);
    let mut text_positions = Vec::new();
    let mut image_positions = Vec::new();
    for step in &recipe.steps {
        let has_image = image_set.contains(&step.index);
        let modality = match (has_image, scenario.kind) {
            (false, _) => Modality::Text,
            (true, ScenarioKind::Multimodal) if scenario.retain_text => Modality::TextImage,
            (true, _) => Modality::Image,
        };
        if modality.has_text() {
            text_positions.push(step.index);
        }
        if modality.has_image() {
            image_positions.push(step.index);
        }
        entries.push(PromptEntry {
            position: step.index,
            modality,
            text: step.text.clone(),
            image: if has_image {
                step.image_ref.as_deref().map(|p| root.join(p))
            } else {
                None
            },
        });
    }

    Ok(PromptSequence {
        recipe_id: recipe.recipe_id.clone(),
        kind: scenario.kind,
        entries,
        text_positions,
        image_positions,
    })
}

/// Draws the evaluation-time fraction p, uniform on (0, 0.5], for one recipe.
pub fn sample_validation_p(seed: u64, recipe_id: &str) -> f64 {
    let mut rng = rng_for(seed, &format!("validation-p/{recipe_id}"));
    let u: f64 = rng.random();
    0.5 * (1.0 - u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn recipe(n: usize, images: bool) -> Recipe {
        Recipe {
            recipe_id: "r1".into(),
            split: Split::Train,
            steps: (1..=n)
                .map(|i| {
                    let s = Step::new(i, format!("step {i}"));
                    if images {
                        s.with_image(format!("images/r1/{i}.png"))
                    } else {
                        s
                    }
                })
                .collect(),
            label: None,
        }
    }

    #[test]
    fn ordered_placement_is_prefix() {
        let r = recipe(10, true);
        let sc = PromptScenario::multimodal(0.3, Placement::Ordered, 0);
        let seq = make_prompt_sequence(&r, &sc, Path::new("")).unwrap();
        assert_eq!(seq.image_positions, vec![1, 2, 3]);
        assert_eq!(seq.n_text() + seq.n_image(), 10);
    }

    #[test]
    fn random_placement_is_seed_deterministic() {
        let r = recipe(10, true);
        let sc = PromptScenario::multimodal(0.3, Placement::Random, 7);
        let a = make_prompt_sequence(&r, &sc, Path::new("")).unwrap();
        let b = make_prompt_sequence(&r, &sc, Path::new("")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_image(), 3);
    }

    #[test]
    fn zero_p_matches_text_only() {
        let r = recipe(5, true);
        for placement in [Placement::Ordered, Placement::Random] {
            let mm = make_prompt_sequence(&r, &PromptScenario::multimodal(0.0, placement, 3), Path::new("")).unwrap();
            let text = make_prompt_sequence(&r, &PromptScenario::text_only(), Path::new("")).unwrap();
            assert_eq!(mm.entries, text.entries);
            assert_eq!(mm.image_positions, Vec::<usize>::new());
        }
    }

    #[test]
    fn retain_text_marks_mixed_positions() {
        let r = recipe(4, true);
        let sc = PromptScenario::multimodal(0.5, Placement::Ordered, 0).with_retain_text(true);
        let seq = make_prompt_sequence(&r, &sc, Path::new("")).unwrap();
        assert_eq!(seq.entries[0].modality, Modality::TextImage);
        assert_eq!(seq.entries[2].modality, Modality::Text);
        assert_eq!(seq.n_text(), 4);
        assert_eq!(seq.n_image(), 2);
    }

    #[test]
    fn coverage_error_when_images_missing() {
        let mut r = recipe(4, true);
        r.steps[1].image_ref = None;
        let sc = PromptScenario::multimodal(0.5, Placement::Ordered, 0);
        assert!(matches!(
            make_prompt_sequence(&r, &sc, Path::new("")),
            Err(Error::Coverage {
                required: 2,
                available: 1,
                ..
            })
        ));
        let no_images = recipe(3, false);
        assert!(matches!(
            make_prompt_sequence(&no_images, &PromptScenario::image_history(), Path::new("")),
            Err(Error::Coverage { .. })
        ));
    }

    #[test]
    fn image_history_exposes_prior_images() {
        let r = recipe(3, true);
        let seq = make_prompt_sequence(&r, &PromptScenario::image_history(), Path::new("/d")).unwrap();
        assert!(seq.history_images(1).is_empty());
        assert_eq!(
            seq.history_images(3),
            vec![Path::new("/d/images/r1/1.png"), Path::new("/d/images/r1/2.png")]
        );
    }

    #[test]
    fn validation_p_range_and_determinism() {
        for seed in 0..1000 {
            let p = sample_validation_p(seed, "abc");
            assert!(p > 0.0 && p <= 0.5);
        }
        assert_eq!(sample_validation_p(9, "x"), sample_validation_p(9, "x"));
        assert_ne!(sample_validation_p(9, "x"), sample_validation_p(9, "y"));
    }

    #[test]
    fn validation_p_mean() {
        let n = 100_000;
        let mean: f64 = (0..n).map(|i| sample_validation_p(i, "recipe")).sum::<f64>() / n as f64;
        assert!((mean - 0.25).abs() <= 0.005, "mean {mean}");
    }

    #[test]
    fn non_contiguous_indices_rejected() {
        let mut r = recipe(2, false);
        r.steps[1].index = 3;
        assert!(matches!(r.validate(), Err(Error::Referential(_))));
    }

    #[test]
    fn inverted_span_rejected() {
        let mut r = recipe(1, false);
        r.steps[0] = Step::new(1, "x").with_span(5.0, 2.0);
        assert!(matches!(r.validate(), Err(Error::Validation(_))));
    }

    proptest! {
        #[test]
        fn multimodal_partition(n in 1usize..30, p in 0.0f64..=1.0, seed in any::<u64>(), ordered in any::<bool>()) {
            let r = recipe(n, true);
            let placement = if ordered { Placement::Ordered } else { Placement::Random };
            let sc = PromptScenario::multimodal(p, placement, seed);
            let seq = make_prompt_sequence(&r, &sc, Path::new("")).unwrap();
            prop_assert_eq!(seq.n_text() + seq.n_image(), n);
            let mut all: Vec<usize> = seq.text_positions.iter().chain(&seq.image_positions).copied().collect();
            all.sort();
            prop_assert_eq!(all, (1..=n).collect::<Vec<_>>());
            if ordered {
                prop_assert_eq!(seq.image_positions.iter().max().copied().unwrap_or(0), seq.n_image());
            }
            let again = make_prompt_sequence(&r, &sc, Path::new("")).unwrap();
            prop_assert_eq!(seq, again);
        }
    }
}
