use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::model::{ImageEmbeddingCache, ProceduralDiffusion};
use super::sample::{sample_sequence, SamplerConfig};
use crate::encoder::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::procedure::{make_prompt_sequence, PromptScenario, Recipe, Step};

/// One recipe edit. Step indices are 1-based and refer to the recipe as left
/// by the preceding edits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum StepEdit {
    /// Replace every occurrence of `find` in the step text.
    Replace {
        step: usize,
        find: String,
        replace: String,
    },
    /// Insert a new step at `step`, shifting later steps down.
    Insert {
        step: usize,
        text: String,
    },
    Delete {
        step: usize,
    },
}

impl StepEdit {
    pub fn step(&self) -> usize {
        match self {
            StepEdit::Replace { step, .. } | StepEdit::Insert { step, .. } | StepEdit::Delete { step } => *step,
        }
    }
}

impl fmt::Display for StepEdit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepEdit::Replace { step, find, replace } => write!(f, "{step}:{find}->{replace}"),
            StepEdit::Insert { step, text } => write!(f, "{step}:+{text}"),
            StepEdit::Delete { step } => write!(f, "{step}:-"),
        }
    }
}

/// `K:find->replace`, `K:+text` or `K:-`.
impl FromStr for StepEdit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |message: &str| Error::Edit {
            step: 0,
            message: format!("`{s}`: {message}"),
        };
        let (k, rest) = s.split_once(':').ok_or_else(|| bad("expected `STEP:EDIT`"))?;
        let step: usize = k.trim().parse().map_err(|_| bad("step is not a number"))?;
        if step == 0 {
            return Err(bad("steps are numbered from 1"));
        }
        if rest == "-" {
            return Ok(StepEdit::Delete { step });
        }
        if let Some(text) = rest.strip_prefix('+') {
            return Ok(StepEdit::Insert {
                step,
                text: text.to_string(),
            });
        }
        let (find, replace) = rest
            .split_once("->")
            .ok_or_else(|| bad("expected `find->replace`, `+text` or `-`"))?;
        Ok(StepEdit::Replace {
            step,
            find: find.to_string(),
            replace: replace.to_string(),
        })
    }
}

/// Applies `edits` in order and renumbers the steps.
pub fn apply_edits(recipe: &Recipe, edits: &[StepEdit]) -> Result<Recipe> {
    let mut steps = recipe.steps.clone();
    for edit in edits {
        let n = steps.len();
        let k = edit.step();
        let err = |message: String| Error::Edit { step: k, message };
        match edit {
            StepEdit::Replace { find, replace, .. } => {
                let step = steps
                    .get_mut(k.wrapping_sub(1))
                    .ok_or_else(|| err(format!("recipe has {n} steps")))?;
                if find.is_empty() || !step.text.contains(find.as_str()) {
                    return Err(err(format!("`{find}` not found in \"{}\"", step.text)));
                }
                step.text = step.text.replace(find.as_str(), replace);
                if step.text.trim().is_empty() {
                    return Err(err("edit leaves the step empty".into()));
                }
            }
            StepEdit::Insert { text, .. } => {
                if k == 0 || k > n + 1 {
                    return Err(err(format!("cannot insert at {k} into {n} steps")));
                }
                if text.trim().is_empty() {
                    return Err(err("inserted step is empty".into()));
                }
                steps.insert(k - 1, Step::new(k, text.clone()));
            }
            StepEdit::Delete { .. } => {
                if k == 0 || k > n {
                    return Err(err(format!("recipe has {n} steps")));
                }
                if n == 1 {
                    return Err(err("cannot delete the only step".into()));
                }
                steps.remove(k - 1);
            }
        }
        for (i, s) in steps.iter_mut().enumerate() {
            s.index = i + 1;
        }
    }
    let edited = Recipe {
        steps,
        ..recipe.clone()
    };
    edited.validate()?;
    Ok(edited)
}

/// Edits the recipe and regenerates it end to end, so the memory of every
/// downstream step sees the edit.
#[allow(clippy::too_many_arguments)]
pub fn manipulate_and_generate(
    model: &ProceduralDiffusion,
    recipe: &Recipe,
    edits: &[StepEdit],
    scenario: &PromptScenario,
    root: &Path,
    provider: &dyn EmbeddingProvider,
    sampler: &SamplerConfig,
) -> Result<(Recipe, Vec<RgbImage>)> {
    let edited = apply_edits(recipe, edits)?;
    let sequence = make_prompt_sequence(&edited, scenario, root)?;
    let mut cache = ImageEmbeddingCache::default();
    let images = sample_sequence(model, &sequence, provider, &mut cache, sampler)?;
    Ok((edited, images))
}
