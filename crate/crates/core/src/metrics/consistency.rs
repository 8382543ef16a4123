use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{clip_score, EmbeddingProvider};
use crate::error::{Error, Result};

/// `P_i` for every step and their mean `P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureConsistency {
    pub per_step: Vec<f64>,
    pub p: f64,
    /// Steps whose text similarities were all zero and fell back to uniform
    /// weights (1-based).
    pub uniform_fallback: Vec<usize>,
}

/// Weights `<C_i, C_j>^norm` over `j != i`: clamped text-text scores scaled
/// to sum to one. Row `i` has a zero at column `i`. Returns the weights and
/// whether the uniform fallback was used.
pub fn similarity_weights(text_embs: &[Vec<f32>], i: usize) -> Result<(Vec<f64>, bool)> {
    let n = text_embs.len();
    let mut w = vec![0.0; n];
    for j in (0..n).filter(|&j| j != i) {
        w[j] = clip_score(&text_embs[i], &text_embs[j])?;
    }
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|x| *x /= total);
        Ok((w, false))
    } else {
        let u = 1.0 / (n - 1) as f64;
        for (j, x) in w.iter_mut().enumerate() {
            *x = if j == i { 0.0 } else { u };
        }
        Ok((w, true))
    }
}

/// `sum w_k x_k` for weights summing to one, evaluated as
/// `min + sum w_k (x_k - min)`: equal values come back bit-exact even when
/// the weights sum to one only up to rounding.
fn offset_weighted_mean(terms: &[(f64, f64)]) -> f64 {
    let base = terms.iter().map(|&(_, x)| x).fold(f64::INFINITY, f64::min);
    base + terms.iter().map(|&(w, x)| w * (x - base)).sum::<f64>()
}

/// Procedure consistency from precomputed step-text and generated-image
/// embeddings.
pub fn procedure_consistency_from_embeddings(
    text_embs: &[Vec<f32>],
    image_embs: &[Vec<f32>],
) -> Result<ProcedureConsistency> {
    let n = text_embs.len();
    if image_embs.len() != n {
        return Err(Error::Validation(format!(
            "{n} step texts but {} generated images",
            image_embs.len()
        )));
    }
    if n < 2 {
        return Err(Error::UndefinedMetric(format!(
            "procedure consistency needs at least 2 steps, got {n}"
        )));
    }
    let mut per_step = Vec::with_capacity(n);
    let mut uniform_fallback = Vec::new();
    for i in 0..n {
        let (w, fallback) = similarity_weights(text_embs, i)?;
        if fallback {
            log::warn!("step {}: all text similarities are zero, using uniform weights", i + 1);
            uniform_fallback.push(i + 1);
        }
        let scores = (0..n)
            .filter(|&j| j != i)
            .map(|j| Ok((j, clip_score(&image_embs[i], &text_embs[j])?)))
            .collect::<Result<Vec<_>>>()?;
        let excess: Vec<(f64, f64)> = scores.iter().map(|&(j, s)| (w[j], s)).collect();
        per_step.push(offset_weighted_mean(&excess));
    }
    let uniform: Vec<(f64, f64)> = per_step.iter().map(|&p| (1.0 / n as f64, p)).collect();
    let p = offset_weighted_mean(&uniform);
    Ok(ProcedureConsistency {
        per_step,
        p,
        uniform_fallback,
    })
}

pub fn procedure_consistency(
    step_texts: &[&str],
    gen_images: &[RgbImage],
    encoder: &dyn EmbeddingProvider,
) -> Result<ProcedureConsistency> {
    let texts = step_texts
        .iter()
        .map(|t| encoder.encode_text(t))
        .collect::<Result<Vec<_>>>()?;
    let images = gen_images
        .iter()
        .map(|im| encoder.encode_image(im))
        .collect::<Result<Vec<_>>>()?;
    procedure_consistency_from_embeddings(&texts, &images)
}

/// One recipe's generated images with its step texts.
#[derive(Debug, Clone)]
pub struct GeneratedRecipe {
    pub recipe_id: String,
    pub texts: Vec<String>,
    /// `None` marks a step without a generated image.
    pub images: Vec<Option<RgbImage>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeConsistency {
    pub recipe_id: String,
    pub per_step: Vec<f64>,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedRecipe {
    pub recipe_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub encoder: String,
    pub avg_pcon: f64,
    pub recipe_count: usize,
    pub recipes: Vec<RecipeConsistency>,
    pub excluded: Vec<ExcludedRecipe>,
}

impl ConsistencyReport {
    pub fn summary(&self) -> String {
        format!(
            "Avg-PCon {:.3} over {} recipes ({} excluded, encoder {})",
            self.avg_pcon,
            self.recipe_count,
            self.excluded.len(),
            self.encoder
        )
    }
}

/// Unweighted mean of per-recipe `P`. Recipes with fewer than two steps or a
/// missing image are excluded and listed.
pub fn avg_pcon(recipes: &[GeneratedRecipe], encoder: &dyn EmbeddingProvider) -> Result<ConsistencyReport> {
    let results: Vec<std::result::Result<RecipeConsistency, ExcludedRecipe>> = recipes
        .par_iter()
        .map(|r| score_recipe(r, encoder))
        .collect::<Result<Vec<_>>>()?;
    let mut scored = Vec::new();
    let mut excluded = Vec::new();
    for r in results {
        match r {
            Ok(s) => scored.push(s),
            Err(e) => excluded.push(e),
        }
    }
    if scored.is_empty() {
        return Err(Error::EmptyMetric(format!(
            "no eligible recipes ({} excluded)",
            excluded.len()
        )));
    }
    let avg = scored.iter().map(|r| r.p).sum::<f64>() / scored.len() as f64;
    Ok(ConsistencyReport {
        encoder: encoder.name().to_string(),
        avg_pcon: avg,
        recipe_count: scored.len(),
        recipes: scored,
        excluded,
    })
}

fn score_recipe(
    recipe: &GeneratedRecipe,
    encoder: &dyn EmbeddingProvider,
) -> Result<std::result::Result<RecipeConsistency, ExcludedRecipe>> {
    let exclude = |reason: String| {
        Ok(Err(ExcludedRecipe {
            recipe_id: recipe.recipe_id.clone(),
            reason,
        }))
    };
    let n = recipe.texts.len();
    if n < 2 {
        return exclude(format!("{n} step(s); consistency needs at least 2"));
    }
    if recipe.images.len() != n {
        return exclude(format!("{} images for {n} steps", recipe.images.len()));
    }
    let mut images = Vec::with_capacity(n);
    for (i, im) in recipe.images.iter().enumerate() {
        match im {
            Some(im) => images.push(im.clone()),
            None => return exclude(format!("step {} has no generated image", i + 1)),
        }
    }
    let texts: Vec<&str> = recipe.texts.iter().map(String::as_str).collect();
    let pc = procedure_consistency(&texts, &images, encoder)?;
    Ok(Ok(RecipeConsistency {
        recipe_id: recipe.recipe_id.clone(),
        per_step: pc.per_step,
        p: pc.p,
    }))
}
