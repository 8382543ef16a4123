//! Procedure consistency and Fréchet distance, plus grouping of per-step
//! results by history length.

pub mod consistency;
pub mod fid;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use consistency::{
    avg_pcon, procedure_consistency, procedure_consistency_from_embeddings, ConsistencyReport, GeneratedRecipe,
    ProcedureConsistency, RecipeConsistency,
};
pub use fid::{
    fid_over_sets, frechet_distance, FeatureExtractor, FeatureStats, FidReport, ImageItem, ToyFeatureExtractor,
};

/// Longest history reported on its own; longer histories share one bucket.
pub const MAX_SEPARATE_HISTORY: usize = 8;

/// Number of steps preceding a generated image, with everything above
/// [`MAX_SEPARATE_HISTORY`] pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HistoryBucket {
    Exactly(usize),
    MoreThan8,
}

impl HistoryBucket {
    /// Bucket of the step at 1-based `position`.
    pub fn of(position: usize) -> Self {
        let h = position.saturating_sub(1);
        if h > MAX_SEPARATE_HISTORY {
            HistoryBucket::MoreThan8
        } else {
            HistoryBucket::Exactly(h)
        }
    }
}

impl fmt::Display for HistoryBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HistoryBucket::Exactly(h) => write!(f, "{h}"),
            HistoryBucket::MoreThan8 => f.write_str("more than 8"),
        }
    }
}

/// Mean `P_i` per history bucket over all scored recipes.
pub fn consistency_by_history(report: &ConsistencyReport) -> BTreeMap<HistoryBucket, (f64, usize)> {
    let mut acc: BTreeMap<HistoryBucket, (f64, usize)> = BTreeMap::new();
    for r in &report.recipes {
        for (i, &p) in r.per_step.iter().enumerate() {
            let e = acc.entry(HistoryBucket::of(i + 1)).or_insert((0.0, 0));
            e.0 += p;
            e.1 += 1;
        }
    }
    for v in acc.values_mut() {
        v.0 /= v.1 as f64;
    }
    acc
}
