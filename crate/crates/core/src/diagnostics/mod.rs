//! Representation diagnostics: attention distance, head similarity,
//! average attention maps with their diagonal/column pattern scores, and
//! filter-normalized loss landscapes.

mod attention;
mod landscape;
pub mod report;

pub use attention::{
    attention_distance, attention_distance_over, average_attention_map, grid_distances, head_similarity,
    head_similarity_over, pattern_scores, AttnDistanceReport, AvgAttentionMap, DistanceUnit,
    HeadSimilarityReport, PatternScores,
};
pub use landscape::{
    filter_norms, filter_normalized_direction, is_filtered, loss_landscape, perturb, LandscapeCurve,
    LandscapeSample,
};

use crate::distill::train::seeded;
use crate::error::Result;
use crate::finetune::EVAL_BATCH;
use crate::io::data::Dataset;
use crate::model::{AttentionRecord, Encoder, ForwardOptions};

/// Eval-mode attention of the first `limit` images of `data` (all when
/// `limit` is 0).
pub fn collect_attention(enc: &Encoder, data: &Dataset, limit: usize) -> Result<Vec<AttentionRecord>> {
    let n = if limit == 0 { data.len() } else { limit.min(data.len()) };
    let order: Vec<usize> = (0..n).collect();
    let mut rng = seeded(0, 0);
    let mut out = Vec::with_capacity(n);
    for chunk in order.chunks(EVAL_BATCH) {
        let (images, _) = data.batch(chunk)?;
        let res = enc.forward(&images, ForwardOptions::eval().capturing(), &mut rng)?;
        out.extend(res.attention.unwrap_or_default());
    }
    Ok(out)
}
