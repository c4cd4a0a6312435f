use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FaResult {
    /// Detection threshold; an example fires when its score is `>=` this.
    pub threshold: f64,
    pub false_accepts: usize,
    pub misses: usize,
    pub positives: usize,
    pub negatives: usize,
}

impl FaResult {
    pub fn miss_rate(&self) -> f64 {
        self.misses as f64 / self.positives as f64
    }
}

/// False accepts at the highest threshold whose miss rate over positives
/// stays within `target_miss`. With `k = floor(target_miss · P)` misses
/// allowed, the threshold is the `k`-th smallest positive score (`+inf` when
/// every positive may be missed).
pub fn false_accepts_at_miss_rate(scores: &[f64], positive: &[bool], target_miss: f64) -> Result<FaResult> {
    if scores.len() != positive.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if !(0.0..=1.0).contains(&target_miss) {
        return Err(Error::Metric(format!("target miss rate {target_miss} outside [0, 1]")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("scores contain NaN".into()));
    }
    let mut pos: Vec<f64> = scores.iter().zip(positive).filter(|p| *p.1).map(|p| *p.0).collect();
    let neg: Vec<f64> = scores.iter().zip(positive).filter(|p| !*p.1).map(|p| *p.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Metric(format!(
            "need both classes, got {} positives and {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    pos.sort_by(f64::total_cmp);
    // small epsilon guards against 0.07 * 100 evaluating to 6.999...
    let k = ((target_miss * pos.len() as f64) + 1e-9).floor() as usize;
    let threshold = pos.get(k).copied().unwrap_or(f64::INFINITY);
    Ok(FaResult {
        threshold,
        false_accepts: neg.iter().filter(|&&s| s >= threshold).count(),
        misses: pos.iter().filter(|&&s| s < threshold).count(),
        positives: pos.len(),
        negatives: neg.len(),
    })
}

/// Ratio of false-accept counts against a baseline at the same miss rate.
/// Two zero counts compare as equal; a zero baseline otherwise gives `+inf`.
pub fn relative_fa(model: &FaResult, baseline: &FaResult) -> f64 {
    match (model.false_accepts, baseline.false_accepts) {
        (0, 0) => 1.0,
        (m, b) => m as f64 / b as f64,
    }
}
