use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};
use crate::signal::Waveform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Max,
    Min,
}

/// Strict local extrema separated by at least `min_distance` seconds.
///
/// Candidates are accepted greedily by magnitude (largest value for
/// [`Polarity::Max`], smallest for [`Polarity::Min`]); equal magnitudes go to
/// the earlier index. The result is sorted by index.
pub fn detect_peaks(w: &Waveform, min_distance: f64, polarity: Polarity) -> Result<Vec<usize>> {
    detect_events(w, min_distance, polarity, None)
}

/// [`detect_peaks`] restricted to candidates whose height above the signal
/// median is at least `rel_height` of the largest candidate's.
pub fn detect_events(
    w: &Waveform,
    min_distance: f64,
    polarity: Polarity,
    rel_height: Option<f64>,
) -> Result<Vec<usize>> {
    if !(min_distance.is_finite() && min_distance > 0.0) {
        return domain(format!("min_distance must be > 0, got {min_distance}"));
    }
    let x = &w.samples;
    if x.len() < 3 {
        return shape(format!("peak detection needs >= 3 samples, got {}", x.len()));
    }
    let sign = match polarity {
        Polarity::Max => 1.0,
        Polarity::Min => -1.0,
    };
    let v = |i: usize| sign * x[i];
    let mut candidates: Vec<usize> = (1..x.len() - 1)
        .filter(|&i| v(i) > v(i - 1) && v(i) > v(i + 1))
        .collect();
    if candidates.is_empty() {
        return Ok(candidates);
    }
    if let Some(rel) = rel_height {
        let mut sorted: Vec<f64> = (0..x.len()).map(v).collect();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let top = candidates.iter().map(|&i| v(i)).fold(f64::MIN, f64::max);
        let threshold = median + rel * (top - median);
        candidates.retain(|&i| v(i) >= threshold);
    }
    // stable sort keeps earlier indices first among equal magnitudes
    candidates.sort_by(|&a, &b| v(b).total_cmp(&v(a)));
    let min_sep = min_distance * w.fs;
    let mut accepted: Vec<usize> = Vec::new();
    for c in candidates {
        if accepted
            .iter()
            .all(|&a| (a.abs_diff(c) as f64) >= min_sep)
        {
            accepted.push(c);
        }
    }
    accepted.sort_unstable();
    Ok(accepted)
}
