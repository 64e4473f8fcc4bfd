use rand::Rng;
use rayon::prelude::*;

use super::{Sample, TrainConfig};
use crate::error::{Error, Result};
use crate::features::{sample_feature, FeatureDescriptor, FeatureStack};
use crate::volume::NUM_CLASSES;

/// Class counts at a node.
pub type Histogram = [u64; NUM_CLASSES];

/// Gains at or below this are treated as no improvement.
pub(crate) const MIN_GAIN: f64 = 1e-12;

/// Shannon entropy (bits) of a class histogram.
pub fn entropy(hist: &[u64]) -> Result<f64> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(Error::Parameter("entropy of an empty histogram is undefined".into()));
    }
    Ok(entropy_of(hist, total))
}

#[inline]
pub(crate) fn entropy_of(hist: &[u64], total: u64) -> f64 {
    let n = total as f64;
    let mut h = 0.0;
    for &c in hist {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.log2();
        }
    }
    h
}

pub(crate) fn histogram_of(samples: &[Sample], indices: &[u32]) -> Histogram {
    let mut h = [0u64; NUM_CLASSES];
    for &i in indices {
        h[samples[i as usize].label as usize] += 1;
    }
    h
}

/// The chosen split at a node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitChoice {
    pub feature: FeatureDescriptor,
    pub threshold: f64,
    pub gain: f64,
    /// Position of the winning feature in the node's candidate list.
    pub candidate: usize,
}

/// Interior, equally spaced thresholds between `min` and `max`.
pub fn candidate_thresholds(min: f64, max: f64, n: usize) -> Vec<f64> {
    let step = (max - min) / (n + 1) as f64;
    (1..=n).map(|k| min + k as f64 * step).collect()
}

/// Value of sample `s` under `f`.
#[inline]
pub(crate) fn feature_value(stacks: &[&FeatureStack], s: &Sample, f: &FeatureDescriptor) -> f64 {
    stacks[s.volume as usize].eval(s.voxel, f)
}

/// Best (threshold index, gain) for one feature, or `None` when the feature is
/// constant or no threshold leaves both children non-empty.
fn score_feature(
    samples: &[Sample],
    indices: &[u32],
    stacks: &[&FeatureStack],
    feature: &FeatureDescriptor,
    parent_entropy: f64,
    n_thresholds: usize,
    values: &mut Vec<f64>,
) -> Option<(f64, f64)> {
    values.clear();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &i in indices {
        let v = feature_value(stacks, &samples[i as usize], feature);
        lo = lo.min(v);
        hi = hi.max(v);
        values.push(v);
    }
    if !(hi > lo) {
        return None;
    }
    let thresholds = candidate_thresholds(lo, hi, n_thresholds);
    // bins[b] counts samples with exactly b thresholds strictly below them,
    // so "value <= thresholds[k]" selects bins 0..=k.
    let mut bins = vec![[0u64; NUM_CLASSES]; n_thresholds + 1];
    for (&i, &v) in indices.iter().zip(values.iter()) {
        let b = thresholds.partition_point(|&t| t < v);
        bins[b][samples[i as usize].label as usize] += 1;
    }
    let total = indices.len() as u64;
    let n = total as f64;
    let mut parent = [0u64; NUM_CLASSES];
    for bin in &bins {
        for c in 0..NUM_CLASSES {
            parent[c] += bin[c];
        }
    }
    let mut left = [0u64; NUM_CLASSES];
    let mut best: Option<(f64, f64)> = None;
    for (k, &t) in thresholds.iter().enumerate() {
        for c in 0..NUM_CLASSES {
            left[c] += bins[k][c];
        }
        let n_left: u64 = left.iter().sum();
        let n_right = total - n_left;
        if n_left == 0 || n_right == 0 {
            continue;
        }
        let right = [parent[0] - left[0], parent[1] - left[1], parent[2] - left[2]];
        let gain = parent_entropy
            - (n_left as f64 / n) * entropy_of(&left, n_left)
            - (n_right as f64 / n) * entropy_of(&right, n_right);
        if best.is_none_or(|(_, g)| gain > g) {
            best = Some((t, gain));
        }
    }
    best
}

/// Draws `config.n_candidate_features` features from `rng` and returns the
/// feature/threshold pair with the highest information gain over the node's
/// samples. Ties keep the earliest candidate and, within it, the lowest
/// threshold.
pub fn best_split<R: Rng + ?Sized>(
    samples: &[Sample],
    indices: &[u32],
    stacks: &[&FeatureStack],
    rng: &mut R,
    config: &TrainConfig,
) -> Option<SplitChoice> {
    let n_channels = stacks.first()?.n_channels();
    let candidates: Vec<FeatureDescriptor> = (0..config.n_candidate_features)
        .map(|_| sample_feature(rng, n_channels, &config.feature_ranges))
        .collect();
    if indices.is_empty() {
        return None;
    }
    let parent_entropy = entropy_of(&histogram_of(samples, indices), indices.len() as u64);
    let scored: Vec<Option<(f64, f64)>> = candidates
        .par_iter()
        .map_init(Vec::new, |values, f| {
            score_feature(samples, indices, stacks, f, parent_entropy, config.n_thresholds, values)
        })
        .collect();
    let mut best: Option<SplitChoice> = None;
    for (candidate, (feature, score)) in candidates.iter().zip(scored).enumerate() {
        if let Some((threshold, gain)) = score {
            if best.is_none_or(|b| gain > b.gain) {
                best = Some(SplitChoice {
                    feature: *feature,
                    threshold,
                    gain,
                    candidate,
                });
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_cases() {
        assert_eq!(entropy(&[10, 0, 0]).unwrap(), 0.0);
        assert!((entropy(&[5, 5, 5]).unwrap() - 3f64.log2()).abs() < 1e-12);
        assert!((entropy(&[5, 5, 5]).unwrap() - 1.58496).abs() < 1e-5);
        assert!(entropy(&[0, 0, 0]).is_err());
    }

    #[test]
    fn entropy_matches_natural_log_route() {
        // Second route: H = ln(N) - sum(n ln n) / N, converted to bits.
        let hist = [3u64, 1, 0];
        let n = 4.0f64;
        let nats = n.ln() - (3.0 * 3f64.ln() + 1.0 * 1f64.ln()) / n;
        assert!((entropy(&hist).unwrap() - nats / std::f64::consts::LN_2).abs() < 1e-12);
        assert!((entropy(&hist).unwrap() - 0.811_278_124_459_132_8).abs() < 1e-12);
    }

    #[test]
    fn thresholds_are_interior_and_even() {
        let t = candidate_thresholds(0.0, 11.0, 10);
        assert_eq!(t, (1..=10).map(|k| k as f64).collect::<Vec<_>>());
    }
}
