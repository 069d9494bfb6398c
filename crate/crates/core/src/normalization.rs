//! Local standardization of DSM patches and global whitening of images.
//!
//! Every DSM patch is centered on its own mean height, but all patches share
//! one robust scale fitted on the training data, so relative height
//! differences keep a common meaning across flat and hilly regions. Images
//! are whitened with a single mean and standard deviation pooled over all
//! training images.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster2D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// Robust average of per-patch height standard deviations, meters.
    pub dsm_scale: f64,
    pub image_mean: f64,
    pub image_std: f64,
    /// Percentile below which patch standard deviations are discarded.
    pub trim_low: f64,
    /// Percentile above which patch standard deviations are discarded.
    pub trim_high: f64,
}

impl NormStats {
    pub fn new(dsm_scale: f64, image: ImageStats) -> Result<Self> {
        let stats = NormStats {
            dsm_scale,
            image_mean: image.mean,
            image_std: image.std,
            trim_low: DEFAULT_TRIM.0,
            trim_high: DEFAULT_TRIM.1,
        };
        stats.validate()?;
        Ok(stats)
    }

    /// Statistics for DSM-only models, where image whitening is unused.
    pub fn dsm_only(dsm_scale: f64) -> Result<Self> {
        NormStats::new(dsm_scale, ImageStats { mean: 0.0, std: 1.0 })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dsm_scale > 0.0 && self.dsm_scale.is_finite())
            || !(self.image_std > 0.0 && self.image_std.is_finite())
            || !self.image_mean.is_finite()
        {
            return Err(Error::InvalidInput(format!("invalid normalization statistics {self:?}")));
        }
        Ok(())
    }

    pub fn image_stats(&self) -> ImageStats {
        ImageStats {
            mean: self.image_mean,
            std: self.image_std,
        }
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<NormStats> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stats: NormStats = serde_json::from_str(&text)?;
        stats.validate()?;
        Ok(stats)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub const DEFAULT_TRIM: (f64, f64) = (5.0, 95.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageStats {
    pub mean: f64,
    pub std: f64,
}

fn valid_values(r: &Raster2D) -> impl Iterator<Item = f64> + '_ {
    r.values().iter().copied().filter(move |&v| v != r.nodata())
}

/// Population standard deviation of the valid heights of a patch.
pub fn patch_std(patch: &Raster2D) -> Result<f64> {
    let n = patch.valid_count();
    if n == 0 {
        return Err(Error::InvalidInput("DSM patch has no valid cell".into()));
    }
    let mean = valid_values(patch).sum::<f64>() / n as f64;
    let var = valid_values(patch).map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Ok(var.sqrt())
}

/// Percentile of sorted data with linear interpolation between closest
/// ranks (position `p/100 * (n - 1)`).
pub fn percentile_linear(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Mean of `values` after discarding entries strictly outside the
/// `[low, high]` percentile band.
pub fn trimmed_mean(values: &[f64], low: f64, high: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("nothing to average".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let lo = percentile_linear(&sorted, low);
    let hi = percentile_linear(&sorted, high);
    let kept: Vec<f64> = sorted.into_iter().filter(|&v| v >= lo && v <= hi).collect();
    // With very few values both interpolated bounds can fall into the same
    // gap between neighbors; the median is used then.
    if kept.is_empty() {
        let mut sorted = values.to_vec();
        sorted.sort_unstable_by(f64::total_cmp);
        return Ok(crate::fusion::median_sorted(&sorted));
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Robust global DSM scale: trimmed mean of the per-patch height standard
/// deviations.
pub fn fit_dsm_scale(patches: &[Raster2D]) -> Result<f64> {
    fit_dsm_scale_with(patches, DEFAULT_TRIM.0, DEFAULT_TRIM.1)
}

pub fn fit_dsm_scale_with(patches: &[Raster2D], trim_low: f64, trim_high: f64) -> Result<f64> {
    if patches.is_empty() {
        return Err(Error::InvalidInput("no DSM patches to fit a scale on".into()));
    }
    let stds = patches.iter().map(patch_std).collect::<Result<Vec<_>>>()?;
    trimmed_mean(&stds, trim_low, trim_high)
}

/// Centers `patch` on its mean valid height and divides by the global
/// scale. Returns the normalized patch and the removed mean.
pub fn normalize_dsm_patch(patch: &Raster2D, stats: &NormStats) -> Result<(Raster2D, f64)> {
    let n = patch.valid_count();
    if n == 0 {
        return Err(Error::InvalidInput("DSM patch has no valid cell".into()));
    }
    let mean = valid_values(patch).sum::<f64>() / n as f64;
    Ok((normalize_with_mean(patch, mean, stats.dsm_scale), mean))
}

/// Normalizes with an externally supplied center, e.g. the ground truth of
/// a training sample centered on the initial DSM's mean.
pub fn normalize_with_mean(patch: &Raster2D, mean: f64, scale: f64) -> Raster2D {
    patch.map_valid(|v| (v - mean) / scale)
}

/// Inverse of [`normalize_dsm_patch`].
pub fn denormalize_heights(normalized: &Raster2D, patch_mean: f64, stats: &NormStats) -> Raster2D {
    normalized.map_valid(|v| v * stats.dsm_scale + patch_mean)
}

/// Mean and population standard deviation over the valid pixels of all
/// images.
pub fn fit_image_stats(images: &[Raster2D]) -> Result<ImageStats> {
    let n: usize = images.iter().map(Raster2D::valid_count).sum();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least two valid pixels to fit image statistics, got {n}"
        )));
    }
    let mean = images.iter().flat_map(valid_values).sum::<f64>() / n as f64;
    let var = images
        .iter()
        .flat_map(valid_values)
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(Error::Degenerate("image radiance has zero variance".into()));
    }
    Ok(ImageStats { mean, std })
}

pub fn normalize_image(image: &Raster2D, stats: &ImageStats) -> Raster2D {
    image.map_valid(|v| (v - stats.mean) / stats.std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{GridHeader, DEFAULT_NODATA};
    use proptest::prelude::*;

    fn patch(values: Vec<f64>) -> Raster2D {
        let h = GridHeader::new(1, values.len(), 0.0, 0.0, 1.0).unwrap();
        Raster2D::new(h, DEFAULT_NODATA, values).unwrap()
    }

    /// A two-cell patch whose population std is exactly `s`.
    fn patch_with_std(s: f64) -> Raster2D {
        patch(vec![100.0 - s, 100.0 + s])
    }

    fn stats(scale: f64) -> NormStats {
        NormStats::dsm_only(scale).unwrap()
    }

    #[test]
    fn equal_stds_are_untouched_by_trimming() {
        let patches: Vec<Raster2D> = (0..20).map(|_| patch_with_std(4.0)).collect();
        assert_eq!(fit_dsm_scale(&patches).unwrap(), 4.0);
    }

    #[test]
    fn ladder_keeps_ranks_six_to_ninety_five() {
        let patches: Vec<Raster2D> = (1..=100).map(|s| patch_with_std(s as f64)).collect();
        let expected = (6..=95).map(f64::from).sum::<f64>() / 90.0;
        assert_eq!(expected, 50.5);
        assert!((fit_dsm_scale(&patches).unwrap() - 50.5).abs() < 1e-12);
    }

    #[test]
    fn single_patch_is_its_own_scale() {
        let p = patch(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(fit_dsm_scale(&[p.clone()]).unwrap(), patch_std(&p).unwrap());
    }

    #[test]
    fn two_patches_never_lose_all_survivors() {
        let scale = fit_dsm_scale(&[patch_with_std(1.0), patch_with_std(10.0)]).unwrap();
        assert_eq!(scale, 5.5);
    }

    #[test]
    fn empty_patch_is_rejected() {
        let p = patch(vec![DEFAULT_NODATA, DEFAULT_NODATA]);
        assert!(matches!(fit_dsm_scale(&[p]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn trimming_resists_corrupted_stds() {
        let ladder: Vec<f64> = (1..=100).map(f64::from).collect();
        let clean = trimmed_mean(&ladder, 5.0, 95.0).unwrap();
        let clean_plain = ladder.iter().sum::<f64>() / 100.0;
        let mut corrupted = ladder.clone();
        for i in [9, 33, 61, 87] {
            corrupted[i] = 1e6;
        }
        let robust = trimmed_mean(&corrupted, 5.0, 95.0).unwrap();
        let plain = corrupted.iter().sum::<f64>() / 100.0;
        assert!((robust - clean).abs() < (plain - clean_plain).abs());
        assert!((robust - clean).abs() < 2.5);
    }

    #[test]
    fn patch_normalization_examples() {
        let (flat, mean) = normalize_dsm_patch(&patch(vec![312.5; 4]), &stats(3.0)).unwrap();
        assert_eq!(mean, 312.5);
        assert!(flat.values().iter().all(|&v| v == 0.0));
        let (n, mean) = normalize_dsm_patch(&patch(vec![0.0, 10.0]), &stats(5.0)).unwrap();
        assert_eq!(n.values(), &[-1.0, 1.0]);
        assert_eq!(mean, 5.0);
        let back = denormalize_heights(&n, mean, &stats(5.0));
        assert_eq!(back.values(), &[0.0, 10.0]);
        let zeros = denormalize_heights(&patch(vec![0.0, 0.0]), 7.5, &stats(2.0));
        assert_eq!(zeros.values(), &[7.5, 7.5]);
    }

    #[test]
    fn nodata_is_excluded_from_the_mean() {
        let (n, mean) = normalize_dsm_patch(&patch(vec![2.0, DEFAULT_NODATA, 4.0]), &stats(1.0)).unwrap();
        assert_eq!(mean, 3.0);
        assert_eq!(n.values(), &[-1.0, DEFAULT_NODATA, 1.0]);
    }

    #[test]
    fn image_stats_examples() {
        let s = fit_image_stats(&[patch(vec![0.0, 2.0])]).unwrap();
        assert_eq!((s.mean, s.std), (1.0, 1.0));
        assert_eq!(normalize_image(&patch(vec![0.0, 2.0]), &s).values(), &[-1.0, 1.0]);
        let white = fit_image_stats(&[patch(vec![-1.0, 1.0, -1.0, 1.0])]).unwrap();
        assert_eq!((white.mean, white.std), (0.0, 1.0));
        assert!(matches!(
            fit_image_stats(&[patch(vec![3.0, 3.0, 3.0])]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn stats_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("norm.json");
        let s = NormStats::new(3.25, ImageStats { mean: 0.4, std: 0.12 }).unwrap();
        s.write_json(&path).unwrap();
        assert_eq!(NormStats::read_json(&path).unwrap(), s);
    }

    proptest! {
        #[test]
        fn round_trip_within_a_nanometer(vals in proptest::collection::vec(-500.0f64..3000.0, 1..64),
                                         scale in 0.1f64..50.0) {
            let p = patch(vals);
            let (n, mean) = normalize_dsm_patch(&p, &stats(scale)).unwrap();
            let back = denormalize_heights(&n, mean, &stats(scale));
            for (a, b) in back.values().iter().zip(p.values()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn scale_ignores_order_and_offsets(stds in proptest::collection::vec(0.5f64..30.0, 1..40),
                                           offsets in proptest::collection::vec(-1000i32..1000, 40),
                                           rot in 0usize..40) {
            let patches: Vec<Raster2D> = stds.iter().map(|&s| patch_with_std(s)).collect();
            let base = fit_dsm_scale(&patches).unwrap();
            let mut moved: Vec<Raster2D> = patches
                .iter()
                .zip(&offsets)
                .map(|(p, &o)| p.map_valid(|v| v + f64::from(o)))
                .collect();
            let k = rot % moved.len();
            moved.rotate_left(k);
            let shifted = fit_dsm_scale(&moved).unwrap();
            prop_assert!((shifted - base).abs() <= 1e-9 * base.max(1.0));
        }
    }
}
