//! Error metrics between a predicted and a reference DSM.
//!
//! Errors are signed `pred - ref`. Sums use pairwise summation in a fixed
//! order, so results do not depend on how the caller partitions work.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{dilate_mask, Mask, Raster2D};

/// Building masks are grown by this many cells before the per-class split,
/// so that facade pixels count as building.
pub const BUILDING_DILATION: usize = 2;

/// Default height-above-terrain band edges, meters.
pub const DEFAULT_BANDS: [f64; 6] = [0.0, 10.0, 20.0, 40.0, 100.0, f64::INFINITY];

const PAIRWISE_BLOCK: usize = 32;

/// Sum in a fixed binary-tree order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_BLOCK {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

fn median_in_place(xs: &mut [f64]) -> f64 {
    xs.sort_unstable_by(f64::total_cmp);
    crate::fusion::median_sorted(xs)
}

fn nonempty(errors: &[f64]) -> Result<()> {
    if errors.is_empty() {
        Err(Error::Metric("no valid pixel to evaluate".into()))
    } else {
        Ok(())
    }
}

pub fn mae_of(errors: &[f64]) -> Result<f64> {
    nonempty(errors)?;
    let abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    Ok(pairwise_sum(&abs) / errors.len() as f64)
}

pub fn rmse_of(errors: &[f64]) -> Result<f64> {
    nonempty(errors)?;
    let sq: Vec<f64> = errors.iter().map(|e| e * e).collect();
    Ok((pairwise_sum(&sq) / errors.len() as f64).sqrt())
}

/// Median absolute error; even counts average the central pair.
pub fn medae_of(errors: &[f64]) -> Result<f64> {
    nonempty(errors)?;
    let mut abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    Ok(median_in_place(&mut abs))
}

/// Median signed error; positive means the prediction is too high.
pub fn bias_of(errors: &[f64]) -> Result<f64> {
    nonempty(errors)?;
    let mut v = errors.to_vec();
    Ok(median_in_place(&mut v))
}

/// Signed errors over cells valid in both rasters and selected by `mask`
/// (all cells when `None`), in row-major order.
pub fn errors(pred: &Raster2D, reference: &Raster2D, mask: Option<&Mask>) -> Result<Vec<f64>> {
    pred.header().ensure_same(reference.header(), "prediction vs reference")?;
    if let Some(m) = mask {
        pred.header().ensure_same(m.header(), "prediction vs mask")?;
    }
    let mut out = Vec::new();
    for (k, (&p, &r)) in pred.values().iter().zip(reference.values()).enumerate() {
        if p == pred.nodata() || r == reference.nodata() {
            continue;
        }
        if mask.map_or(true, |m| m.values()[k]) {
            out.push(p - r);
        }
    }
    Ok(out)
}

pub fn mae(pred: &Raster2D, reference: &Raster2D, mask: Option<&Mask>) -> Result<f64> {
    mae_of(&errors(pred, reference, mask)?)
}

pub fn rmse(pred: &Raster2D, reference: &Raster2D, mask: Option<&Mask>) -> Result<f64> {
    rmse_of(&errors(pred, reference, mask)?)
}

pub fn medae(pred: &Raster2D, reference: &Raster2D, mask: Option<&Mask>) -> Result<f64> {
    medae_of(&errors(pred, reference, mask)?)
}

pub fn bias(pred: &Raster2D, reference: &Raster2D, mask: Option<&Mask>) -> Result<f64> {
    bias_of(&errors(pred, reference, mask)?)
}

/// The four metrics over one pixel population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub medae: f64,
    pub bias: f64,
    pub n_pixels: usize,
}

impl Metrics {
    pub fn from_errors(errors: &[f64]) -> Result<Metrics> {
        Ok(Metrics {
            mae: mae_of(errors)?,
            rmse: rmse_of(errors)?,
            medae: medae_of(errors)?,
            bias: bias_of(errors)?,
            n_pixels: errors.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub overall: Metrics,
    /// `None` when the class has no pixel.
    pub buildings: Option<Metrics>,
    pub terrain: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub low: f64,
    /// `None` for an open upper end.
    pub high: Option<f64>,
    /// Median signed error.
    pub median_error: Option<f64>,
    pub mae: Option<f64>,
    /// Fraction of the banded pixels that fall into this band.
    pub share: f64,
    pub n_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub medae: f64,
    pub bias: f64,
    pub n_pixels: usize,
    pub per_class: ClassMetrics,
    #[serde(default)]
    pub height_bands: Vec<BandRow>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Overall and per-class metrics. Excluded cells are dropped everywhere;
/// the building class is the building mask dilated by two cells and
/// terrain is everything else.
pub fn evaluate(
    pred: &Raster2D,
    reference: &Raster2D,
    building_mask: Option<&Mask>,
    exclusion_mask: Option<&Mask>,
) -> Result<MetricsReport> {
    let h = pred.header();
    h.ensure_same(reference.header(), "prediction vs reference")?;
    let included = match exclusion_mask {
        Some(m) => {
            h.ensure_same(m.header(), "prediction vs exclusion mask")?;
            m.not()
        }
        None => Mask::full(*h)?,
    };
    let overall = Metrics::from_errors(&errors(pred, reference, Some(&included))?)?;
    let dilated = match building_mask {
        Some(b) => {
            h.ensure_same(b.header(), "prediction vs building mask")?;
            dilate_mask(b, BUILDING_DILATION)
        }
        None => Mask::empty(*h)?,
    };
    let class = |m: &Mask| -> Result<Option<Metrics>> {
        let e = errors(pred, reference, Some(&m.and(&included)?))?;
        if e.is_empty() {
            Ok(None)
        } else {
            Metrics::from_errors(&e).map(Some)
        }
    };
    let per_class = ClassMetrics { overall, buildings: class(&dilated)?, terrain: class(&dilated.not())? };
    Ok(MetricsReport {
        mae: overall.mae,
        rmse: overall.rmse,
        medae: overall.medae,
        bias: overall.bias,
        n_pixels: overall.n_pixels,
        per_class,
        height_bands: Vec::new(),
    })
}

/// Groups building pixels by reference height above terrain and reports
/// signed median error, MAE and pixel share per band. `edges` are
/// increasing; heights below the first edge join the first band.
pub fn height_band_stats(
    pred: &Raster2D,
    reference: &Raster2D,
    terrain_ref: &Raster2D,
    building_mask: &Mask,
    edges: &[f64],
) -> Result<Vec<BandRow>> {
    let h = pred.header();
    h.ensure_same(reference.header(), "prediction vs reference")?;
    h.ensure_same(terrain_ref.header(), "prediction vs terrain")?;
    h.ensure_same(building_mask.header(), "prediction vs building mask")?;
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("band edges must be at least two increasing values".into()));
    }
    let nb = edges.len() - 1;
    let mut per_band: Vec<Vec<f64>> = vec![Vec::new(); nb];
    for k in 0..h.len() {
        if !building_mask.values()[k] {
            continue;
        }
        let (p, r, t) = (pred.values()[k], reference.values()[k], terrain_ref.values()[k]);
        if p == pred.nodata() || r == reference.nodata() || t == terrain_ref.nodata() {
            continue;
        }
        let above = r - t;
        let band = (1..nb).rev().find(|&b| above >= edges[b]).unwrap_or(0);
        if above < edges[nb] || edges[nb].is_infinite() {
            per_band[band].push(p - r);
        }
    }
    let total: usize = per_band.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Metric("no building pixel inside the height bands".into()));
    }
    Ok(per_band
        .into_iter()
        .enumerate()
        .map(|(b, e)| BandRow {
            low: edges[b],
            high: edges[b + 1].is_finite().then_some(edges[b + 1]),
            median_error: bias_of(&e).ok(),
            mae: mae_of(&e).ok(),
            share: e.len() as f64 / total as f64,
            n_pixels: e.len(),
        })
        .collect())
}

/// Aligned text table with MAE, RMSE and MedAE for overall, building and
/// terrain pixels, one row per named report.
pub fn format_table(rows: &[(&str, &MetricsReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_w$} | {:^26} | {:^26} | {:^26}",
        "", "overall", "buildings", "terrain"
    );
    let _ = writeln!(
        out,
        "{:<name_w$} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8}",
        "method", "MAE", "RMSE", "MedAE", "MAE", "RMSE", "MedAE", "MAE", "RMSE", "MedAE"
    );
    let cell = |m: Option<Metrics>| match m {
        Some(m) => format!("{:>8.2} {:>8.2} {:>8.2}", m.mae, m.rmse, m.medae),
        None => format!("{:>8} {:>8} {:>8}", "-", "-", "-"),
    };
    for (name, r) in rows {
        let c = &r.per_class;
        let _ = writeln!(
            out,
            "{:<name_w$} | {} | {} | {}",
            name,
            cell(Some(c.overall)),
            cell(c.buildings),
            cell(c.terrain)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{GridHeader, DEFAULT_NODATA};
    use proptest::prelude::*;

    fn row(vals: &[f64]) -> Raster2D {
        Raster2D::new(GridHeader::new(1, vals.len(), 0.0, 0.0, 1.0).unwrap(), DEFAULT_NODATA, vals.to_vec()).unwrap()
    }

    #[test]
    fn metric_examples() {
        assert_eq!(mae_of(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(mae_of(&[-1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(rmse_of(&[3.0, -1.0]).unwrap(), 5f64.sqrt());
        assert_eq!(medae_of(&[1.0, -3.0]).unwrap(), 2.0);
        assert_eq!(medae_of(&[-4.5]).unwrap(), 4.5);
        assert_eq!(bias_of(&[-1.0, 2.0, 5.0]).unwrap(), 2.0);
        assert_eq!(bias_of(&[-1.5, 1.5]).unwrap(), 0.0);
        assert!(matches!(mae_of(&[]), Err(Error::Metric(_))));
    }

    #[test]
    fn raster_metrics_skip_nodata() {
        let p = row(&[3.0, DEFAULT_NODATA, 4.0]);
        let r = row(&[1.0, 1.0, 2.0]);
        assert_eq!(mae(&p, &r, None).unwrap(), 2.0);
        assert_eq!(bias(&p, &r, None).unwrap(), 2.0);
    }

    #[test]
    fn empty_buildings_make_terrain_equal_overall() {
        let p = row(&[1.0, 2.0, 5.0, 0.0]);
        let r = row(&[0.0, 0.0, 0.0, 0.0]);
        let rep = evaluate(&p, &r, None, None).unwrap();
        assert_eq!(rep.per_class.buildings, None);
        assert_eq!(rep.per_class.terrain, Some(rep.per_class.overall));
        let all = Mask::full(*p.header()).unwrap();
        assert!(matches!(evaluate(&p, &r, None, Some(&all)), Err(Error::Metric(_))));
        let none = Mask::empty(*p.header()).unwrap();
        assert_eq!(evaluate(&p, &r, None, Some(&none)).unwrap(), rep);
    }

    #[test]
    fn building_class_is_dilated_by_two() {
        let p = row(&[1.0; 9]);
        let r = row(&[0.0; 9]);
        let b = Mask::from_fn(*p.header(), |_, c| c == 4).unwrap();
        let rep = evaluate(&p, &r, Some(&b), None).unwrap();
        assert_eq!(rep.per_class.buildings.unwrap().n_pixels, 5);
        assert_eq!(rep.per_class.terrain.unwrap().n_pixels, 4);
    }

    #[test]
    fn bands_split_building_pixels() {
        let r = row(&[5.0, 15.0, 15.0, 150.0, 0.0]);
        let p = row(&[5.0, 14.0, 12.0, 100.0, 0.0]);
        let t = row(&[0.0; 5]);
        let b = Mask::from_fn(*p.header(), |_, c| c < 4).unwrap();
        let rows = height_band_stats(&p, &r, &t, &b, &DEFAULT_BANDS).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].share, 0.25);
        assert_eq!(rows[1].share, 0.5);
        assert_eq!(rows[1].median_error, Some(-2.0));
        assert_eq!(rows[2].median_error, None);
        assert_eq!(rows[2].share, 0.0);
        assert_eq!(rows[4].median_error, Some(-50.0));
        assert_eq!(rows[4].high, None);
        let one = Mask::from_fn(*p.header(), |_, c| c == 3).unwrap();
        let rows = height_band_stats(&p, &r, &t, &one, &DEFAULT_BANDS).unwrap();
        assert_eq!(rows[4].share, 1.0);
    }

    #[test]
    fn table_has_nine_metric_columns() {
        let p = row(&[1.0, 2.0]);
        let r = row(&[0.0, 0.0]);
        let rep = evaluate(&p, &r, None, None).unwrap();
        let t = format_table(&[("initial", &rep)]);
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().nth(2).unwrap().contains(" 1.50 "));
        assert!(t.contains("  -"));
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(errs in prop::collection::vec(-100.0f64..100.0, 1..200)) {
            prop_assert!(rmse_of(&errs).unwrap() >= mae_of(&errs).unwrap() * (1.0 - 1e-12));
        }

        #[test]
        fn metrics_ignore_pixel_order(mut errs in prop::collection::vec(-10.0f64..10.0, 1..100), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let m = Metrics::from_errors(&errs).unwrap();
            errs.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let s = Metrics::from_errors(&errs).unwrap();
            prop_assert_eq!(m.medae, s.medae);
            prop_assert_eq!(m.bias, s.bias);
            prop_assert!((m.mae - s.mae).abs() <= 1e-12 * m.mae.max(1.0));
            prop_assert!((m.rmse - s.rmse).abs() <= 1e-12 * m.rmse.max(1.0));
        }

        #[test]
        fn common_offset_changes_nothing(vals in prop::collection::vec(-50.0f64..50.0, 2..60), c in -1000i32..1000) {
            let n = vals.len() / 2;
            let p = row(&vals[..n]);
            let r = row(&vals[n..2 * n]);
            let shift = c as f64;
            let (ps, rs) = (p.map_valid(|v| v + shift), r.map_valid(|v| v + shift));
            let a = Metrics::from_errors(&errors(&p, &r, None).unwrap()).unwrap();
            let b = Metrics::from_errors(&errors(&ps, &rs, None).unwrap()).unwrap();
            prop_assert!((a.mae - b.mae).abs() < 1e-9);
            prop_assert!((a.rmse - b.rmse).abs() < 1e-9);
            prop_assert!((a.medae - b.medae).abs() < 1e-9);
            prop_assert!((a.bias - b.bias).abs() < 1e-9);
        }
    }
}
