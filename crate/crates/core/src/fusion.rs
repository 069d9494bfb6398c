//! Point-cloud fusion into a raster DSM: cell-wise median of the `n`
//! highest points, spike removal and inverse-distance-weighted hole filling.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{GridHeader, Raster2D, DEFAULT_NODATA};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput(format!("point {i} has a non-finite coordinate")));
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Smallest grid of `cell_size` cells covering every point.
    pub fn bounding_grid(&self, cell_size: f64) -> Result<GridHeader> {
        if self.points.is_empty() {
            return Err(Error::InvalidInput("empty point cloud has no extent".into()));
        }
        let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &self.points {
            xmin = xmin.min(p[0]);
            xmax = xmax.max(p[0]);
            ymin = ymin.min(p[1]);
            ymax = ymax.max(p[1]);
        }
        let xll = (xmin / cell_size).floor() * cell_size;
        let yll = (ymin / cell_size).floor() * cell_size;
        let cols = ((xmax - xll) / cell_size).floor() as usize + 1;
        let rows = ((ymax - yll) / cell_size).floor() as usize + 1;
        GridHeader::new(rows, cols, xll, yll, cell_size)
    }
}

/// How many of the highest points per cell enter the median.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NPolicy {
    /// Average point count over occupied cells, rounded, at least 1.
    Density,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub n_policy: NPolicy,
    pub spike_threshold: f64,
    pub idw_power: f64,
    pub idw_max_neighbors: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            n_policy: NPolicy::Density,
            spike_threshold: 20.0,
            idw_power: 2.0,
            idw_max_neighbors: 12,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.spike_threshold > 0.0) || !(self.idw_power > 0.0) || self.idw_max_neighbors == 0 {
            return Err(Error::Config(format!("invalid fusion parameters {self:?}")));
        }
        if self.n_policy == NPolicy::Fixed(0) {
            return Err(Error::Config("fixed n must be at least 1".into()));
        }
        Ok(())
    }
}

/// Cell containing planar point `(x, y)`, if inside the grid.
pub(crate) fn cell_of(extent: &GridHeader, x: f64, y: f64) -> Option<(usize, usize)> {
    let fc = ((x - extent.xll) / extent.cell_size).floor();
    let fr = ((y - extent.yll) / extent.cell_size).floor();
    if fc < 0.0 || fr < 0.0 || fc >= extent.cols as f64 || fr >= extent.rows as f64 {
        return None;
    }
    Some((extent.rows - 1 - fr as usize, fc as usize))
}

pub(crate) fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Rasterizes `cloud` onto `extent`: each occupied cell gets the median of
/// its `min(n, count)` highest z values, empty cells get nodata.
pub fn rasterize_median_highest(
    cloud: &PointCloud,
    extent: &GridHeader,
    params: &FusionParams,
) -> Result<Raster2D> {
    extent.validate()?;
    params.validate()?;
    let mut bins: Vec<Vec<f64>> = vec![Vec::new(); extent.len()];
    for p in &cloud.points {
        if let Some((r, c)) = cell_of(extent, p[0], p[1]) {
            bins[extent.index(r, c)].push(p[2]);
        }
    }
    let occupied = bins.iter().filter(|b| !b.is_empty()).count();
    let n = match params.n_policy {
        NPolicy::Fixed(n) => n,
        NPolicy::Density if occupied == 0 => 1,
        NPolicy::Density => {
            let total: usize = bins.iter().map(Vec::len).sum();
            ((total as f64 / occupied as f64).round() as usize).max(1)
        }
    };
    let values: Vec<f64> = bins
        .into_par_iter()
        .map(|mut zs| {
            if zs.is_empty() {
                return DEFAULT_NODATA;
            }
            zs.sort_unstable_by(|a, b| b.total_cmp(a));
            let k = n.min(zs.len());
            let mut top = zs[..k].to_vec();
            top.reverse();
            median_sorted(&top)
        })
        .collect();
    Raster2D::new(*extent, DEFAULT_NODATA, values)
}

/// Sets to nodata every cell that deviates by more than `threshold` from
/// the median of its valid 8-neighbors. Cells without valid neighbors are
/// kept. Neighborhoods are read from the input, not the partially
/// despiked output.
pub fn remove_spikes(dsm: &Raster2D, threshold: f64) -> Raster2D {
    let (rows, cols) = (dsm.rows(), dsm.cols());
    let values: Vec<f64> = (0..rows)
        .into_par_iter()
        .flat_map_iter(|r| {
            let mut neigh = Vec::with_capacity(8);
            (0..cols)
                .map(|c| {
                    let Some(h) = dsm.valid(r, c) else {
                        return dsm.nodata();
                    };
                    neigh.clear();
                    for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            if dr == 0 && dc == 0 {
                                continue;
                            }
                            let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                            if rr < 0 || cc < 0 || rr >= rows as i64 || cc >= cols as i64 {
                                continue;
                            }
                            if let Some(v) = dsm.valid(rr as usize, cc as usize) {
                                neigh.push(v);
                            }
                        }
                    }
                    if neigh.is_empty() {
                        return h;
                    }
                    neigh.sort_unstable_by(f64::total_cmp);
                    if (h - median_sorted(&neigh)).abs() > threshold {
                        dsm.nodata()
                    } else {
                        h
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Raster2D::new(*dsm.header(), dsm.nodata(), values).expect("despiked raster keeps its header")
}

/// Fills every nodata cell with the inverse-distance-weighted mean of its
/// `max_neighbors` nearest valid cells (center-to-center distance, ties
/// broken by row then column). Valid cells are copied unchanged.
pub fn idw_fill(dsm: &Raster2D, power: f64, max_neighbors: usize) -> Result<Raster2D> {
    if !(power > 0.0) || max_neighbors == 0 {
        return Err(Error::Config(format!(
            "IDW needs power > 0 and at least one neighbor (got {power}, {max_neighbors})"
        )));
    }
    if dsm.valid_count() == 0 {
        return Err(Error::Fill("raster has no valid cell to interpolate from".into()));
    }
    if !dsm.has_nodata() {
        return Ok(dsm.clone());
    }
    let (rows, cols) = (dsm.rows(), dsm.cols());
    let cell = dsm.cell_size();
    let values: Vec<f64> = (0..rows)
        .into_par_iter()
        .flat_map_iter(|r| {
            (0..cols)
                .map(|c| match dsm.valid(r, c) {
                    Some(v) => v,
                    None => {
                        let neighbors = nearest_valid(dsm, r, c, max_neighbors);
                        idw_weighted_mean(&neighbors, cell, power)
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Raster2D::new(*dsm.header(), dsm.nodata(), values)
}

/// `(squared distance in cells, row, col, height)`
pub(crate) type Neighbor = (u64, usize, usize, f64);

pub(crate) fn idw_weighted_mean(neighbors: &[Neighbor], cell: f64, power: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for &(d2, _, _, h) in neighbors {
        let w = ((d2 as f64).sqrt() * cell).powf(-power);
        num += w * h;
        den += w;
    }
    num / den
}

/// Nearest valid cells of `(r, c)` in `(d2, row, col)` order, found by
/// scanning square rings of growing radius.
fn nearest_valid(dsm: &Raster2D, r: usize, c: usize, k: usize) -> Vec<Neighbor> {
    let (rows, cols) = (dsm.rows() as i64, dsm.cols() as i64);
    let (r0, c0) = (r as i64, c as i64);
    let max_ring = rows.max(cols);
    let mut found: Vec<Neighbor> = Vec::new();
    for ring in 1..=max_ring {
        let mut visit = |rr: i64, cc: i64| {
            if rr < 0 || cc < 0 || rr >= rows || cc >= cols {
                return;
            }
            if let Some(h) = dsm.valid(rr as usize, cc as usize) {
                let d2 = ((rr - r0).pow(2) + (cc - c0).pow(2)) as u64;
                found.push((d2, rr as usize, cc as usize, h));
            }
        };
        for cc in c0 - ring..=c0 + ring {
            visit(r0 - ring, cc);
            visit(r0 + ring, cc);
        }
        for rr in r0 - ring + 1..=r0 + ring - 1 {
            visit(rr, c0 - ring);
            visit(rr, c0 + ring);
        }
        if found.len() >= k {
            found.sort_unstable_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
            // Cells beyond this ring are at least ring + 1 away.
            let next = ((ring + 1) * (ring + 1)) as u64;
            if found[k - 1].0 < next {
                found.truncate(k);
                return found;
            }
        }
    }
    found.sort_unstable_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
    found.truncate(k);
    found
}

/// Full fusion chain: rasterize, despike, then fill holes.
pub fn fuse_point_cloud(
    cloud: &PointCloud,
    extent: &GridHeader,
    params: &FusionParams,
) -> Result<Raster2D> {
    let raw = rasterize_median_highest(cloud, extent, params)?;
    let despiked = remove_spikes(&raw, params.spike_threshold);
    idw_fill(&despiked, params.idw_power, params.idw_max_neighbors)
}

/// Parses `x y z` lines; blank lines and `#` comments are skipped.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<&str> = line
            .split(|ch: char| ch.is_whitespace() || ch == ',')
            .filter(|s| !s.is_empty())
            .collect();
        if vals.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected `x y z`, found {} fields", vals.len()),
            });
        }
        let mut p = [0.0; 3];
        for (slot, tok) in p.iter_mut().zip(&vals) {
            *slot = tok.parse().map_err(|e| Error::Parse {
                line: i + 1,
                msg: format!("bad coordinate `{tok}`: {e}"),
            })?;
        }
        points.push(p);
    }
    PointCloud::new(points)
}

pub fn read_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: usize, cols: usize) -> GridHeader {
        GridHeader::new(rows, cols, 0.0, 0.0, 1.0).unwrap()
    }

    fn fixed(n: usize) -> FusionParams {
        FusionParams {
            n_policy: NPolicy::Fixed(n),
            ..FusionParams::default()
        }
    }

    #[test]
    fn one_point_per_cell() {
        let g = grid(2, 2);
        let cloud = PointCloud::new(vec![
            [0.5, 0.5, 1.0],
            [1.5, 0.5, 2.0],
            [0.5, 1.5, 3.0],
            [1.5, 1.5, 4.0],
        ])
        .unwrap();
        let r = rasterize_median_highest(&cloud, &g, &FusionParams::default()).unwrap();
        // row 0 is north
        assert_eq!(r.values(), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn median_of_highest_examples() {
        let g = grid(1, 1);
        let cloud = PointCloud::new(
            [10.0, 11.0, 12.0, 50.0].iter().map(|&z| [0.5, 0.5, z]).collect(),
        )
        .unwrap();
        assert_eq!(rasterize_median_highest(&cloud, &g, &fixed(2)).unwrap().get(0, 0), 31.0);
        assert_eq!(rasterize_median_highest(&cloud, &g, &fixed(3)).unwrap().get(0, 0), 12.0);
        // density policy: 4 points in the only occupied cell
        let d = rasterize_median_highest(&cloud, &g, &FusionParams::default()).unwrap();
        assert_eq!(d.get(0, 0), 11.5);
    }

    #[test]
    fn empty_cloud_is_all_nodata() {
        let r = rasterize_median_highest(&PointCloud::default(), &grid(3, 3), &FusionParams::default())
            .unwrap();
        assert_eq!(r.valid_count(), 0);
    }

    #[test]
    fn despike_examples() {
        let flat = Raster2D::filled(grid(5, 5), 7.0, DEFAULT_NODATA).unwrap();
        assert_eq!(remove_spikes(&flat, 20.0), flat);
        let mut spiky = flat.clone();
        spiky.set(2, 2, 107.0);
        let out = remove_spikes(&spiky, 20.0);
        assert!(!out.is_valid(2, 2));
        assert_eq!(out.valid_count(), 24);
        assert!(out.values().iter().filter(|&&v| v != DEFAULT_NODATA).all(|&v| v == 7.0));
        assert_eq!(remove_spikes(&spiky, f64::INFINITY), spiky);
    }

    #[test]
    fn idw_examples() {
        let mut r = Raster2D::filled(grid(3, 3), 4.5, DEFAULT_NODATA).unwrap();
        r.set_nodata(1, 1);
        let filled = idw_fill(&r, 2.0, 12).unwrap();
        assert_eq!(filled.get(1, 1), 4.5);

        let line = Raster2D::new(grid(1, 3), DEFAULT_NODATA, vec![0.0, DEFAULT_NODATA, 10.0]).unwrap();
        assert_eq!(idw_fill(&line, 2.0, 2).unwrap().get(0, 1), 5.0);

        let full = Raster2D::filled(grid(2, 2), 1.0, DEFAULT_NODATA).unwrap();
        assert_eq!(idw_fill(&full, 2.0, 12).unwrap(), full);

        let empty = Raster2D::nodata_like(grid(2, 2), DEFAULT_NODATA).unwrap();
        assert!(matches!(idw_fill(&empty, 2.0, 12), Err(Error::Fill(_))));
    }

    #[test]
    fn xyz_parsing() {
        let cloud = parse_xyz("# header\n1 2 3\n4.5, 5, -6\n\n").unwrap();
        assert_eq!(cloud.points, vec![[1.0, 2.0, 3.0], [4.5, 5.0, -6.0]]);
        assert!(matches!(parse_xyz("1 2\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn bounding_grid_covers_points() {
        let cloud = PointCloud::new(vec![[0.1, 0.2, 0.0], [3.9, 2.1, 1.0]]).unwrap();
        let g = cloud.bounding_grid(1.0).unwrap();
        for p in &cloud.points {
            assert!(cell_of(&g, p[0], p[1]).is_some());
        }
        assert_eq!((g.rows, g.cols), (3, 4));
    }
}
