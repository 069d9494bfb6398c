//! Straightforward reference implementations, written without reusing the
//! library code they check.

use dsmrefine::acquisition::{AcquisitionMeta, SelectionCriteria, SelectionProfile};
use dsmrefine::{GridHeader, Raster2D};

pub fn naive_mean(xs: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in xs {
        s += x;
    }
    s / xs.len() as f64
}

fn naive_median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

pub fn naive_mae(e: &[f64]) -> f64 {
    naive_mean(&e.iter().map(|x| x.abs()).collect::<Vec<_>>())
}

pub fn naive_rmse(e: &[f64]) -> f64 {
    naive_mean(&e.iter().map(|x| x * x).collect::<Vec<_>>()).sqrt()
}

pub fn naive_medae(e: &[f64]) -> f64 {
    naive_median(e.iter().map(|x| x.abs()).collect())
}

pub fn naive_bias(e: &[f64]) -> f64 {
    naive_median(e.to_vec())
}

fn degrees_between(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot: f64 = (0..3).map(|i| a[i] * b[i]).sum();
    dot.clamp(-1.0, 1.0).acos() * 180.0 / std::f64::consts::PI
}

fn direction(azimuth: f64, zenith: f64) -> [f64; 3] {
    let (a, z) = (azimuth.to_radians(), zenith.to_radians());
    [z.sin() * a.sin(), z.sin() * a.cos(), z.cos()]
}

/// Accepted pair ids `left+right`, sorted.
pub fn brute_pairs(images: &[AcquisitionMeta], c: &SelectionCriteria) -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..images.len() {
        for j in 0..images.len() {
            let (a, b) = (&images[i], &images[j]);
            if a.image_id >= b.image_id {
                continue;
            }
            if c.profile == SelectionProfile::Refinement
                && (a.snow || b.snow || !a.footprint_covers_area || !b.footprint_covers_area)
            {
                continue;
            }
            let inter = degrees_between(direction(a.azimuth, a.off_nadir), direction(b.azimuth, b.off_nadir));
            let sun = degrees_between(
                direction(a.sun_azimuth, 90.0 - a.sun_elevation),
                direction(b.sun_azimuth, 90.0 - b.sun_elevation),
            );
            let incidence = (a.off_nadir + b.off_nadir) / 2.0;
            if inter >= c.intersection_min
                && inter <= c.intersection_max
                && incidence <= c.incidence_max
                && sun <= c.sun_diff_max
            {
                out.push(format!("{}+{}", a.image_id, b.image_id));
            }
        }
    }
    out.sort();
    out
}

/// Median of the `n` highest z values of the points inside each cell.
pub fn brute_rasterize(points: &[[f64; 3]], h: &GridHeader, n: usize, nodata: f64) -> Vec<f64> {
    let mut out = vec![nodata; h.rows * h.cols];
    for r in 0..h.rows {
        for c in 0..h.cols {
            let x0 = h.xll + c as f64 * h.cell_size;
            let y0 = h.yll + (h.rows - 1 - r) as f64 * h.cell_size;
            let mut zs: Vec<f64> = points
                .iter()
                .filter(|p| p[0] >= x0 && p[0] < x0 + h.cell_size && p[1] >= y0 && p[1] < y0 + h.cell_size)
                .map(|p| p[2])
                .collect();
            if zs.is_empty() {
                continue;
            }
            zs.sort_by(|a, b| b.partial_cmp(a).unwrap());
            zs.truncate(n);
            out[r * h.cols + c] = naive_median(zs);
        }
    }
    out
}

pub fn brute_despike(d: &Raster2D, threshold: f64) -> Vec<f64> {
    let (rows, cols) = (d.rows() as i64, d.cols() as i64);
    let mut out = d.values().to_vec();
    for r in 0..rows {
        for c in 0..cols {
            let v = d.get(r as usize, c as usize);
            if v == d.nodata() {
                continue;
            }
            let mut neigh = Vec::new();
            for (dr, dc) in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
                let (rr, cc) = (r + dr, c + dc);
                if rr >= 0 && cc >= 0 && rr < rows && cc < cols {
                    let w = d.get(rr as usize, cc as usize);
                    if w != d.nodata() {
                        neigh.push(w);
                    }
                }
            }
            if !neigh.is_empty() && (v - naive_median(neigh)).abs() > threshold {
                out[(r * cols + c) as usize] = d.nodata();
            }
        }
    }
    out
}

/// Every hole gets the inverse-distance mean over its `k` nearest valid
/// cells, found by sorting all valid cells.
pub fn brute_idw(d: &Raster2D, power: f64, k: usize) -> Vec<f64> {
    let mut valid = Vec::new();
    for r in 0..d.rows() {
        for c in 0..d.cols() {
            let v = d.get(r, c);
            if v != d.nodata() {
                valid.push((r, c, v));
            }
        }
    }
    let mut out = d.values().to_vec();
    for r in 0..d.rows() {
        for c in 0..d.cols() {
            if d.get(r, c) != d.nodata() {
                continue;
            }
            let mut cand: Vec<(u64, usize, usize, f64)> = valid
                .iter()
                .map(|&(rr, cc, v)| {
                    let dr = rr as i64 - r as i64;
                    let dc = cc as i64 - c as i64;
                    ((dr * dr + dc * dc) as u64, rr, cc, v)
                })
                .collect();
            cand.sort_by_key(|&(d2, rr, cc, _)| (d2, rr, cc));
            cand.truncate(k);
            let (mut num, mut den) = (0.0, 0.0);
            for (d2, _, _, v) in cand {
                let w = ((d2 as f64).sqrt() * d.cell_size()).powf(-power);
                num += w * v;
                den += w;
            }
            out[r * d.cols() + c] = num / den;
        }
    }
    out
}
