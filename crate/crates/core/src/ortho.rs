//! Ortho-rectification against a DSM with a parallel (affine) camera.
//!
//! A ground point `(x, y, z)` is slid along the viewing direction to height
//! zero, which moves it by `z * view.xy / view.z` in the plane; the result is
//! expressed in image pixels relative to `image_origin`. Image columns grow
//! eastwards and rows southwards, so an image is an ordinary [`Raster2D`]
//! whose pixel `(0, 0)` is centered on `image_origin`.
//!
//! Rectification samples the image for every DSM cell without any
//! visibility test. Cells hidden behind a taller object therefore repeat
//! the occluder's texture.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::view_vector;
use crate::error::{Error, Result};
use crate::raster::{GridHeader, Raster2D};

/// Sub-pixel offsets below this are treated as exact pixel centers.
const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraJson", into = "CameraJson")]
pub struct ParallelCamera {
    pub azimuth: f64,
    pub off_nadir: f64,
    /// Unit viewing vector; raised points shift along its horizontal part.
    pub view_dir: [f64; 3],
    pub image_gsd: f64,
    /// Planar position of the center of image pixel `(0, 0)` at height 0.
    pub image_origin: [f64; 2],
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct CameraJson {
    azimuth: f64,
    off_nadir: f64,
    gsd: f64,
    origin_x: f64,
    origin_y: f64,
}

impl TryFrom<CameraJson> for ParallelCamera {
    type Error = Error;

    fn try_from(j: CameraJson) -> Result<Self> {
        ParallelCamera::new(j.azimuth, j.off_nadir, j.gsd, [j.origin_x, j.origin_y])
    }
}

impl From<ParallelCamera> for CameraJson {
    fn from(c: ParallelCamera) -> Self {
        CameraJson {
            azimuth: c.azimuth,
            off_nadir: c.off_nadir,
            gsd: c.image_gsd,
            origin_x: c.image_origin[0],
            origin_y: c.image_origin[1],
        }
    }
}

/// Result of casting an image ray onto a DSM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub row: usize,
    pub col: usize,
    /// Height at which the ray meets the surface.
    pub z: f64,
    /// `false` when the ray enters the cell through a vertical face.
    pub top: bool,
    /// Planar position of the hit.
    pub x: f64,
    pub y: f64,
}

impl ParallelCamera {
    pub fn new(azimuth: f64, off_nadir: f64, gsd: f64, image_origin: [f64; 2]) -> Result<Self> {
        if !(0.0..90.0).contains(&off_nadir) || !(gsd > 0.0) || !azimuth.is_finite() {
            return Err(Error::Config(format!(
                "invalid camera: azimuth {azimuth}, off-nadir {off_nadir}, gsd {gsd}"
            )));
        }
        Ok(ParallelCamera {
            azimuth,
            off_nadir,
            view_dir: view_vector(azimuth, off_nadir),
            image_gsd: gsd,
            image_origin,
        })
    }

    /// Camera whose image grid coincides with `grid` at height 0.
    pub fn aligned_with(grid: &GridHeader, azimuth: f64, off_nadir: f64) -> Result<Self> {
        let (x0, y0) = grid.cell_center(0, 0);
        ParallelCamera::new(azimuth, off_nadir, grid.cell_size, [x0, y0])
    }

    /// Planar displacement per meter of height. Raised points move along
    /// the viewing azimuth, away from the sensor.
    pub fn parallax(&self) -> [f64; 2] {
        let v = self.view_dir;
        [v[0] / v[2], v[1] / v[2]]
    }

    /// Position at height 0 of the ray through ground point `p`.
    pub fn ground_to_plane(&self, p: [f64; 3]) -> [f64; 2] {
        let d = self.parallax();
        [p[0] + p[2] * d[0], p[1] + p[2] * d[1]]
    }

    /// Image coordinates `(u, v)` (column, row) of ground point `p`.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        let q = self.ground_to_plane(p);
        (
            (q[0] - self.image_origin[0]) / self.image_gsd,
            (self.image_origin[1] - q[1]) / self.image_gsd,
        )
    }

    /// Planar position at height 0 of image pixel `(u, v)`.
    pub fn pixel_to_plane(&self, u: f64, v: f64) -> [f64; 2] {
        [
            self.image_origin[0] + u * self.image_gsd,
            self.image_origin[1] - v * self.image_gsd,
        ]
    }

    /// Grid header of a `rows x cols` image taken by this camera.
    pub fn image_header(&self, rows: usize, cols: usize) -> Result<GridHeader> {
        let g = self.image_gsd;
        GridHeader::new(
            rows,
            cols,
            self.image_origin[0] - 0.5 * g,
            self.image_origin[1] + 0.5 * g - rows as f64 * g,
            g,
        )
    }

    /// Image header large enough to see every cell of `dsm` at heights in
    /// `[zmin, zmax]`, with the pixel grid aligned to the DSM grid.
    pub fn covering(
        dsm: &GridHeader,
        azimuth: f64,
        off_nadir: f64,
        zmin: f64,
        zmax: f64,
        margin_px: usize,
    ) -> Result<(ParallelCamera, GridHeader)> {
        let probe = ParallelCamera::new(azimuth, off_nadir, dsm.cell_size, [0.0, 0.0])?;
        let d = probe.parallax();
        let g = dsm.cell_size;
        let shifts = [zmin * d[0], zmax * d[0]];
        let shifts_y = [zmin * d[1], zmax * d[1]];
        let min_dx = shifts[0].min(shifts[1]);
        let max_dx = shifts[0].max(shifts[1]);
        let min_dy = shifts_y[0].min(shifts_y[1]);
        let max_dy = shifts_y[0].max(shifts_y[1]);
        let m = margin_px as f64;
        let left = ((-min_dx) / g).ceil().max(0.0) + m;
        let right = (max_dx / g).ceil().max(0.0) + m;
        let up = (max_dy / g).ceil().max(0.0) + m;
        let down = ((-min_dy) / g).ceil().max(0.0) + m;
        let (x0, y0) = dsm.cell_center(0, 0);
        let origin = [x0 - left * g, y0 + up * g];
        let cam = ParallelCamera::new(azimuth, off_nadir, g, origin)?;
        let cols = dsm.cols + (left + right) as usize;
        let rows = dsm.rows + (up + down) as usize;
        let header = cam.image_header(rows, cols)?;
        Ok((cam, header))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<ParallelCamera> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Projects ground point `p` into `cam`'s image, in pixels.
pub fn project_ground_to_image(p: [f64; 3], cam: &ParallelCamera) -> (f64, f64) {
    cam.project(p)
}

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < SNAP {
        r
    } else {
        x
    }
}

/// Bilinear sample of `image` at fractional `(u, v)` = (column, row). Returns
/// `None` outside the pixel-center hull or when a contributing pixel is
/// nodata.
pub fn sample_bilinear(image: &Raster2D, u: f64, v: f64) -> Option<f64> {
    let (u, v) = (snap(u), snap(v));
    let (cols, rows) = (image.cols() as f64, image.rows() as f64);
    if !(u >= 0.0 && v >= 0.0 && u <= cols - 1.0 && v <= rows - 1.0) {
        return None;
    }
    let (c0, r0) = (u.floor() as usize, v.floor() as usize);
    let (fu, fv) = (u - c0 as f64, v - r0 as f64);
    let c1 = if fu > 0.0 { c0 + 1 } else { c0 };
    let r1 = if fv > 0.0 { r0 + 1 } else { r0 };
    let a = image.valid(r0, c0)?;
    let b = if fu > 0.0 { image.valid(r0, c1)? } else { 0.0 };
    let c = if fv > 0.0 { image.valid(r1, c0)? } else { 0.0 };
    let d = if fu > 0.0 && fv > 0.0 { image.valid(r1, c1)? } else { 0.0 };
    let top = (1.0 - fu) * a + fu * b;
    let bottom = (1.0 - fu) * c + fu * d;
    Some((1.0 - fv) * top + fv * bottom)
}

/// Resamples `image` onto the DSM grid: every valid DSM cell looks up the
/// image at the projection of its center lifted to the cell height.
pub fn orthorectify(image: &Raster2D, dsm: &Raster2D, cam: &ParallelCamera) -> Result<Raster2D> {
    let header = *dsm.header();
    let nodata = image.nodata();
    let values: Vec<f64> = (0..header.rows)
        .into_par_iter()
        .flat_map_iter(|r| {
            (0..header.cols)
                .map(|c| {
                    let Some(z) = dsm.valid(r, c) else {
                        return nodata;
                    };
                    let (x, y) = header.cell_center(r, c);
                    let (u, v) = cam.project([x, y, z]);
                    sample_bilinear(image, u, v).unwrap_or(nodata)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Raster2D::new(header, nodata, values)
}

/// As [`orthorectify`], but fails unless `output` equals the DSM grid.
pub fn orthorectify_onto(
    image: &Raster2D,
    dsm: &Raster2D,
    cam: &ParallelCamera,
    output: &GridHeader,
) -> Result<Raster2D> {
    output.ensure_same(dsm.header(), "ortho output grid vs DSM")?;
    orthorectify(image, dsm, cam)
}

/// Casts the ray of image position `(u, v)` onto the height field `dsm` and
/// returns the first (highest) intersection.
pub fn first_surface_hit(
    dsm: &Raster2D,
    cam: &ParallelCamera,
    u: f64,
    v: f64,
    zmin: f64,
    zmax: f64,
) -> Option<SurfaceHit> {
    let h = dsm.header();
    let p = cam.pixel_to_plane(u, v);
    let d = cam.parallax();
    let top_y = h.origin_y();
    let to_grid = |x: f64, y: f64| ((x - h.xll) / h.cell_size, (top_y - y) / h.cell_size);
    let (ax, ay) = to_grid(p[0] - zmax * d[0], p[1] - zmax * d[1]);
    let (bx, by) = to_grid(p[0] - zmin * d[0], p[1] - zmin * d[1]);
    let (rows, cols) = (h.rows as i64, h.cols as i64);
    let z_at = |t: f64| zmax - t * (zmax - zmin);
    let hit_at = |row: usize, col: usize, z: f64, top: bool| SurfaceHit {
        row,
        col,
        z,
        top,
        x: p[0] - z * d[0],
        y: p[1] - z * d[1],
    };

    // Amanatides-Woo traversal from A (t = 0, z = zmax) to B (t = 1, z = zmin).
    let (dx, dy) = (bx - ax, by - ay);
    let (mut ix, mut iy) = (ax.floor() as i64, ay.floor() as i64);
    let (end_x, end_y) = (bx.floor() as i64, by.floor() as i64);
    let step_x: i64 = if dx > 0.0 { 1 } else { -1 };
    let step_y: i64 = if dy > 0.0 { 1 } else { -1 };
    let t_delta_x = if dx != 0.0 { (1.0 / dx).abs() } else { f64::INFINITY };
    let t_delta_y = if dy != 0.0 { (1.0 / dy).abs() } else { f64::INFINITY };
    let mut t_max_x = if dx > 0.0 {
        ((ix + 1) as f64 - ax) / dx
    } else if dx < 0.0 {
        (ix as f64 - ax) / dx
    } else {
        f64::INFINITY
    };
    let mut t_max_y = if dy > 0.0 {
        ((iy + 1) as f64 - ay) / dy
    } else if dy < 0.0 {
        (iy as f64 - ay) / dy
    } else {
        f64::INFINITY
    };
    let mut t_enter = 0.0f64;
    let max_steps = (end_x - ix).abs() + (end_y - iy).abs() + 2;
    for _ in 0..=max_steps {
        let t_exit = t_max_x.min(t_max_y).min(1.0);
        if ix >= 0 && iy >= 0 && ix < cols && iy < rows {
            let (row, col) = (iy as usize, ix as usize);
            if let Some(height) = dsm.valid(row, col) {
                let (z_enter, z_exit) = (z_at(t_enter), z_at(t_exit));
                if height >= z_exit {
                    return Some(if height <= z_enter {
                        hit_at(row, col, height, true)
                    } else {
                        hit_at(row, col, z_enter, false)
                    });
                }
            }
        }
        if t_exit >= 1.0 {
            break;
        }
        if t_max_x < t_max_y {
            ix += step_x;
            t_enter = t_max_x;
            t_max_x += t_delta_x;
        } else {
            iy += step_y;
            t_enter = t_max_y;
            t_max_y += t_delta_y;
        }
    }
    None
}

/// Valid height range of a DSM.
pub fn height_range(dsm: &Raster2D) -> Option<(f64, f64)> {
    dsm.values()
        .iter()
        .filter(|&&v| v != dsm.nodata())
        .fold(None, |acc, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::DEFAULT_NODATA;

    fn grid(n: usize) -> GridHeader {
        GridHeader::new(n, n, 0.0, 0.0, 0.5).unwrap()
    }

    #[test]
    fn nadir_projection_has_no_parallax() {
        let cam = ParallelCamera::new(0.0, 0.0, 0.5, [0.0, 0.0]).unwrap();
        for z in [0.0, 3.0, 250.0] {
            let (u, v) = project_ground_to_image([10.0, -4.0, z], &cam);
            assert_eq!((u, v), (20.0, 8.0));
        }
    }

    #[test]
    fn eastward_shift_is_height_times_tangent() {
        let cam = ParallelCamera::new(90.0, 30.0, 1.0, [0.0, 0.0]).unwrap();
        let (u0, v0) = cam.project([0.0, 0.0, 0.0]);
        let (u, v) = cam.project([0.0, 0.0, 10.0]);
        assert!((u - u0 - 10.0 * 30f64.to_radians().tan()).abs() < 1e-12);
        assert!((u - u0 - 5.773502691896258).abs() < 1e-9);
        assert!((v - v0).abs() < 1e-12);
    }

    #[test]
    fn zero_height_is_pure_planar_mapping() {
        for (az, off) in [(0.0, 25.0), (123.0, 40.0), (300.0, 5.0)] {
            let cam = ParallelCamera::new(az, off, 0.25, [100.0, 200.0]).unwrap();
            let (u, v) = cam.project([103.0, 190.0, 0.0]);
            assert_eq!((u, v), (12.0, 40.0));
        }
    }

    #[test]
    fn nadir_ortho_is_bit_identical() {
        let g = grid(8);
        let image = Raster2D::from_fn(g, DEFAULT_NODATA, |r, c| ((r * 31 + c * 17) % 13) as f64 * 0.37)
            .unwrap();
        let dsm = Raster2D::from_fn(g, DEFAULT_NODATA, |r, c| (r + 2 * c) as f64 * 1.3).unwrap();
        let cam = ParallelCamera::aligned_with(&g, 0.0, 0.0).unwrap();
        let ortho = orthorectify(&image, &dsm, &cam).unwrap();
        assert_eq!(ortho, image);
    }

    #[test]
    fn flat_zero_dsm_is_identity_for_any_camera() {
        let g = grid(6);
        let image = Raster2D::from_fn(g, DEFAULT_NODATA, |r, c| (r * 6 + c) as f64).unwrap();
        let dsm = Raster2D::filled(g, 0.0, DEFAULT_NODATA).unwrap();
        for (az, off) in [(45.0, 20.0), (200.0, 35.0)] {
            let cam = ParallelCamera::aligned_with(&g, az, off).unwrap();
            assert_eq!(orthorectify(&image, &dsm, &cam).unwrap(), image);
        }
    }

    #[test]
    fn header_mismatch_is_rejected() {
        let g = grid(4);
        let image = Raster2D::filled(g, 1.0, DEFAULT_NODATA).unwrap();
        let dsm = Raster2D::filled(g, 0.0, DEFAULT_NODATA).unwrap();
        let cam = ParallelCamera::aligned_with(&g, 0.0, 0.0).unwrap();
        let other = grid(5);
        assert!(matches!(
            orthorectify_onto(&image, &dsm, &cam, &other),
            Err(Error::HeaderMismatch(_))
        ));
        assert_eq!(orthorectify_onto(&image, &dsm, &cam, &g).unwrap(), image);
    }

    #[test]
    fn outside_samples_are_nodata() {
        let g = grid(4);
        let image = Raster2D::filled(g, 1.0, DEFAULT_NODATA).unwrap();
        let dsm = Raster2D::filled(g, 1.0, DEFAULT_NODATA).unwrap();
        // 1 m of eastward parallax is two 0.5 m pixels: the last columns fall off-image
        let cam = ParallelCamera::aligned_with(&g, 90.0, 45.0).unwrap();
        let ortho = orthorectify(&image, &dsm, &cam).unwrap();
        for r in 0..4 {
            assert!(ortho.is_valid(r, 0));
            assert!(!ortho.is_valid(r, 3));
        }
    }

    #[test]
    fn bilinear_midpoint() {
        let g = grid(2);
        let image = Raster2D::new(g, DEFAULT_NODATA, vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(sample_bilinear(&image, 0.5, 0.5), Some(3.0));
        assert_eq!(sample_bilinear(&image, 1.0, 1.0), Some(6.0));
        assert_eq!(sample_bilinear(&image, 1.5, 0.0), None);
    }

    #[test]
    fn ray_hits_roof_before_ground() {
        // a 2-cell wide block of height 4 in the middle of flat ground
        let g = GridHeader::new(1, 10, 0.0, 0.0, 1.0).unwrap();
        let dsm = Raster2D::from_fn(g, DEFAULT_NODATA, |_, c| if (4..6).contains(&c) { 4.0 } else { 0.0 })
            .unwrap();
        let cam = ParallelCamera::aligned_with(&g, 90.0, 45.0).unwrap();
        // roof cell 4 maps to u = 4 + 4
        let hit = first_surface_hit(&dsm, &cam, 8.0, 0.0, 0.0, 4.0).unwrap();
        assert_eq!((hit.col, hit.top, hit.z), (4, true, 4.0));
        // ground cell 7 is hidden behind the roof
        let hit = first_surface_hit(&dsm, &cam, 7.0, 0.0, 0.0, 4.0).unwrap();
        assert!(hit.col == 4 && !hit.top);
        let hit = first_surface_hit(&dsm, &cam, 2.0, 0.0, 0.0, 4.0).unwrap();
        assert_eq!((hit.col, hit.top), (2, true));
        let hit = first_surface_hit(&dsm, &cam, 9.0, 0.0, 0.0, 4.0).unwrap();
        assert_eq!((hit.col, hit.top, hit.z), (5, true, 4.0));
    }

    #[test]
    fn camera_json_round_trip() {
        let cam = ParallelCamera::new(135.0, 17.5, 0.5, [10.25, -3.0]).unwrap();
        let text = serde_json::to_string(&cam).unwrap();
        assert!(text.contains("\"gsd\":0.5"));
        let back: ParallelCamera = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cam);
        assert!(serde_json::from_str::<ParallelCamera>(
            r#"{"azimuth":0,"off_nadir":95,"gsd":1,"origin_x":0,"origin_y":0}"#
        )
        .is_err());
    }
}
