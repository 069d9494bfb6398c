//! Procedural urban scenes with known ground truth.
//!
//! A scene is terrain plus axis-aligned buildings with flat or gable roofs.
//! Trees are recorded in a separate mask and never enter the ground-truth
//! DSM; they only show up in the corrupted DSM and as a darker material in
//! rendered views.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Triangular};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::view_vector;
use crate::error::{Error, Result};
use crate::ortho::{first_surface_hit, height_range, ParallelCamera};
use crate::raster::{write_mask, GridHeader, Mask, Raster2D, DEFAULT_NODATA};

/// Consecutive rejected footprints before placement gives up.
const MAX_PLACEMENT_TRIES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Terrain {
    Flat,
    /// Sum of random plane waves scaled so that `|h - base| <= amplitude`.
    Hilly { amplitude: f64, wavelength: f64 },
}

/// A flat-roofed tower placed at the scene center before anything else.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TowerSpec {
    pub height: f64,
    pub side: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Side length of the square scene, meters.
    pub extent: f64,
    pub cell_size: f64,
    pub base_elevation: f64,
    pub terrain: Terrain,
    /// Target fraction of the area covered by building footprints.
    pub building_density: f64,
    /// Fraction of gable roofs; the rest are flat.
    pub gable_fraction: f64,
    /// Eave height above terrain: (min, mode, max), meters.
    pub height_distribution: (f64, f64, f64),
    /// Footprint side length range, meters.
    pub footprint: (f64, f64),
    /// Minimum free space between footprints, meters.
    pub min_gap: f64,
    /// Target fraction of non-building area covered by trees.
    pub vegetation_density: f64,
    /// Tree crown radius range, meters.
    pub crown_radius: (f64, f64),
    pub tower: Option<TowerSpec>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            extent: 256.0,
            cell_size: 0.5,
            base_elevation: 400.0,
            terrain: Terrain::Hilly { amplitude: 4.0, wavelength: 150.0 },
            building_density: 0.25,
            gable_fraction: 0.5,
            height_distribution: (4.0, 10.0, 20.0),
            footprint: (8.0, 24.0),
            min_gap: 3.0,
            vegetation_density: 0.08,
            crown_radius: (1.5, 4.0),
            tower: None,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.cell_size > 0.0) || !(self.extent > 0.0) {
            return bad(format!("extent {} and cell size {} must be positive", self.extent, self.cell_size));
        }
        let cells = self.extent / self.cell_size;
        if (cells - cells.round()).abs() > 1e-9 {
            return bad(format!("extent {} is not a multiple of cell size {}", self.extent, self.cell_size));
        }
        for (name, v) in [
            ("building_density", self.building_density),
            ("gable_fraction", self.gable_fraction),
            ("vegetation_density", self.vegetation_density),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        let (lo, mode, hi) = self.height_distribution;
        if !(lo > 0.0 && lo <= mode && mode <= hi) {
            return bad(format!("height distribution ({lo}, {mode}, {hi}) must be positive and ordered"));
        }
        let (fmin, fmax) = self.footprint;
        if !(fmin >= self.cell_size && fmin <= fmax && fmax < self.extent) {
            return bad(format!("footprint range ({fmin}, {fmax}) invalid"));
        }
        let (rmin, rmax) = self.crown_radius;
        if !(rmin > 0.0 && rmin <= rmax) || !(self.min_gap >= 0.0) {
            return bad("crown radius range and gap must be positive".into());
        }
        if let Terrain::Hilly { amplitude, wavelength } = self.terrain {
            if !(amplitude >= 0.0 && wavelength > 0.0) {
                return bad("hilly terrain needs amplitude >= 0 and wavelength > 0".into());
            }
        }
        if let Some(t) = self.tower {
            if !(t.height > 0.0 && t.side >= self.cell_size && t.side < self.extent) {
                return bad(format!("tower {t:?} invalid"));
            }
        }
        Ok(())
    }

    pub fn header(&self) -> Result<GridHeader> {
        let n = (self.extent / self.cell_size).round() as usize;
        GridHeader::new(n, n, 0.0, 0.0, self.cell_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Roof {
    Flat,
    /// Ridge through the footprint center, parallel to the longer side.
    Gable { slope: f64, ridge_along_rows: bool },
}

/// Footprint in cells: rows `row0..row0 + rows`, columns likewise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
    /// Highest terrain under the footprint.
    pub base: f64,
    /// Eave height above `base`.
    pub eave: f64,
    pub roof: Roof,
}

impl Building {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row0..self.row0 + self.rows).contains(&r) && (self.col0..self.col0 + self.cols).contains(&c)
    }

    /// Roof height at the center of cell `(r, c)`.
    pub fn roof_height(&self, r: usize, c: usize, cell: f64) -> f64 {
        let top = self.base + self.eave;
        match self.roof {
            Roof::Flat => top,
            Roof::Gable { slope, ridge_along_rows } => {
                // Across-ridge offset from the footprint center, meters.
                let (i, n) = if ridge_along_rows { (c - self.col0, self.cols) } else { (r - self.row0, self.rows) };
                let d = ((i as f64 + 0.5) - n as f64 / 2.0).abs() * cell;
                top + slope * (n as f64 * cell / 2.0 - d)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub gt: Raster2D,
    pub terrain: Raster2D,
    pub building_mask: Mask,
    pub vegetation_mask: Mask,
    pub buildings: Vec<Building>,
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

fn terrain_field(spec: &SceneSpec, header: &GridHeader) -> Result<Raster2D> {
    let base = spec.base_elevation;
    match spec.terrain {
        Terrain::Flat => Raster2D::filled(*header, base, DEFAULT_NODATA),
        Terrain::Hilly { amplitude, wavelength } => {
            let mut rng = stream(spec.seed, 1);
            let waves: Vec<(f64, f64, f64, f64)> = (0..6)
                .map(|_| {
                    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                    let k = std::f64::consts::TAU / (wavelength * rng.gen_range(0.5..1.5));
                    (k * theta.cos(), k * theta.sin(), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.3..1.0))
                })
                .collect();
            let norm: f64 = waves.iter().map(|w| w.3).sum();
            Raster2D::from_fn(*header, DEFAULT_NODATA, |r, c| {
                let (x, y) = header.cell_center(r, c);
                let s: f64 = waves.iter().map(|&(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin()).sum();
                base + amplitude * s / norm
            })
        }
    }
}

/// Generates terrain, buildings and tree mask. Deterministic per seed.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let header = spec.header()?;
    let n = header.rows;
    let g = spec.cell_size;
    let terrain = terrain_field(spec, &header)?;
    let mut rng = stream(spec.seed, 2);
    let heights = Triangular::new(spec.height_distribution.0, spec.height_distribution.2, spec.height_distribution.1)
        .map_err(|e| Error::Config(format!("height distribution: {e}")))?;
    let gap = (spec.min_gap / g).ceil() as usize;
    let mut occupied = vec![false; header.len()];
    let mut buildings: Vec<Building> = Vec::new();

    let fits = |occ: &[bool], r0: usize, c0: usize, rows: usize, cols: usize| {
        let (ra, rb) = (r0.saturating_sub(gap), (r0 + rows + gap).min(n));
        let (ca, cb) = (c0.saturating_sub(gap), (c0 + cols + gap).min(n));
        (ra..rb).all(|r| (ca..cb).all(|c| !occ[r * n + c]))
    };
    let place = |occ: &mut Vec<bool>, r0: usize, c0: usize, rows: usize, cols: usize, eave: f64, roof: Roof| {
        let mut base = f64::NEG_INFINITY;
        for r in r0..r0 + rows {
            for c in c0..c0 + cols {
                occ[r * n + c] = true;
                base = base.max(terrain.get(r, c));
            }
        }
        Building { row0: r0, col0: c0, rows, cols, base, eave, roof }
    };

    if let Some(t) = spec.tower {
        let side = ((t.side / g).round() as usize).max(1);
        let r0 = (n - side) / 2;
        let b = place(&mut occupied, r0, r0, side, side, t.height, Roof::Flat);
        buildings.push(b);
    }

    let cells_min = ((spec.footprint.0 / g).round() as usize).max(1);
    let cells_max = ((spec.footprint.1 / g).round() as usize).max(cells_min);
    let target = (spec.building_density * header.len() as f64).round() as usize;
    let mut covered = buildings.iter().map(|b| b.rows * b.cols).sum::<usize>();
    let mut failures = 0;
    while covered < target {
        let rows = rng.gen_range(cells_min..=cells_max);
        let cols = rng.gen_range(cells_min..=cells_max);
        let eave = heights.sample(&mut rng);
        let gable = rng.gen_bool(spec.gable_fraction);
        let slope = rng.gen_range(20.0f64..40.0).to_radians().tan();
        if rows + 2 * gap > n || cols + 2 * gap > n {
            return Err(Error::Placement("footprint does not fit into the scene".into()));
        }
        let r0 = rng.gen_range(gap..=n - rows - gap);
        let c0 = rng.gen_range(gap..=n - cols - gap);
        // A rejected footprint is retried smaller at the same corner.
        let fit = (0..=3).map(|k| (rows - (rows - cells_min) * k / 3, cols - (cols - cells_min) * k / 3)).find(|&(rr, cc)| fits(&occupied, r0, c0, rr, cc));
        if let Some((rr, cc)) = fit {
            let roof = if gable { Roof::Gable { slope, ridge_along_rows: rr >= cc } } else { Roof::Flat };
            buildings.push(place(&mut occupied, r0, c0, rr, cc, eave, roof));
            covered += rr * cc;
            failures = 0;
        } else {
            failures += 1;
            if failures >= MAX_PLACEMENT_TRIES {
                return Err(Error::Placement(format!(
                    "reached {:.3} of building density {} before {MAX_PLACEMENT_TRIES} consecutive rejections",
                    covered as f64 / header.len() as f64,
                    spec.building_density
                )));
            }
        }
    }

    let mut gt = terrain.clone();
    for b in &buildings {
        for r in b.row0..b.row0 + b.rows {
            for c in b.col0..b.col0 + b.cols {
                gt.set(r, c, b.roof_height(r, c, g));
            }
        }
    }
    let building_mask = Mask::new(header, occupied.clone())?;

    // Trees keep one cell away from footprints.
    let blocked = crate::raster::dilate_mask(&building_mask, 1);
    let free = header.len() - blocked.count();
    let veg_target = (spec.vegetation_density * free as f64).round() as usize;
    let mut veg = vec![false; header.len()];
    let mut veg_count = 0;
    let mut vrng = stream(spec.seed, 3);
    let mut tries = 0;
    while veg_count < veg_target {
        tries += 1;
        if tries > 100 * header.len().max(1000) {
            return Err(Error::Placement("vegetation density not reachable".into()));
        }
        let radius = vrng.gen_range(spec.crown_radius.0..=spec.crown_radius.1) / g;
        let cr = vrng.gen_range(0.0..n as f64);
        let cc = vrng.gen_range(0.0..n as f64);
        let (ra, rb) = ((cr - radius).floor().max(0.0) as usize, ((cr + radius).ceil() as usize).min(n));
        let (ca, cb) = ((cc - radius).floor().max(0.0) as usize, ((cc + radius).ceil() as usize).min(n));
        for r in ra..rb {
            for c in ca..cb {
                let (dr, dc) = (r as f64 + 0.5 - cr, c as f64 + 0.5 - cc);
                let k = r * n + c;
                if dr * dr + dc * dc <= radius * radius && !blocked.values()[k] && !veg[k] {
                    veg[k] = true;
                    veg_count += 1;
                }
            }
        }
    }
    Ok(Scene {
        spec: spec.clone(),
        gt,
        terrain,
        building_mask,
        vegetation_mask: Mask::new(header, veg)?,
        buildings,
    })
}

/// Degradations that turn a ground-truth DSM into a stereo-like initial DSM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Corruption {
    /// Gaussian blur standard deviation, cells.
    pub blur_radius: f64,
    pub noise_sigma: f64,
    /// Per-cell probability of an outlier.
    pub outlier_rate: f64,
    /// Outliers move a cell by a random sign times U(0.5, 1.5) of this.
    pub outlier_magnitude: f64,
    /// Height added to tree cells before blurring.
    pub vegetation_height: f64,
    /// Probability that a building smaller than `small_building_area` is
    /// replaced by terrain.
    pub detail_loss_rate: f64,
    /// Square meters.
    pub small_building_area: f64,
    pub seed: u64,
}

impl Default for Corruption {
    fn default() -> Self {
        Corruption {
            blur_radius: 1.5,
            noise_sigma: 0.5,
            outlier_rate: 0.002,
            outlier_magnitude: 10.0,
            vegetation_height: 6.0,
            detail_loss_rate: 0.3,
            small_building_area: 150.0,
            seed: 0,
        }
    }
}

impl Corruption {
    pub fn none() -> Corruption {
        Corruption {
            blur_radius: 0.0,
            noise_sigma: 0.0,
            outlier_rate: 0.0,
            outlier_magnitude: 0.0,
            vegetation_height: 0.0,
            detail_loss_rate: 0.0,
            small_building_area: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.blur_radius >= 0.0
            && self.noise_sigma >= 0.0
            && (0.0..=1.0).contains(&self.outlier_rate)
            && self.outlier_magnitude >= 0.0
            && self.vegetation_height >= 0.0
            && (0.0..=1.0).contains(&self.detail_loss_rate)
            && self.small_building_area >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid corruption parameters {self:?}")))
        }
    }
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(values: &[f64], rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let rad = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-rad..=rad).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / ksum).collect();
    let pass = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            for c in 0..cols {
                let mut s = 0.0;
                for (t, &k) in kernel.iter().enumerate() {
                    let o = t as isize - rad;
                    let (rr, cc) = if along_rows {
                        (r, (c as isize + o).clamp(0, cols as isize - 1) as usize)
                    } else {
                        ((r as isize + o).clamp(0, rows as isize - 1) as usize, c)
                    };
                    s += k * src[rr * cols + cc];
                }
                out[r * cols + c] = s;
            }
        }
        out
    };
    pass(&pass(values, true), false)
}

/// Applies, in order: detail loss, tree heights, blur, noise, outliers.
pub fn corrupt_dsm(scene: &Scene, c: &Corruption) -> Result<Raster2D> {
    c.validate()?;
    let h = *scene.gt.header();
    let g = h.cell_size;
    let mut rng = stream(c.seed, 4);
    let mut v = scene.gt.values().to_vec();
    for b in &scene.buildings {
        let area = (b.rows * b.cols) as f64 * g * g;
        // Draw for every building so the stream does not depend on sizes.
        let drop = rng.gen_bool(c.detail_loss_rate);
        if drop && area < c.small_building_area {
            for r in b.row0..b.row0 + b.rows {
                for col in b.col0..b.col0 + b.cols {
                    v[r * h.cols + col] = scene.terrain.get(r, col);
                }
            }
        }
    }
    for (k, &is_veg) in scene.vegetation_mask.values().iter().enumerate() {
        if is_veg {
            v[k] += c.vegetation_height;
        }
    }
    let mut v = gaussian_blur(&v, h.rows, h.cols, c.blur_radius);
    if c.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, c.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for x in v.iter_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    if c.outlier_rate > 0.0 {
        for x in v.iter_mut() {
            if rng.gen_bool(c.outlier_rate) {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                *x += sign * c.outlier_magnitude * rng.gen_range(0.5..1.5);
            }
        }
    }
    Raster2D::new(h, scene.gt.nodata(), v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Material {
    Ground,
    Roof,
    Vegetation,
    Facade,
}

impl Material {
    fn albedo(self) -> f64 {
        match self {
            Material::Ground => 0.45,
            Material::Roof => 0.6,
            Material::Vegetation => 0.25,
            Material::Facade => 0.5,
        }
    }

    fn code(self) -> u64 {
        self as u64 + 1
    }
}

/// Per-cell materials of a scene.
pub fn scene_materials(scene: &Scene) -> Vec<Material> {
    scene
        .building_mask
        .values()
        .iter()
        .zip(scene.vegetation_mask.values())
        .map(|(&b, &v)| match (b, v) {
            (true, _) => Material::Roof,
            (false, true) => Material::Vegetation,
            _ => Material::Ground,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSpec {
    pub sun_azimuth: f64,
    pub sun_elevation: f64,
    pub ambient: f64,
    /// Peak amplitude of the material texture.
    pub texture_amplitude: f64,
    /// Texture lattice spacing, meters.
    pub texture_scale: f64,
    pub texture_seed: u64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec {
            sun_azimuth: 135.0,
            sun_elevation: 45.0,
            ambient: 0.3,
            texture_amplitude: 0.15,
            texture_scale: 1.0,
            texture_seed: 0,
        }
    }
}

fn hash_unit(seed: u64, material: u64, i: i64, j: i64) -> f64 {
    // splitmix64 over the lattice coordinates
    let mut z = seed
        ^ material.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (i as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (j as u64).wrapping_mul(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Bilinear value noise in [-1, 1].
fn value_noise(seed: u64, material: u64, a: f64, b: f64) -> f64 {
    let (i, j) = (a.floor(), b.floor());
    let (fa, fb) = (a - i, b - j);
    let (i, j) = (i as i64, j as i64);
    let h = |di, dj| hash_unit(seed, material, i + di, j + dj);
    let top = (1.0 - fa) * h(0, 0) + fa * h(1, 0);
    let bottom = (1.0 - fa) * h(0, 1) + fa * h(1, 1);
    (1.0 - fb) * top + fb * bottom
}

/// Surface normal of a DSM cell; differences across height jumps larger
/// than one meter are ignored so building edges keep their roof normal.
fn cell_normal(dsm: &Raster2D, r: usize, c: usize) -> [f64; 3] {
    let g = dsm.cell_size();
    let z = dsm.get(r, c);
    let side = |rr: isize, cc: isize| -> Option<f64> {
        if rr < 0 || cc < 0 || rr as usize >= dsm.rows() || cc as usize >= dsm.cols() {
            return None;
        }
        dsm.valid(rr as usize, cc as usize).filter(|v| (v - z).abs() <= 1.0)
    };
    let slope = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => (b - a) / (2.0 * g),
        (Some(a), None) => (z - a) / g,
        (None, Some(b)) => (b - z) / g,
        (None, None) => 0.0,
    };
    let (r, c) = (r as isize, c as isize);
    let dzdx = slope(side(r, c - 1), side(r, c + 1));
    // rows grow southwards
    let dzdy = slope(side(r + 1, c), side(r - 1, c));
    let n = (dzdx * dzdx + dzdy * dzdy + 1.0).sqrt();
    [-dzdx / n, -dzdy / n, 1.0 / n]
}

/// Radiance of a surface point with normal `n` and material `m`. The
/// texture is sampled at lattice coordinates `(a, b)` in meters.
fn shade(spec: &RenderSpec, n: [f64; 3], m: Material, a: f64, b: f64) -> f64 {
    let s = view_vector(spec.sun_azimuth, 90.0 - spec.sun_elevation);
    let lambert = (n[0] * s[0] + n[1] * s[1] + n[2] * s[2]).max(0.0);
    let tex = if spec.texture_amplitude > 0.0 {
        spec.texture_amplitude * value_noise(spec.texture_seed, m.code(), a / spec.texture_scale, b / spec.texture_scale)
    } else {
        0.0
    };
    m.albedo() * (spec.ambient + (1.0 - spec.ambient) * lambert) + tex
}

/// A rendered panchromatic image with its camera.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: ParallelCamera,
    pub image: Raster2D,
}

/// Viewing geometry of one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub azimuth: f64,
    pub off_nadir: f64,
}

/// Ray-casts every image pixel onto `dsm` and shades the first surface
/// hit. Cast shadows are not modelled. `materials` defaults to ground for
/// every cell.
pub fn render_views(
    dsm: &Raster2D,
    materials: Option<&[Material]>,
    views: &[ViewSpec],
    spec: &RenderSpec,
) -> Result<Vec<View>> {
    if let Some(m) = materials {
        if m.len() != dsm.header().len() {
            return Err(Error::InvalidInput(format!(
                "{} materials for {} cells",
                m.len(),
                dsm.header().len()
            )));
        }
    }
    let (zmin, zmax) = height_range(dsm).ok_or_else(|| Error::InvalidInput("DSM has no valid cell".into()))?;
    let (zmin, zmax) = (zmin - 1.0, zmax + 1.0);
    let material_at = |r: usize, c: usize| materials.map_or(Material::Ground, |m| m[r * dsm.cols() + c]);
    views
        .iter()
        .map(|vs| {
            let (cam, header) = ParallelCamera::covering(dsm.header(), vs.azimuth, vs.off_nadir, zmin, zmax, 2)?;
            let values: Vec<f64> = (0..header.rows)
                .into_par_iter()
                .flat_map_iter(|v| {
                    (0..header.cols)
                        .map(|u| {
                            let Some(hit) = first_surface_hit(dsm, &cam, u as f64, v as f64, zmin, zmax) else {
                                return DEFAULT_NODATA;
                            };
                            if hit.top {
                                let n = cell_normal(dsm, hit.row, hit.col);
                                shade(spec, n, material_at(hit.row, hit.col), hit.x, hit.y)
                            } else {
                                // Entered through a vertical face: pick the cell side
                                // the hit lies on. Descending rays travel along the
                                // azimuth, so the face looks the opposite way.
                                let (x0, y0) = dsm.header().cell_center(hit.row, hit.col);
                                let (fx, fy) = ((hit.x - x0).abs(), (hit.y - y0).abs());
                                let d = cam.view_dir;
                                let (n, along) = if fx >= fy {
                                    ([-d[0].signum(), 0.0, 0.0], hit.y)
                                } else {
                                    ([0.0, -d[1].signum(), 0.0], hit.x)
                                };
                                shade(spec, n, Material::Facade, along, hit.z)
                            }
                        })
                        .collect::<Vec<_>>()
                })
                .collect();
            Ok(View { camera: cam, image: Raster2D::new(header, DEFAULT_NODATA, values)? })
        })
        .collect()
}

/// Everything the `synth` command produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub scene: SceneSpec,
    pub corruption: Corruption,
    pub render: RenderSpec,
    pub views: Vec<ViewSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            scene: SceneSpec::default(),
            corruption: Corruption::default(),
            render: RenderSpec::default(),
            views: vec![ViewSpec { azimuth: 100.0, off_nadir: 15.0 }, ViewSpec { azimuth: 260.0, off_nadir: 15.0 }],
        }
    }
}

impl SynthConfig {
    /// Replaces every seed with one derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> SynthConfig {
        self.scene.seed = seed;
        self.corruption.seed = seed.wrapping_add(1);
        self.render.texture_seed = seed.wrapping_add(2);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBundle {
    pub scene: Scene,
    pub initial: Raster2D,
    pub views: Vec<View>,
}

pub fn synthesize(cfg: &SynthConfig) -> Result<SynthBundle> {
    let scene = generate_scene(&cfg.scene)?;
    let initial = corrupt_dsm(&scene, &cfg.corruption)?;
    let materials = scene_materials(&scene);
    let views = render_views(&scene.gt, Some(&materials), &cfg.views, &cfg.render)?;
    Ok(SynthBundle { scene, initial, views })
}

impl SynthBundle {
    /// Writes `gt.asc`, `initial.asc`, `terrain.asc`, `building_mask.asc`,
    /// `vegetation_mask.asc`, `view_<k>.asc`, `camera_<k>.json` and
    /// `spec.json` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.scene.gt.write_ascii(dir.join("gt.asc"))?;
        self.initial.write_ascii(dir.join("initial.asc"))?;
        self.scene.terrain.write_ascii(dir.join("terrain.asc"))?;
        write_mask(&self.scene.building_mask, dir.join("building_mask.asc"))?;
        write_mask(&self.scene.vegetation_mask, dir.join("vegetation_mask.asc"))?;
        for (k, v) in self.views.iter().enumerate() {
            v.image.write_ascii(dir.join(format!("view_{k}.asc")))?;
            v.camera.write_json(dir.join(format!("camera_{k}.json")))?;
        }
        let path = dir.join("spec.json");
        std::fs::write(&path, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| Error::io(&path, e))
    }
}
