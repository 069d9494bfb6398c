//! Training patch sampling and dihedral augmentation.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Variant;
use crate::normalization::NormStats;
use crate::raster::{GridHeader, Mask, Raster2D};

/// Rectangular block of cells, usually one stripe of a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Window {
    pub fn full(header: &GridHeader) -> Window {
        Window { row0: 0, col0: 0, rows: header.rows, cols: header.cols }
    }

    /// Full-height window over a column range.
    pub fn columns(rows: usize, cols: std::ops::Range<usize>) -> Window {
        Window { row0: 0, col0: cols.start, rows, cols: cols.len() }
    }

    fn origins(&self, tile: usize) -> usize {
        if self.rows < tile || self.cols < tile {
            0
        } else {
            (self.rows - tile + 1) * (self.cols - tile + 1)
        }
    }
}

/// Upper-left cell of a sampled tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileOrigin {
    pub row: usize,
    pub col: usize,
}

/// Draws `count` tile origins uniformly (with replacement) from all positions
/// where a `tile x tile` patch fits entirely inside one of the windows.
pub fn sample_patches(windows: &[Window], count: usize, tile: usize, seed: u64) -> Result<Vec<TileOrigin>> {
    if tile == 0 {
        return Err(Error::Size("tile size must be positive".into()));
    }
    if windows.is_empty() {
        return Err(Error::Size("no sampling window given".into()));
    }
    for w in windows {
        if w.origins(tile) == 0 {
            return Err(Error::Size(format!(
                "tile {tile} does not fit window of {}x{} cells",
                w.rows, w.cols
            )));
        }
    }
    let weights: Vec<usize> = windows.iter().map(|w| w.origins(tile)).collect();
    let total: usize = weights.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut k = rng.gen_range(0..total);
        let mut idx = 0;
        while k >= weights[idx] {
            k -= weights[idx];
            idx += 1;
        }
        let w = &windows[idx];
        let span = w.cols - tile + 1;
        out.push(TileOrigin { row: w.row0 + k / span, col: w.col0 + k % span });
    }
    Ok(out)
}

/// One normalized training example. All channels are `size x size`
/// row-major and share `header`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub header: GridHeader,
    pub initial: Vec<f32>,
    pub gt: Vec<f32>,
    pub orthos: Vec<Vec<f32>>,
    /// `true` marks pixels excluded from the loss.
    pub mask: Vec<bool>,
    /// Mean initial height removed from both DSM channels, meters.
    pub patch_mean: f64,
    pub pair_id: String,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.header.rows
    }
}

/// Quarter-turn counter-clockwise rotation count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn quarter_turns(self) -> usize {
        self as usize
    }

    pub fn from_quarter_turns(k: usize) -> Rotation {
        Rotation::ALL[k % 4]
    }

    pub fn degrees(self) -> u32 {
        90 * self as u32
    }
}

/// Spatial transform (applied as: flip columns, flip rows, then rotate) and
/// an optional exchange of the two ortho-images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub rotation: Rotation,
    /// Mirror left-right.
    pub flip_h: bool,
    /// Mirror top-bottom.
    pub flip_v: bool,
    pub swap_views: bool,
}

impl AugmentationSpec {
    pub const IDENTITY: AugmentationSpec =
        AugmentationSpec { rotation: Rotation::R0, flip_h: false, flip_v: false, swap_views: false };

    /// All 32 parameter combinations.
    pub fn all() -> Vec<AugmentationSpec> {
        let mut out = Vec::with_capacity(32);
        for rotation in Rotation::ALL {
            for bits in 0..8u8 {
                out.push(AugmentationSpec {
                    rotation,
                    flip_h: bits & 1 != 0,
                    flip_v: bits & 2 != 0,
                    swap_views: bits & 4 != 0,
                });
            }
        }
        out
    }

    pub fn random(rng: &mut impl Rng, allow_swap: bool) -> AugmentationSpec {
        AugmentationSpec {
            rotation: Rotation::from_quarter_turns(rng.gen_range(0..4)),
            flip_h: rng.gen(),
            flip_v: rng.gen(),
            swap_views: allow_swap && rng.gen(),
        }
    }

    /// The spec undoing `self`. A single mirror reverses the sense of the
    /// rotation it is moved across; two mirrors make a half turn, which
    /// commutes with everything.
    pub fn inverse(&self) -> AugmentationSpec {
        let r = self.rotation.quarter_turns();
        let turns = if self.flip_h ^ self.flip_v { r } else { (4 - r) % 4 };
        AugmentationSpec { rotation: Rotation::from_quarter_turns(turns), ..*self }
    }
}

/// Applies the spatial part of `spec` to a square row-major plane.
pub fn transform_plane<T: Copy>(plane: &[T], size: usize, spec: &AugmentationSpec) -> Vec<T> {
    assert_eq!(plane.len(), size * size);
    let n = size;
    let r = spec.rotation.quarter_turns();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            // undo the rotation to find the position in the flipped plane
            let (mut a, mut b) = (i, j);
            for _ in 0..r {
                // output (a, b) of a ccw quarter turn reads input (b, n-1-a)
                let t = a;
                a = b;
                b = n - 1 - t;
            }
            if spec.flip_v {
                a = n - 1 - a;
            }
            if spec.flip_h {
                b = n - 1 - b;
            }
            out.push(plane[a * n + b]);
        }
    }
    out
}

/// Applies `spec` to every channel of a sample. Heights are scalars, so
/// only their positions move.
pub fn augment(sample: &Sample, spec: &AugmentationSpec) -> Result<Sample> {
    let n = sample.size();
    if sample.header.cols != n {
        return Err(Error::Augmentation(format!(
            "patches must be square, got {}x{}",
            sample.header.rows, sample.header.cols
        )));
    }
    if spec.swap_views && sample.orthos.len() < 2 {
        return Err(Error::Augmentation(format!(
            "cannot swap views of a sample with {} ortho-image(s)",
            sample.orthos.len()
        )));
    }
    let mut orthos: Vec<Vec<f32>> = sample.orthos.iter().map(|o| transform_plane(o, n, spec)).collect();
    if spec.swap_views {
        orthos.swap(0, 1);
    }
    Ok(Sample {
        header: sample.header,
        initial: transform_plane(&sample.initial, n, spec),
        gt: transform_plane(&sample.gt, n, spec),
        orthos,
        mask: transform_plane(&sample.mask, n, spec),
        patch_mean: sample.patch_mean,
        pair_id: sample.pair_id.clone(),
    })
}

/// Ortho-images of one stereo pair, resampled onto the region grid.
#[derive(Debug, Clone)]
pub struct PairViews {
    pub id: String,
    pub orthos: Vec<Raster2D>,
}

impl PairViews {
    /// Placeholder pair for DSM-only models.
    pub fn dsm_only() -> PairViews {
        PairViews { id: "dsm".into(), orthos: Vec::new() }
    }
}

/// Co-registered rasters of one geographic area.
#[derive(Debug, Clone)]
pub struct Region {
    pub name: String,
    pub initial: Raster2D,
    pub gt: Raster2D,
    /// Cells to leave out of the loss.
    pub exclusion: Option<Mask>,
    pub pairs: Vec<PairViews>,
    /// Where tiles may be drawn. Empty means the whole raster.
    pub windows: Vec<Window>,
}

impl Region {
    pub fn validate(&self) -> Result<()> {
        let h = self.initial.header();
        h.ensure_same(self.gt.header(), "ground truth")?;
        if let Some(m) = &self.exclusion {
            h.ensure_same(m.header(), "exclusion mask")?;
        }
        for p in &self.pairs {
            for o in &p.orthos {
                h.ensure_same(o.header(), "ortho-image")?;
            }
        }
        Ok(())
    }

    pub fn sampling_windows(&self) -> Vec<Window> {
        if self.windows.is_empty() {
            vec![Window::full(self.initial.header())]
        } else {
            self.windows.clone()
        }
    }
}

/// Cuts and normalizes one sample. The ground truth is centered on the
/// initial patch's mean so that the network target is a plain residual.
pub fn extract_sample(
    region: &Region,
    pair: usize,
    origin: TileOrigin,
    tile: usize,
    variant: Variant,
    stats: &NormStats,
) -> Result<Sample> {
    let views = &region.pairs[pair];
    let need = variant.ortho_count();
    if views.orthos.len() < need {
        return Err(Error::Config(format!(
            "pair {} provides {} ortho-image(s), variant {variant} needs {need}",
            views.id,
            views.orthos.len()
        )));
    }
    let header = *region.initial.header();
    if origin.row + tile > header.rows || origin.col + tile > header.cols {
        return Err(Error::Bounds {
            requested: format!("tile {tile} at ({}, {})", origin.row, origin.col),
            available: format!("{}x{}", header.rows, header.cols),
        });
    }
    let cells = || (0..tile).flat_map(move |i| (0..tile).map(move |j| (origin.row + i, origin.col + j)));
    let (sum, n) = cells()
        .filter_map(|(r, c)| region.initial.valid(r, c))
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return Err(Error::InvalidInput("initial DSM patch has no valid cell".into()));
    }
    let mean = sum / n as f64;
    let scale = stats.dsm_scale;
    let img = stats.image_stats();
    let mut initial = Vec::with_capacity(tile * tile);
    let mut gt = Vec::with_capacity(tile * tile);
    let mut mask = Vec::with_capacity(tile * tile);
    for (r, c) in cells() {
        let a = region.initial.valid(r, c);
        let b = region.gt.valid(r, c);
        let excluded = region.exclusion.as_ref().map_or(false, |m| m.get(r, c));
        initial.push(a.map_or(0.0, |v| ((v - mean) / scale) as f32));
        gt.push(b.map_or(0.0, |v| ((v - mean) / scale) as f32));
        mask.push(excluded || a.is_none() || b.is_none());
    }
    let orthos = views.orthos[..need]
        .iter()
        .map(|o| {
            cells()
                .map(|(r, c)| o.valid(r, c).map_or(0.0, |v| ((v - img.mean) / img.std) as f32))
                .collect()
        })
        .collect();
    Ok(Sample {
        header: header.window(origin.row, origin.col, tile, tile),
        initial,
        gt,
        orthos,
        mask,
        patch_mean: mean,
        pair_id: views.id.clone(),
    })
}

/// Reference to a sample that is materialized on demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRef {
    pub region: usize,
    pub pair: usize,
    pub origin: TileOrigin,
}

/// Lazily materialized training set: every sampled location appears once
/// per stereo pair of its region, so the same DSM patch is seen with
/// different images.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub regions: Vec<Region>,
    pub refs: Vec<SampleRef>,
    pub tile: usize,
    pub variant: Variant,
    pub stats: NormStats,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<Sample> {
        let r = self.refs[index];
        extract_sample(&self.regions[r.region], r.pair, r.origin, self.tile, self.variant, &self.stats)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Sample>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

/// Samples `count_per_region` locations per region and pairs each with
/// every stereo pair of that region.
pub fn build_training_set(
    regions: Vec<Region>,
    count_per_region: usize,
    tile: usize,
    variant: Variant,
    stats: NormStats,
    seed: u64,
) -> Result<TrainingSet> {
    let mut refs = Vec::new();
    for (ri, region) in regions.iter().enumerate() {
        region.validate()?;
        for p in &region.pairs {
            if p.orthos.len() < variant.ortho_count() {
                return Err(Error::Config(format!(
                    "pair {} in region {} has {} ortho-image(s), variant {variant} needs {}",
                    p.id,
                    region.name,
                    p.orthos.len(),
                    variant.ortho_count()
                )));
            }
        }
        let origins = sample_patches(&region.sampling_windows(), count_per_region, tile, seed.wrapping_add(ri as u64))?;
        for origin in origins {
            for pair in 0..region.pairs.len() {
                refs.push(SampleRef { region: ri, pair, origin });
            }
        }
    }
    Ok(TrainingSet { regions, refs, tile, variant, stats })
}

/// On-disk description of one region; relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionManifest {
    pub name: String,
    pub initial: PathBuf,
    pub gt: PathBuf,
    #[serde(default)]
    pub exclusion: Option<PathBuf>,
    #[serde(default)]
    pub pairs: Vec<PairManifest>,
    #[serde(default)]
    pub windows: Vec<Window>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub id: String,
    pub orthos: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub train: Vec<RegionManifest>,
    pub validation: Vec<RegionManifest>,
    pub count_per_region: usize,
    pub validation_count: usize,
    pub tile: usize,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn read_json(path: impl AsRef<Path>) -> Result<DatasetManifest> {
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

impl RegionManifest {
    pub fn load(&self, base: &Path) -> Result<Region> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let region = Region {
            name: self.name.clone(),
            initial: Raster2D::read_ascii(resolve(&self.initial))?,
            gt: Raster2D::read_ascii(resolve(&self.gt))?,
            exclusion: self.exclusion.as_deref().map(|p| crate::raster::read_mask(resolve(p))).transpose()?,
            pairs: self
                .pairs
                .iter()
                .map(|p| {
                    Ok(PairViews {
                        id: p.id.clone(),
                        orthos: p.orthos.iter().map(|o| Raster2D::read_ascii(resolve(o))).collect::<Result<_>>()?,
                    })
                })
                .collect::<Result<_>>()?,
            windows: self.windows.clone(),
        };
        region.validate()?;
        Ok(region)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::DEFAULT_NODATA;

    fn sample(n: usize, orthos: usize) -> Sample {
        let plane = |k: usize| (0..n * n).map(|i| (i * 7 + k * 13) as f32).collect::<Vec<_>>();
        Sample {
            header: GridHeader::new(n, n, 0.0, 0.0, 1.0).unwrap(),
            initial: plane(0),
            gt: plane(1),
            orthos: (0..orthos).map(|k| plane(k + 2)).collect(),
            mask: (0..n * n).map(|i| i % 3 == 0).collect(),
            patch_mean: 4.0,
            pair_id: "a-b".into(),
        }
    }

    #[test]
    fn zero_count_is_empty() {
        let w = [Window { row0: 0, col0: 0, rows: 10, cols: 10 }];
        assert!(sample_patches(&w, 0, 4, 1).unwrap().is_empty());
    }

    #[test]
    fn origins_stay_inside_and_repeat_per_seed() {
        let w = [Window::columns(40, 0..12), Window::columns(40, 20..31)];
        let a = sample_patches(&w, 500, 8, 7).unwrap();
        assert_eq!(a, sample_patches(&w, 500, 8, 7).unwrap());
        assert_ne!(a, sample_patches(&w, 500, 8, 8).unwrap());
        for o in &a {
            assert!(o.row + 8 <= 40);
            let inside = w.iter().any(|w| o.col >= w.col0 && o.col + 8 <= w.col0 + w.cols);
            assert!(inside, "{o:?}");
        }
    }

    #[test]
    fn tile_larger_than_stripe_fails() {
        let w = [Window::columns(100, 0..10)];
        assert!(matches!(sample_patches(&w, 1, 16, 0), Err(Error::Size(_))));
    }

    #[test]
    fn rotation_matches_hand_example() {
        // 1 2     2 4
        // 3 4  -> 1 3   (counter-clockwise)
        let spec = AugmentationSpec { rotation: Rotation::R90, ..AugmentationSpec::IDENTITY };
        assert_eq!(transform_plane(&[1, 2, 3, 4], 2, &spec), vec![2, 4, 1, 3]);
        let fh = AugmentationSpec { flip_h: true, ..AugmentationSpec::IDENTITY };
        assert_eq!(transform_plane(&[1, 2, 3, 4], 2, &fh), vec![2, 1, 4, 3]);
    }

    #[test]
    fn identity_and_group_laws() {
        let s = sample(5, 2);
        assert_eq!(augment(&s, &AugmentationSpec::IDENTITY).unwrap(), s);
        let r90 = AugmentationSpec { rotation: Rotation::R90, ..AugmentationSpec::IDENTITY };
        let r180 = AugmentationSpec { rotation: Rotation::R180, ..AugmentationSpec::IDENTITY };
        let twice = augment(&augment(&s, &r90).unwrap(), &r90).unwrap();
        assert_eq!(twice, augment(&s, &r180).unwrap());
        let swap = AugmentationSpec { swap_views: true, ..AugmentationSpec::IDENTITY };
        assert_eq!(augment(&augment(&s, &swap).unwrap(), &swap).unwrap(), s);
    }

    #[test]
    fn inverse_undoes_every_spec() {
        let s = sample(6, 2);
        let all = AugmentationSpec::all();
        assert_eq!(all.len(), 32);
        for spec in all {
            let there = augment(&s, &spec).unwrap();
            assert_eq!(augment(&there, &spec.inverse()).unwrap(), s, "{spec:?}");
        }
    }

    #[test]
    fn swap_needs_two_views() {
        let swap = AugmentationSpec { swap_views: true, ..AugmentationSpec::IDENTITY };
        assert!(matches!(augment(&sample(4, 1), &swap), Err(Error::Augmentation(_))));
    }

    fn region(pairs: usize) -> Region {
        let h = GridHeader::new(16, 16, 0.0, 0.0, 1.0).unwrap();
        let dsm = Raster2D::from_fn(h, DEFAULT_NODATA, |r, c| (r + c) as f64).unwrap();
        let gt = dsm.map_valid(|v| v + 1.0);
        let img = Raster2D::from_fn(h, DEFAULT_NODATA, |r, _| r as f64).unwrap();
        Region {
            name: "r".into(),
            initial: dsm,
            gt,
            exclusion: None,
            pairs: (0..pairs)
                .map(|k| PairViews { id: format!("p{k}"), orthos: vec![img.clone(), img.map_valid(|v| v + k as f64)] })
                .collect(),
            windows: Vec::new(),
        }
    }

    #[test]
    fn each_location_is_emitted_once_per_pair() {
        let stats = NormStats::dsm_only(2.0).unwrap();
        let set = build_training_set(vec![region(4)], 1, 8, Variant::Stereo, stats, 3).unwrap();
        assert_eq!(set.len(), 4);
        let samples: Vec<Sample> = set.iter().collect::<Result<_>>().unwrap();
        for s in &samples[1..] {
            assert_eq!(s.initial, samples[0].initial);
            assert_eq!(s.header, samples[0].header);
        }
        assert_ne!(samples[0].orthos[1], samples[1].orthos[1]);
        let none = build_training_set(vec![region(0)], 5, 8, Variant::Stereo, stats, 3).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn ground_truth_shares_the_initial_center() {
        let stats = NormStats::dsm_only(2.0).unwrap();
        let r = region(1);
        let s = extract_sample(&r, 0, TileOrigin { row: 2, col: 3 }, 4, Variant::Stereo, &stats).unwrap();
        assert_eq!(s.patch_mean, 8.0);
        for (a, b) in s.initial.iter().zip(&s.gt) {
            assert_eq!(b - a, 0.5);
        }
    }
}
