use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use dsmrefine::acquisition::{read_metadata_csv, select_pairs, SelectionCriteria, SelectionProfile};
use dsmrefine::checkpoint::Checkpoint;
use dsmrefine::evaluation::{evaluate, format_table, height_band_stats, DEFAULT_BANDS};
use dsmrefine::fusion::{fuse_point_cloud, read_xyz, FusionParams};
use dsmrefine::nn::{UNetConfig, Variant};
use dsmrefine::normalization::{fit_dsm_scale, fit_image_stats, NormStats};
use dsmrefine::ortho::{orthorectify, ParallelCamera};
use dsmrefine::raster::read_mask;
use dsmrefine::refine::{refine as refine_dsm, refine_iterative};
use dsmrefine::sampling::{build_training_set, sample_patches, DatasetManifest, Region};
use dsmrefine::synthcity::{synthesize, SynthConfig};
use dsmrefine::training::{train as train_network, write_loss_history, TrainConfig};
use dsmrefine::{GridHeader, Raster2D};

use crate::GlobalArgs;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] dsmrefine::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Run(dsmrefine::Error::Config(_)) => 2,
            CliError::Run(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Run(e) => e.kind(),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

fn required<T>(value: Option<T>, what: &str) -> Result<T> {
    value.ok_or_else(|| CliError::Usage(format!("missing {what} (flag or config field)")))
}

fn out_dir(g: &GlobalArgs) -> Result<&Path> {
    fs::create_dir_all(&g.out).map_err(|e| dsmrefine::Error::Io { path: g.out.clone(), source: e })?;
    Ok(&g.out)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(dsmrefine::Error::from)?;
    fs::write(path, text + "\n").map_err(|e| dsmrefine::Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

// synth

#[derive(Debug, Args)]
pub struct SynthArgs {}

pub fn synth(g: &GlobalArgs, _a: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = load_config(g.config.as_deref())?;
    if let Some(seed) = g.seed {
        cfg = cfg.with_seed(seed);
    }
    let bundle = synthesize(&cfg)?;
    let dir = out_dir(g)?;
    bundle.write_dir(dir, &cfg)?;
    info!("wrote scene with {} buildings to {}", bundle.scene.buildings.len(), dir.display());
    Ok(())
}

// pairs

#[derive(Debug, Args)]
pub struct PairsArgs {
    /// Image metadata CSV.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// `matching` or `refinement`.
    #[arg(long)]
    pub profile: Option<SelectionProfile>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PairsConfig {
    meta: Option<PathBuf>,
    profile: Option<SelectionProfile>,
    criteria: Option<SelectionCriteria>,
}

pub fn pairs(g: &GlobalArgs, a: &PairsArgs) -> Result<()> {
    let cfg: PairsConfig = load_config(g.config.as_deref())?;
    let meta = required(a.meta.clone().or(cfg.meta), "--meta")?;
    let criteria = match (a.profile, cfg.criteria) {
        (Some(p), _) => SelectionCriteria::for_profile(p),
        (None, Some(c)) => c,
        (None, None) => SelectionCriteria::for_profile(cfg.profile.unwrap_or(SelectionProfile::Refinement)),
    };
    criteria.validate()?;
    let images = read_metadata_csv(&meta)?;
    let selected = select_pairs(&images, &criteria);
    if !g.quiet {
        println!("{:<24} {:>12} {:>10} {:>9}", "pair", "intersection", "incidence", "sun diff");
        for p in &selected {
            println!("{:<24} {:>12.2} {:>10.2} {:>9.2}", p.id(), p.intersection_angle, p.mean_incidence, p.sun_diff);
        }
    }
    write_json(&selected, &out_dir(g)?.join("pairs.json"))?;
    info!("{} images form {} pairs", images.len(), selected.len());
    Ok(())
}

// fuse

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Whitespace-separated `x y z` points.
    #[arg(long)]
    pub points: Option<PathBuf>,
    #[arg(long)]
    pub cell_size: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FuseConfig {
    points: Option<PathBuf>,
    cell_size: Option<f64>,
    /// Output grid; the points' bounding grid when absent.
    grid: Option<GridHeader>,
    params: FusionParams,
}

pub fn fuse(g: &GlobalArgs, a: &FuseArgs) -> Result<()> {
    let cfg: FuseConfig = load_config(g.config.as_deref())?;
    cfg.params.validate()?;
    let points = required(a.points.clone().or(cfg.points), "--points")?;
    let cloud = read_xyz(&points)?;
    let grid = match cfg.grid {
        Some(h) => h,
        None => cloud.bounding_grid(required(a.cell_size.or(cfg.cell_size), "--cell-size or grid")?)?,
    };
    let dsm = fuse_point_cloud(&cloud, &grid, &cfg.params)?;
    dsm.write_ascii(out_dir(g)?.join("dsm.asc"))?;
    info!("fused {} points into a {}x{} grid", cloud.len(), grid.rows, grid.cols);
    Ok(())
}

// ortho

#[derive(Debug, Args)]
pub struct OrthoArgs {
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub dsm: Option<PathBuf>,
    /// Camera JSON.
    #[arg(long)]
    pub camera: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct OrthoConfig {
    image: Option<PathBuf>,
    dsm: Option<PathBuf>,
    camera: Option<PathBuf>,
}

pub fn ortho(g: &GlobalArgs, a: &OrthoArgs) -> Result<()> {
    let cfg: OrthoConfig = load_config(g.config.as_deref())?;
    let image = Raster2D::read_ascii(required(a.image.clone().or(cfg.image), "--image")?)?;
    let dsm = Raster2D::read_ascii(required(a.dsm.clone().or(cfg.dsm), "--dsm")?)?;
    let camera = ParallelCamera::read_json(required(a.camera.clone().or(cfg.camera), "--camera")?)?;
    orthorectify(&image, &dsm, &camera)?.write_ascii(out_dir(g)?.join("ortho.asc"))?;
    Ok(())
}

// normfit

#[derive(Debug, Args)]
pub struct NormfitArgs {
    /// Dataset manifest JSON.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct NormfitConfig {
    manifest: Option<PathBuf>,
    /// DSM tiles drawn per region for the scale estimate.
    samples: usize,
}

impl Default for NormfitConfig {
    fn default() -> Self {
        NormfitConfig { manifest: None, samples: 500 }
    }
}

fn load_regions(manifest: &Path) -> Result<(DatasetManifest, Vec<Region>, Vec<Region>)> {
    let m = DatasetManifest::read_json(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let train = m.train.iter().map(|r| r.load(base)).collect::<dsmrefine::Result<Vec<_>>>()?;
    let val = m.validation.iter().map(|r| r.load(base)).collect::<dsmrefine::Result<Vec<_>>>()?;
    Ok((m, train, val))
}

/// Scale from sampled training tiles, image statistics from the training
/// windows of every ortho-image.
fn fit_norm(regions: &[Region], samples: usize, tile: usize, seed: u64) -> Result<NormStats> {
    let mut patches = Vec::new();
    let mut crops = Vec::new();
    for (k, region) in regions.iter().enumerate() {
        let windows = region.sampling_windows();
        for o in sample_patches(&windows, samples, tile, seed.wrapping_add(k as u64))? {
            patches.push(region.initial.extract_tile(o.row, o.col, tile)?);
        }
        for w in &windows {
            for pair in &region.pairs {
                for img in &pair.orthos {
                    crops.push(img.extract_window(w.row0, w.col0, w.rows, w.cols)?);
                }
            }
        }
    }
    let scale = fit_dsm_scale(&patches)?;
    if crops.is_empty() {
        return Ok(NormStats::dsm_only(scale)?);
    }
    Ok(NormStats::new(scale, fit_image_stats(&crops)?)?)
}

pub fn normfit(g: &GlobalArgs, a: &NormfitArgs) -> Result<()> {
    let cfg: NormfitConfig = load_config(g.config.as_deref())?;
    let manifest = required(a.manifest.clone().or(cfg.manifest), "--manifest")?;
    let (m, train, _) = load_regions(&manifest)?;
    let seed = g.seed.unwrap_or(m.seed);
    let stats = fit_norm(&train, cfg.samples, m.tile, seed)?;
    stats.write_json(out_dir(g)?.join("norm.json"))?;
    info!("dsm scale {:.3} m", stats.dsm_scale);
    Ok(())
}

// train

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// `none`, `mono` or `stereo`.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Precomputed normalization statistics (from `normfit`).
    #[arg(long)]
    pub norm: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainRunConfig {
    manifest: Option<PathBuf>,
    model: UNetConfig,
    train: TrainConfig,
    norm: Option<PathBuf>,
    norm_samples: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            manifest: None,
            model: UNetConfig::small(Variant::Stereo),
            train: TrainConfig::default(),
            norm: None,
            norm_samples: 500,
        }
    }
}

#[derive(Serialize)]
struct TrainSummary {
    model: UNetConfig,
    norm: NormStats,
    epochs: usize,
    best_epoch: usize,
    best_val_loss: f64,
    stop: dsmrefine::training::StopReason,
}

pub fn train(g: &GlobalArgs, a: &TrainArgs) -> Result<()> {
    let mut cfg: TrainRunConfig = load_config(g.config.as_deref())?;
    if let Some(v) = a.variant {
        cfg.model.input_channels = v.input_channels();
    }
    if let Some(n) = a.epochs {
        cfg.train.max_epochs = n;
    }
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    let variant = cfg.model.variant()?;
    let manifest = required(a.manifest.clone().or(cfg.manifest), "--manifest")?;
    let (m, train_regions, val_regions) = load_regions(&manifest)?;
    if m.tile != cfg.model.tile {
        return Err(CliError::Usage(format!("manifest tile {} differs from model tile {}", m.tile, cfg.model.tile)));
    }
    let norm = match a.norm.clone().or(cfg.norm) {
        Some(p) => NormStats::read_json(p)?,
        None => fit_norm(&train_regions, cfg.norm_samples, m.tile, cfg.train.seed)?,
    };
    let seed = cfg.train.seed;
    let train_set = build_training_set(train_regions, m.count_per_region, m.tile, variant, norm, seed)?;
    let val_set = build_training_set(val_regions, m.validation_count, m.tile, variant, norm, seed.wrapping_add(101))?;
    info!("{} training and {} validation samples", train_set.len(), val_set.len());

    let start = Instant::now();
    let outcome = train_network(&cfg.model, &train_set, &val_set, &cfg.train)?;
    info!("trained in {:.1}s, best epoch {}", start.elapsed().as_secs_f64(), outcome.best_epoch);

    let dir = out_dir(g)?;
    Checkpoint::new(outcome.best.clone(), norm).save(dir.join("checkpoint.bin"))?;
    write_loss_history(&outcome.history, dir.join("loss_history.csv"))?;
    let summary = TrainSummary {
        model: cfg.model,
        norm,
        epochs: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        stop: outcome.stop,
    };
    write_json(&summary, &dir.join("train_summary.json"))
}

// refine

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Checkpoint; repeat for a cascade.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub dsm: Option<PathBuf>,
    /// Ortho-image already rectified on the DSM (single stage only).
    #[arg(long = "ortho")]
    pub orthos: Vec<PathBuf>,
    /// Raw image, re-rectified before each cascade stage.
    #[arg(long = "image")]
    pub images: Vec<PathBuf>,
    /// Camera JSON for the image at the same position.
    #[arg(long = "camera")]
    pub cameras: Vec<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RefineConfig {
    checkpoints: Vec<PathBuf>,
    dsm: Option<PathBuf>,
    orthos: Vec<PathBuf>,
    images: Vec<PathBuf>,
    cameras: Vec<PathBuf>,
}

fn prefer(flag: &[PathBuf], config: Vec<PathBuf>) -> Vec<PathBuf> {
    if flag.is_empty() {
        config
    } else {
        flag.to_vec()
    }
}

fn read_rasters(paths: &[PathBuf]) -> Result<Vec<Raster2D>> {
    Ok(paths.iter().map(Raster2D::read_ascii).collect::<dsmrefine::Result<_>>()?)
}

pub fn refine(g: &GlobalArgs, a: &RefineArgs) -> Result<()> {
    let cfg: RefineConfig = load_config(g.config.as_deref())?;
    let checkpoints = prefer(&a.checkpoints, cfg.checkpoints);
    if checkpoints.is_empty() {
        return Err(CliError::Usage("missing --checkpoint (flag or config field)".into()));
    }
    let stages = checkpoints.iter().map(Checkpoint::load).collect::<dsmrefine::Result<Vec<_>>>()?;
    let dsm = Raster2D::read_ascii(required(a.dsm.clone().or(cfg.dsm), "--dsm")?)?;
    let orthos = prefer(&a.orthos, cfg.orthos);
    let images = prefer(&a.images, cfg.images);
    let refined = if images.is_empty() {
        if stages.len() > 1 {
            return Err(CliError::Usage("a cascade needs --image and --camera to re-rectify between stages".into()));
        }
        refine_dsm(&stages[0], &dsm, &read_rasters(&orthos)?)?
    } else {
        let cameras = prefer(&a.cameras, cfg.cameras)
            .iter()
            .map(ParallelCamera::read_json)
            .collect::<dsmrefine::Result<Vec<_>>>()?;
        refine_iterative(&stages, &dsm, &read_rasters(&images)?, &cameras)?
    };
    refined.write_ascii(out_dir(g)?.join("refined.asc"))?;
    Ok(())
}

// eval

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Building mask; enables the per-class rows.
    #[arg(long)]
    pub buildings: Option<PathBuf>,
    /// Cells to leave out of every statistic.
    #[arg(long)]
    pub exclude: Option<PathBuf>,
    /// Bare-terrain DSM; enables the height-band rows.
    #[arg(long)]
    pub terrain: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    pred: Option<PathBuf>,
    reference: Option<PathBuf>,
    buildings: Option<PathBuf>,
    exclude: Option<PathBuf>,
    terrain: Option<PathBuf>,
    bands: Option<Vec<f64>>,
}

pub fn eval(g: &GlobalArgs, a: &EvalArgs) -> Result<()> {
    let cfg: EvalConfig = load_config(g.config.as_deref())?;
    let pred = Raster2D::read_ascii(required(a.pred.clone().or(cfg.pred), "--pred")?)?;
    let reference = Raster2D::read_ascii(required(a.reference.clone().or(cfg.reference), "--ref")?)?;
    let buildings = a.buildings.clone().or(cfg.buildings).map(read_mask).transpose()?;
    let exclude = a.exclude.clone().or(cfg.exclude).map(read_mask).transpose()?;
    let mut report = evaluate(&pred, &reference, buildings.as_ref(), exclude.as_ref())?;
    if let Some(t) = a.terrain.clone().or(cfg.terrain) {
        let terrain = Raster2D::read_ascii(t)?;
        let Some(b) = buildings.as_ref() else {
            return Err(CliError::Usage("height bands need --buildings".into()));
        };
        let edges = cfg.bands.unwrap_or_else(|| DEFAULT_BANDS.to_vec());
        report.height_bands = height_band_stats(&pred, &reference, &terrain, b, &edges)?;
    }
    write_json(&report, &out_dir(g)?.join("report.json"))?;
    if !g.quiet {
        print!("{}", format_table(&[("prediction", &report)]));
    }
    Ok(())
}
