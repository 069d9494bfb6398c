//! Train-and-evaluate runs on synthetic scenes.
//!
//! The scene is cut into vertical stripes. One stripe is held out for
//! testing, one supplies validation tiles and the rest supply training
//! tiles. Images are ortho-rectified against the initial DSM, as they would
//! be in practice.

use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, mae, MetricsReport};
use crate::nn::{UNetConfig, Variant};
use crate::normalization::{fit_dsm_scale, fit_image_stats, NormStats};
use crate::ortho::orthorectify;
use crate::raster::{stripe_split, Mask, Raster2D};
use crate::refine::{refine, refine_iterative};
use crate::sampling::{build_training_set, sample_patches, PairViews, Region, Window};
use crate::synthcity::{synthesize, SynthBundle, SynthConfig};
use crate::training::{train, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub stripes: usize,
    pub test_stripe: usize,
    pub validation_stripe: usize,
    /// Network shape; the variant follows from `input_channels`.
    pub model: UNetConfig,
    pub train_patches: usize,
    pub validation_patches: usize,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synth: SynthConfig::default(),
            stripes: 5,
            test_stripe: 4,
            validation_stripe: 3,
            model: UNetConfig::small(Variant::Stereo),
            train_patches: 2000,
            validation_patches: 200,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn with_variant(mut self, variant: Variant) -> ExperimentConfig {
        self.model.input_channels = variant.input_channels();
        self
    }
}

/// A synthesized scene with its images rectified on the initial DSM.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub bundle: SynthBundle,
    pub orthos: Vec<Raster2D>,
    pub stripes: Vec<Range<usize>>,
    pub test_stripe: usize,
    pub validation_stripe: usize,
}

pub fn prepare_scene(cfg: &ExperimentConfig) -> Result<PreparedScene> {
    if cfg.test_stripe >= cfg.stripes || cfg.validation_stripe >= cfg.stripes || cfg.test_stripe == cfg.validation_stripe {
        return Err(Error::Config(format!(
            "test stripe {} and validation stripe {} must be distinct and below {}",
            cfg.test_stripe, cfg.validation_stripe, cfg.stripes
        )));
    }
    let bundle = synthesize(&cfg.synth)?;
    let orthos = bundle
        .views
        .iter()
        .map(|v| orthorectify(&v.image, &bundle.initial, &v.camera))
        .collect::<Result<Vec<_>>>()?;
    let stripes = stripe_split(bundle.initial.cols(), cfg.stripes)?;
    Ok(PreparedScene { bundle, orthos, stripes, test_stripe: cfg.test_stripe, validation_stripe: cfg.validation_stripe })
}

/// The held-out stripe cut out of every raster.
#[derive(Debug, Clone)]
pub struct HeldOut {
    pub initial: Raster2D,
    pub gt: Raster2D,
    pub orthos: Vec<Raster2D>,
    pub building_mask: Mask,
    pub vegetation_mask: Mask,
    pub terrain: Raster2D,
}

impl PreparedScene {
    fn rows(&self) -> usize {
        self.bundle.initial.rows()
    }

    /// Maximal runs of adjacent training stripes.
    pub fn train_windows(&self) -> Vec<Window> {
        let mut out: Vec<Window> = Vec::new();
        let mut prev: Option<usize> = None;
        for (k, s) in self.stripes.iter().enumerate() {
            if k == self.test_stripe || k == self.validation_stripe {
                continue;
            }
            match out.last_mut() {
                Some(w) if prev == Some(k - 1) => w.cols += s.len(),
                _ => out.push(Window::columns(self.rows(), s.clone())),
            }
            prev = Some(k);
        }
        out
    }

    pub fn validation_window(&self) -> Window {
        Window::columns(self.rows(), self.stripes[self.validation_stripe].clone())
    }

    pub fn region(&self, name: &str, initial: &Raster2D, orthos: &[Raster2D], windows: Vec<Window>) -> Region {
        Region {
            name: name.into(),
            initial: initial.clone(),
            gt: self.bundle.scene.gt.clone(),
            exclusion: None,
            pairs: vec![PairViews { id: "synthetic".into(), orthos: orthos.to_vec() }],
            windows,
        }
    }

    /// Scale from training tiles of `initial`; image statistics from the
    /// training part of `orthos`.
    pub fn fit_norm(&self, initial: &Raster2D, orthos: &[Raster2D], tile: usize, seed: u64) -> Result<NormStats> {
        let windows = self.train_windows();
        let origins = sample_patches(&windows, 500, tile, seed)?;
        let patches = origins
            .iter()
            .map(|o| initial.extract_tile(o.row, o.col, tile))
            .collect::<Result<Vec<_>>>()?;
        let scale = fit_dsm_scale(&patches)?;
        if orthos.is_empty() {
            return NormStats::dsm_only(scale);
        }
        let crops = windows
            .iter()
            .flat_map(|w| orthos.iter().map(move |o| o.extract_window(w.row0, w.col0, w.rows, w.cols)))
            .collect::<Result<Vec<_>>>()?;
        NormStats::new(scale, fit_image_stats(&crops)?)
    }

    pub fn held_out(&self) -> Result<HeldOut> {
        let s = &self.stripes[self.test_stripe];
        let (r, c, n) = (self.rows(), s.start, s.len());
        let scene = &self.bundle.scene;
        Ok(HeldOut {
            initial: self.bundle.initial.extract_window(0, c, r, n)?,
            gt: scene.gt.extract_window(0, c, r, n)?,
            orthos: self.orthos.iter().map(|o| o.extract_window(0, c, r, n)).collect::<Result<_>>()?,
            building_mask: scene.building_mask.extract_window(0, c, r, n)?,
            vegetation_mask: scene.vegetation_mask.extract_window(0, c, r, n)?,
            terrain: scene.terrain.extract_window(0, c, r, n)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub checkpoint: Checkpoint,
    pub outcome: TrainOutcome,
    pub seconds: f64,
}

/// Trains a network on `initial` (full scene) with matching `orthos`.
pub fn train_on(
    prep: &PreparedScene,
    initial: &Raster2D,
    orthos: &[Raster2D],
    model: &UNetConfig,
    cfg: &ExperimentConfig,
) -> Result<TrainedModel> {
    let start = Instant::now();
    let variant = model.variant()?;
    let orthos = &orthos[..variant.ortho_count().min(orthos.len())];
    let seed = cfg.train.seed;
    let norm = prep.fit_norm(initial, orthos, model.tile, seed)?;
    let train_region = prep.region("train", initial, orthos, prep.train_windows());
    let val_region = prep.region("validation", initial, orthos, vec![prep.validation_window()]);
    let train_set = build_training_set(vec![train_region], cfg.train_patches, model.tile, variant, norm, seed)?;
    let val_set =
        build_training_set(vec![val_region], cfg.validation_patches, model.tile, variant, norm, seed.wrapping_add(101))?;
    let outcome = train(model, &train_set, &val_set, &cfg.train)?;
    let checkpoint = Checkpoint::new(outcome.best.clone(), norm);
    Ok(TrainedModel { checkpoint, outcome, seconds: start.elapsed().as_secs_f64() })
}

#[derive(Debug, Clone)]
pub struct Evaluated {
    pub refined: Raster2D,
    pub report: MetricsReport,
    pub vegetation_mae: Option<f64>,
}

pub fn evaluate_held_out(held: &HeldOut, dsm: &Raster2D) -> Result<Evaluated> {
    let report = evaluate(dsm, &held.gt, Some(&held.building_mask), None)?;
    let vegetation_mae =
        if held.vegetation_mask.count() > 0 { Some(mae(dsm, &held.gt, Some(&held.vegetation_mask))?) } else { None };
    Ok(Evaluated { refined: dsm.clone(), report, vegetation_mae })
}

/// Refines the held-out stripe with one network.
pub fn refine_held_out(held: &HeldOut, ckpt: &Checkpoint) -> Result<Evaluated> {
    let n = ckpt.config().variant()?.ortho_count();
    let refined = refine(ckpt, &held.initial, &held.orthos[..n])?;
    evaluate_held_out(held, &refined)
}

/// Refines the held-out stripe with a cascade, re-rectifying the full
/// images against the current DSM before every stage.
pub fn refine_held_out_cascade(prep: &PreparedScene, held: &HeldOut, stages: &[Checkpoint]) -> Result<Evaluated> {
    let images: Vec<Raster2D> = prep.bundle.views.iter().map(|v| v.image.clone()).collect();
    let cameras: Vec<_> = prep.bundle.views.iter().map(|v| v.camera).collect();
    let refined = refine_iterative(stages, &held.initial, &images, &cameras)?;
    evaluate_held_out(held, &refined)
}

/// Full-scene output of `ckpt` and the images re-rectified on it, as
/// input for a second cascade stage.
pub fn next_stage_inputs(prep: &PreparedScene, ckpt: &Checkpoint, current: &Raster2D, orthos: &[Raster2D]) -> Result<(Raster2D, Vec<Raster2D>)> {
    let n = ckpt.config().variant()?.ortho_count();
    let refined = refine(ckpt, current, &orthos[..n])?;
    let orthos = prep
        .bundle
        .views
        .iter()
        .map(|v| orthorectify(&v.image, &refined, &v.camera))
        .collect::<Result<Vec<_>>>()?;
    Ok((refined, orthos))
}
