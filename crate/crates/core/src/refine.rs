//! Full-raster inference.
//!
//! The raster is covered by tiles overlapping by half a tile. Each tile is
//! normalized on its own mean, the predicted residual is scaled back to
//! meters, and overlapping residuals are blended with separable linear
//! ramps that fall towards the tile borders. The blended residual is added
//! to the untouched input heights, so a zero residual reproduces the input
//! exactly.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{forward, BnMode, Tensor};
use crate::ortho::{orthorectify, ParallelCamera};
use crate::raster::Raster2D;

/// Tiles evaluated per forward pass.
const TILE_BATCH: usize = 8;

/// Start offsets covering `len` cells with tiles of `tile` and stride
/// `tile / 2`; the last tile is flush with the end.
pub fn tile_starts(len: usize, tile: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let stride = (tile / 2).max(1);
    let mut starts: Vec<usize> = (0..=len - tile).step_by(stride).collect();
    if *starts.last().expect("nonempty") != len - tile {
        starts.push(len - tile);
    }
    starts
}

/// Blending weight of position `i` in a tile of `tile` cells.
fn ramp(i: usize, tile: usize) -> f64 {
    let a = i as f64 + 0.5;
    a.min(tile as f64 - a)
}

/// Refines `dsm` with the checkpoint's network, using `orthos` (already on
/// the DSM grid) as image channels.
pub fn refine(ckpt: &Checkpoint, dsm: &Raster2D, orthos: &[Raster2D]) -> Result<Raster2D> {
    let cfg = ckpt.config();
    let variant = cfg.variant()?;
    if orthos.len() != variant.ortho_count() {
        return Err(Error::Config(format!(
            "checkpoint expects {} ortho-image(s), got {}",
            variant.ortho_count(),
            orthos.len()
        )));
    }
    for o in orthos {
        dsm.header().ensure_same(o.header(), "ortho-image")?;
    }
    if dsm.valid_count() == 0 {
        return Err(Error::InvalidInput("DSM has no valid cell".into()));
    }
    let (rows, cols) = (dsm.rows(), dsm.cols());
    let tile = cfg.tile;
    let scale = ckpt.norm.dsm_scale;
    let img = ckpt.norm.image_stats();

    // Rasters smaller than a tile are embedded in a tile-sized canvas by
    // clamping coordinates to the nearest edge.
    let (crows, ccols) = (rows.max(tile), cols.max(tile));
    let clamp = |r: usize, c: usize| (r.min(rows - 1), c.min(cols - 1));

    let mut origins = Vec::new();
    for r in tile_starts(crows, tile) {
        for c in tile_starts(ccols, tile) {
            origins.push((r, c));
        }
    }
    let mut acc = vec![0.0f64; rows * cols];
    let mut wsum = vec![0.0f64; rows * cols];
    let channels = cfg.input_channels;
    for batch in origins.chunks(TILE_BATCH) {
        let mut x = Tensor::<f32>::zeros(channels, batch.len(), tile, tile);
        for (n, &(r0, c0)) in batch.iter().enumerate() {
            let cell = |i: usize, j: usize| clamp(r0 + i, c0 + j);
            let (mut sum, mut count) = (0.0, 0usize);
            for i in 0..tile {
                for j in 0..tile {
                    let (r, c) = cell(i, j);
                    if let Some(v) = dsm.valid(r, c) {
                        sum += v;
                        count += 1;
                    }
                }
            }
            let mean = if count > 0 { sum / count as f64 } else { dsm.valid_mean().unwrap_or(0.0) };
            let plane = x.sample_plane_mut(0, n);
            for i in 0..tile {
                for j in 0..tile {
                    let (r, c) = cell(i, j);
                    plane[i * tile + j] = dsm.valid(r, c).map_or(0.0, |v| ((v - mean) / scale) as f32);
                }
            }
            for (k, o) in orthos.iter().enumerate() {
                let plane = x.sample_plane_mut(k + 1, n);
                for i in 0..tile {
                    for j in 0..tile {
                        let (r, c) = cell(i, j);
                        plane[i * tile + j] = o.valid(r, c).map_or(0.0, |v| ((v - img.mean) / img.std) as f32);
                    }
                }
            }
        }
        let out = forward(&ckpt.weights, &x, BnMode::Eval)?;
        for (n, &(r0, c0)) in batch.iter().enumerate() {
            let res = out.residual.sample_plane(0, n);
            for i in 0..tile {
                let r = r0 + i;
                if r >= rows {
                    break;
                }
                for j in 0..tile {
                    let c = c0 + j;
                    if c >= cols {
                        break;
                    }
                    let w = ramp(i, tile) * ramp(j, tile);
                    acc[r * cols + c] += w * (res[i * tile + j] as f64 * scale);
                    wsum[r * cols + c] += w;
                }
            }
        }
    }
    let values: Vec<f64> = dsm
        .values()
        .iter()
        .enumerate()
        .map(|(k, &h)| if h == dsm.nodata() { h } else { h + acc[k] / wsum[k] })
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("refined DSM contains non-finite heights".into()));
    }
    Raster2D::new(*dsm.header(), dsm.nodata(), values)
}

/// Cascade of networks: before every stage the images are re-rectified
/// against the current DSM.
pub fn refine_iterative(
    stages: &[Checkpoint],
    dsm: &Raster2D,
    images: &[Raster2D],
    cameras: &[ParallelCamera],
) -> Result<Raster2D> {
    if stages.is_empty() {
        return Err(Error::Config("no checkpoint given".into()));
    }
    if cameras.len() != images.len() {
        return Err(Error::Config(format!(
            "{} image(s) but {} camera(s); every image needs its camera model",
            images.len(),
            cameras.len()
        )));
    }
    let mut current = dsm.clone();
    for (k, ckpt) in stages.iter().enumerate() {
        let need = ckpt.config().variant()?.ortho_count();
        if images.len() < need {
            return Err(Error::Config(format!(
                "stage {} needs {need} image(s) with cameras, got {}",
                k + 1,
                images.len()
            )));
        }
        let orthos = images[..need]
            .iter()
            .zip(cameras)
            .map(|(img, cam)| orthorectify(img, &current, cam))
            .collect::<Result<Vec<_>>>()?;
        current = refine(ckpt, &current, &orthos)?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_cover_with_half_overlap() {
        assert_eq!(tile_starts(64, 64), vec![0]);
        assert_eq!(tile_starts(10, 64), vec![0]);
        assert_eq!(tile_starts(128, 64), vec![0, 32, 64]);
        assert_eq!(tile_starts(100, 64), vec![0, 32, 36]);
    }

    #[test]
    fn ramps_sum_to_a_constant_inside() {
        let t = 16;
        for i in 0..t / 2 {
            assert_eq!(ramp(i + t / 2, t) + ramp(i, t), t as f64 / 2.0);
        }
    }
}
