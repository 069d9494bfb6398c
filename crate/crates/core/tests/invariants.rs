use proptest::prelude::*;

use dsmrefine::checkpoint::Checkpoint;
use dsmrefine::nn::{UNetConfig, Variant};
use dsmrefine::normalization::{fit_dsm_scale, normalize_dsm_patch, NormStats};
use dsmrefine::ortho::{orthorectify, ParallelCamera};
use dsmrefine::raster::{format_ascii_grid, DEFAULT_NODATA};
use dsmrefine::refine::{refine, tile_starts};
use dsmrefine::sampling::{augment, AugmentationSpec, Sample};
use dsmrefine::synthcity::{synthesize, SynthConfig};
use dsmrefine::{GridHeader, Raster2D};

fn raster(rows: usize, cols: usize, cell: f64) -> impl Strategy<Value = Raster2D> {
    prop::collection::vec(prop::option::weighted(0.95, 200.0..600.0f64), rows * cols).prop_map(move |v| {
        let h = GridHeader::new(rows, cols, 5000.0, 8000.0, cell).unwrap();
        Raster2D::new(h, DEFAULT_NODATA, v.into_iter().map(|x| x.unwrap_or(DEFAULT_NODATA)).collect()).unwrap()
    })
}

fn dyadic_patch() -> impl Strategy<Value = Raster2D> {
    prop::sample::select(vec![(4usize, 4usize), (8, 8), (2, 16), (16, 4)]).prop_flat_map(|(r, c)| {
        prop::collection::vec(-4000i32..4000, r * c).prop_map(move |v| {
            let h = GridHeader::new(r, c, 0.0, 0.0, 1.0).unwrap();
            Raster2D::new(h, DEFAULT_NODATA, v.into_iter().map(|k| k as f64 / 4.0).collect()).unwrap()
        })
    })
}

fn sample(size: usize) -> impl Strategy<Value = Sample> {
    let plane = move || prop::collection::vec(-2.0f32..2.0, size * size);
    (plane(), plane(), plane(), plane(), prop::collection::vec(any::<bool>(), size * size), -50.0..50.0f64).prop_map(
        move |(initial, gt, a, b, mask, patch_mean)| Sample {
            header: GridHeader::new(size, size, 0.0, 0.0, 1.0).unwrap(),
            initial,
            gt,
            orthos: vec![a, b],
            mask,
            patch_mean,
            pair_id: "l+r".into(),
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tiles_cover_every_cell_with_half_overlap(len in 1usize..400, tile in 2usize..80) {
        let starts = tile_starts(len, tile);
        prop_assert_eq!(starts[0], 0);
        let end = starts.last().unwrap() + tile;
        prop_assert!(end >= len);
        for w in starts.windows(2) {
            prop_assert!(w[1] > w[0] && w[1] - w[0] <= tile / 2);
        }
        if len >= tile {
            prop_assert_eq!(end, len);
        }
    }

    #[test]
    fn zero_head_refinement_is_identity(
        dsm in (3usize..50, 3usize..50).prop_flat_map(|(r, c)| raster(r, c, 0.5)),
        seed in any::<u64>(),
        scale in 0.5..30.0f64,
    ) {
        let cfg = UNetConfig { depth: 2, base_filters: 4, max_filters: 8, tile: 16, ..UNetConfig::small(Variant::None) };
        let ckpt = Checkpoint::identity(&cfg, NormStats::dsm_only(scale).unwrap(), seed).unwrap();
        let out = refine(&ckpt, &dsm, &[]).unwrap();
        prop_assert!(out.values().iter().zip(dsm.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn normalization_ignores_integer_offsets(p in dyadic_patch(), c in -5000i32..5000) {
        let stats = NormStats::dsm_only(7.0).unwrap();
        let (a, ma) = normalize_dsm_patch(&p, &stats).unwrap();
        let (b, mb) = normalize_dsm_patch(&p.map_valid(|v| v + c as f64), &stats).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(mb - ma, c as f64);
    }

    #[test]
    fn scale_is_positive_and_offset_free(p in prop::collection::vec(dyadic_patch(), 3..10), c in -300i32..300) {
        let base = fit_dsm_scale(&p);
        let shifted: Vec<Raster2D> = p.iter().map(|x| x.map_valid(|v| v + c as f64)).collect();
        match base {
            Ok(s) => {
                prop_assert!(s > 0.0);
                prop_assert_eq!(fit_dsm_scale(&shifted).unwrap(), s);
            }
            Err(_) => prop_assert!(fit_dsm_scale(&shifted).is_err()),
        }
    }

    #[test]
    fn augmentation_inverts(s in sample(6), k in 0usize..32) {
        let spec = AugmentationSpec::all()[k];
        let there = augment(&s, &spec).unwrap();
        prop_assert_eq!(augment(&there, &spec.inverse()).unwrap(), s);
    }

    #[test]
    fn nadir_ortho_is_identity(img in raster(9, 7, 1.0), dsm in raster(9, 7, 1.0)) {
        let cam = ParallelCamera::aligned_with(img.header(), 0.0, 0.0).unwrap();
        let dsm = Raster2D::new(*img.header(), DEFAULT_NODATA, dsm.values().iter().map(|v| if *v == DEFAULT_NODATA { 0.0 } else { *v }).collect()).unwrap();
        prop_assert_eq!(orthorectify(&img, &dsm, &cam).unwrap(), img);
    }
}

#[test]
fn synthesis_is_reproducible() {
    let mut cfg = SynthConfig::default().with_seed(42);
    cfg.scene.extent = 40.0;
    cfg.scene.footprint = (6.0, 10.0);
    cfg.scene.building_density = 0.15;
    let text = |c: &SynthConfig| {
        let b = synthesize(c).unwrap();
        let mut s = format_ascii_grid(&b.scene.gt) + &format_ascii_grid(&b.initial);
        for v in &b.views {
            s += &format_ascii_grid(&v.image);
        }
        s
    };
    let first = text(&cfg);
    assert_eq!(first, text(&cfg));
    assert_ne!(first, text(&cfg.clone().with_seed(43)));
}
