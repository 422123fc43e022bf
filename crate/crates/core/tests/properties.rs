use idpatch::condimage::compose_canvas;
use idpatch::diffusion_core::make_schedule;
use idpatch::evalkit::{association_accuracy, SimilarityMatrix};
use idpatch::projector::IdPatch;
use idpatch::raster::RgbImage;
use idpatch::synthid::{sample_identity, sample_locations, World};
use idpatch::util::rng;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn crop_at_annotated_anchor_recovers_each_identity(seed in 0u64..10_000, n in 1usize..5, style in 0usize..4, pose in any::<bool>()) {
        let world = World::new(6, 8, 4).unwrap();
        let ids: Vec<_> = (0..n as u64).map(|i| sample_identity(seed * 8 + i, 6)).collect();
        let locs = sample_locations(n, 32, 40, 8, &mut rng(seed)).unwrap();
        let (img, ann) = world.generate_scene(&ids, &locs, style, (32, 40), pose, seed).unwrap();
        for (f, &(x, y)) in ann.identities.iter().zip(&ann.locations) {
            let crop = img.crop_centered(x as i64, y as i64, 8).unwrap();
            let got = world.extract_feature(&crop).unwrap();
            prop_assert!(got.cosine(f) >= 0.99, "cosine {}", got.cosine(f));
        }
    }

    #[test]
    fn topmost_patch_reads_back_exactly(seed in 0u64..10_000, n in 1usize..6, locs in prop::collection::vec((0usize..30, 0usize..20), 6)) {
        let mut r = rng(seed);
        let patches: Vec<IdPatch> = (0..n)
            .map(|i| {
                let px: Vec<f32> = (0..3 * 36).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
                IdPatch { pixels: RgbImage::new(6, 6, px).unwrap(), source_label: i as i64 }
            })
            .collect();
        let c = compose_canvas(&patches, &locs[..n], (20, 30), None).unwrap();
        prop_assert_eq!(c.read_patch(n - 1), patches[n - 1].pixels.clone());
        for p in &c.placements {
            prop_assert!(p.x0 + 6 <= 30 && p.y0 + 6 <= 20);
        }
    }

    #[test]
    fn valid_schedules_decay_monotonically(steps in 2usize..600, lo in 1e-5f64..1e-2, span in 1e-4f64..0.5) {
        let s = make_schedule(steps, lo, (lo + span).min(0.999)).unwrap();
        prop_assert_eq!(s.len(), steps);
        prop_assert!(s.alpha_bars.iter().all(|&a| a > 0.0 && a < 1.0));
        prop_assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn association_is_invariant_to_relabeling(seed in 0u64..10_000, n in 1usize..8) {
        let mut r = rng(seed);
        let m: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect()).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut r);
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| perm.iter().map(|&j| m[i][j]).collect()).collect();
        let a = association_accuracy(&SimilarityMatrix::new(m).unwrap()).unwrap();
        let b = association_accuracy(&SimilarityMatrix::new(permuted).unwrap()).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}
