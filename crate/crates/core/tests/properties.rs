use proptest::prelude::*;
use sslus_core::encoder::{norm, Embedding};
use sslus_core::frequency::*;
use sslus_core::image::{Image, Mask};
use sslus_core::jigsaw::*;
use sslus_core::memory_bank::MemoryBank;
use sslus_core::metrics::{hausdorff, hausdorff_brute_force, overlap_metrics};
use sslus_core::rng;

fn plane_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (2usize..20, 2usize..20)
        .prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(-1.0f64..1.0, h * w)))
}

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(prop::bool::weighted(0.25), h * w).prop_map(move |bits| {
        Mask::new("m", h, w, bits.into_iter().map(u8::from).collect()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dft_roundtrip((h, w, x) in plane_strategy()) {
        let s = forward_dft(&x, h, w).unwrap();
        let (back, imag) = inverse_dft(&s);
        for (a, b) in back.iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert!(imag.iter().all(|v| v.abs() < 1e-9));
        prop_assert!(s.hermitian_error() < 1e-9);
    }

    #[test]
    fn filter_masks_symmetric(inner in 10.0f64..100.0, span in 0.0f64..60.0, x in 0.0f64..10.0, side in 8usize..120) {
        let outer = (inner + span).min(100.0);
        let x = if outer > 20.0 { x } else { 0.0 };
        let spec = FrequencyFilterSpec::new(inner, outer, x).unwrap();
        let m = build_filter_mask(&spec, (side, side));
        prop_assert!(m.is_point_symmetric());
        prop_assert_eq!(m.get(side / 2, side / 2), 1.0);
    }

    #[test]
    fn crosspatch_is_a_bijection(row in 0usize..6, col in 0usize..6, seed in any::<u64>()) {
        let tiles: Vec<Image> = (0..36).map(|i| Image::constant(format!("{i}"), 2, 2, i as f64 / 40.0).unwrap()).collect();
        let bundle = PatchBundle { patches: tiles, layout: None, provenance: (0..36).collect() };
        let layout = PatchLayout::from_anchor(row, col).unwrap();
        let out = transform_crosspatch(&bundle, &layout, FocalMode::ReversePositions, &mut rng::stream(seed, &[])).unwrap();
        prop_assert!(out.provenance_is_bijection());
        prop_assert_eq!(out.provenance[cell_index(row, col)], cell_index(row, col));
        for pos in 0..36 {
            prop_assert_eq!(layout.is_focal(pos), layout.is_focal(out.provenance[pos]));
        }
    }

    #[test]
    fn ema_keeps_unit_rows(a in prop::collection::vec(-1.0f64..1.0, 8), b in prop::collection::vec(-1.0f64..1.0, 8), m in 0.0f64..=1.0) {
        prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
        let mut bank = MemoryBank::from_rows(vec![("x".into(), Embedding::normalized(a))], m).unwrap();
        let fresh = Embedding::normalized(b);
        bank.update_ema("x", &fresh).unwrap();
        let n = norm(bank.get("x").unwrap());
        // antipodal rows can cancel; otherwise the row is renormalized
        prop_assert!((n - 1.0).abs() < 1e-9 || n < 1e-3);
    }

    #[test]
    fn metrics_in_range_and_hd_exact(p in mask_strategy(10, 12), t in mask_strategy(10, 12)) {
        let o = overlap_metrics(&p, &t).unwrap();
        for v in [o.dsc, o.jc, o.ppv, o.rec] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(o.jc <= o.dsc);
        if p.foreground_count() > 0 && t.foreground_count() > 0 {
            prop_assert_eq!(hausdorff(&p, &t).unwrap().value, hausdorff_brute_force(&p, &t));
        }
    }
}
