use proptest::prelude::*;

use sigverify::config::RunConfig;
use sigverify::cotuplet::{cotuplet_value, hardest, mine};
use sigverify::imageprep::{clean_background, crop_to_content, otsu_threshold, GrayImage, BACKGROUND};
use sigverify::verifier::evaluate;

fn tuplet() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..8).prop_flat_map(|k| (prop::collection::vec(0.0..4.0f64, k), prop::collection::vec(0.0..4.0f64, k)))
}

fn image() -> impl Strategy<Value = GrayImage> {
    (1usize..24, 1usize..24).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<u8>(), h * w).prop_map(move |px| GrayImage::new(h, w, px).unwrap())
    })
}

proptest! {
    #[test]
    fn mining_sets_grow_with_delta((dp, dn) in tuplet(), d1 in 0.0..2.0f64, extra in 0.0..2.0f64) {
        let (sp1, sn1) = mine(&dp, &dn, d1).unwrap();
        let (sp2, sn2) = mine(&dp, &dn, d1 + extra).unwrap();
        prop_assert!(sp1.iter().all(|i| sp2.contains(i)));
        prop_assert!(sn1.iter().all(|j| sn2.contains(j)));
    }

    #[test]
    fn loss_is_shift_invariant((dp, dn) in tuplet(), shift in -1.0..1.0f64, delta in 0.01..1.0f64) {
        let a = cotuplet_value(&dp, &dn, delta).unwrap();
        let sp: Vec<f64> = dp.iter().map(|d| d + shift).collect();
        let sn: Vec<f64> = dn.iter().map(|d| d + shift).collect();
        // mining compares differences, so the selected sets must not change either
        prop_assume!(mine(&dp, &dn, delta).unwrap() == mine(&sp, &sn, delta).unwrap());
        prop_assert!((a - cotuplet_value(&sp, &sn, delta).unwrap()).abs() < 1e-9);
        let (h1, h2) = (hardest(&dp, &dn).unwrap(), hardest(&sp, &sn).unwrap());
        prop_assert_eq!((h1.pos_index, h1.neg_index), (h2.pos_index, h2.neg_index));
    }

    #[test]
    fn loss_is_non_negative_and_zero_only_without_mined_pairs((dp, dn) in tuplet(), delta in 0.01..1.0f64) {
        let l = cotuplet_value(&dp, &dn, delta).unwrap();
        let (sp, sn) = mine(&dp, &dn, delta).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, sp.is_empty() && sn.is_empty());
    }

    #[test]
    fn background_cleaning_is_idempotent(img in image()) {
        if let Ok(t) = otsu_threshold(&img) {
            let once = clean_background(&img, t);
            prop_assert_eq!(clean_background(&once, t), once.clone());
            prop_assert!(once.pixels().iter().all(|&p| p <= t || p == BACKGROUND));
        }
    }

    #[test]
    fn crop_keeps_every_ink_pixel(img in image(), margin in 0usize..4) {
        let ink = img.pixels().iter().filter(|&&p| p < BACKGROUND).count();
        match crop_to_content(&img, margin) {
            Ok(c) => prop_assert_eq!(c.pixels().iter().filter(|&&p| p < BACKGROUND).count(), ink),
            Err(_) => prop_assert_eq!(ink, 0),
        }
    }

    #[test]
    fn metrics_ignore_monotone_rescaling(scores in prop::collection::vec((0.0..10.0f64, any::<bool>()), 2..60), a in 0.1..5.0f64, b in -3.0..3.0f64) {
        prop_assume!(scores.iter().any(|s| s.1) && scores.iter().any(|s| !s.1));
        let r1 = evaluate(&scores).unwrap();
        let mapped: Vec<(f64, bool)> = scores.iter().map(|&(d, p)| (a * d + b, p)).collect();
        let r2 = evaluate(&mapped).unwrap();
        prop_assert!((r1.eer - r2.eer).abs() < 1e-9 && (r1.auc - r2.auc).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&r1.eer) && (0.0..=100.0).contains(&r1.auc));
    }

    #[test]
    fn config_roundtrip(seed in any::<u64>(), delta in 0.001..2.0f64, lr in 1e-6..1e-1f64, patience in 1usize..30) {
        let mut cfg = RunConfig { seed, patience, ..RunConfig::default() };
        cfg.loss.delta = delta;
        cfg.adam.learning_rate = lr;
        let text = cfg.emit();
        let back = RunConfig::parse_str(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.emit(), text);
    }
}
