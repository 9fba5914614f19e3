mod common;

use proptest::prelude::*;
use volseg::metrics::{overlap_metrics, region_report, OverlapCounts, Region};
use volseg::volume::LabelVolume;

#[test]
fn report_matches_brute_force_oracle() {
    for seed in 0..200 {
        let (pred, truth) = common::label_pair(seed, [12; 3]);
        let report = region_report(&pred, &truth).unwrap();
        if let Err(e) = common::check_report(&report, &pred, &truth) {
            panic!("pair {seed}: {e}");
        }
    }
}

#[test]
fn identical_maps_score_one() {
    let (pred, _) = common::label_pair(77, [12; 3]);
    let r = region_report(&pred, &pred).unwrap();
    for reg in &r.regions {
        assert_eq!(reg.dice, 1.0);
    }
    assert_eq!(r.accuracy, 1.0);
}

#[test]
fn empty_masks_are_handled() {
    let bg = LabelVolume::background([4; 3], 5).unwrap();
    let r = region_report(&bg, &bg).unwrap();
    let whole = r.region(Region::Whole);
    assert_eq!(whole.dice, 1.0);
    assert_eq!(whole.precision, None);
    assert_eq!(whole.recall, None);
    assert!(r.to_csv().contains("NA"));
}

#[test]
fn mismatched_extents_fail() {
    let a = LabelVolume::background([4; 3], 5).unwrap();
    let b = LabelVolume::background([4, 4, 5], 5).unwrap();
    assert!(region_report(&a, &b).is_err());
    assert!(overlap_metrics(&[true], &[true, false]).is_err());
}

#[test]
fn csv_has_one_row_per_entry() {
    let (pred, truth) = common::label_pair(3, [12; 3]);
    let csv = region_report(&pred, &truth).unwrap().to_csv();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("section,name,dice,precision,recall,accuracy,predicted,truth,overlap")
    );
    assert_eq!(lines.count(), 3 + 5 + 1);
}

fn masks() -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (1usize..300).prop_flat_map(|n| (proptest::collection::vec(any::<bool>(), n), proptest::collection::vec(any::<bool>(), n)))
}

proptest! {
    #[test]
    fn dice_is_harmonic_mean((p, t) in masks()) {
        let m = overlap_metrics(&p, &t).unwrap();
        if let (Some(pr), Some(re)) = (m.precision, m.recall) {
            let h = if pr + re == 0.0 { 0.0 } else { 2.0 * pr * re / (pr + re) };
            prop_assert!((m.dice - h).abs() < 1e-12);
        }
        prop_assert!((0.0..=1.0).contains(&m.dice));
    }

    #[test]
    fn dice_is_symmetric((p, t) in masks()) {
        let a = overlap_metrics(&p, &t).unwrap();
        let b = overlap_metrics(&t, &p).unwrap();
        prop_assert_eq!(a.dice, b.dice);
        prop_assert_eq!(a.precision, b.recall);
    }

    #[test]
    fn voxel_permutation_is_invariant((p, t) in masks(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let pp: Vec<bool> = order.iter().map(|&i| p[i]).collect();
        let tt: Vec<bool> = order.iter().map(|&i| t[i]).collect();
        prop_assert_eq!(overlap_metrics(&p, &t).unwrap(), overlap_metrics(&pp, &tt).unwrap());
    }

    #[test]
    fn adding_a_true_positive_never_lowers_dice((p, t) in masks(), k in any::<usize>()) {
        let misses: Vec<usize> = (0..p.len()).filter(|&i| t[i] && !p[i]).collect();
        if !misses.is_empty() {
            let mut better = p.clone();
            better[misses[k % misses.len()]] = true;
            let before = OverlapCounts::from_masks(&p, &t).unwrap().dice();
            let after = OverlapCounts::from_masks(&better, &t).unwrap().dice();
            prop_assert!(after >= before);
        }
    }
}
