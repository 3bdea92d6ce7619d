use std::collections::{BTreeMap, BTreeSet, HashSet};

use proptest::prelude::*;

use hetseg_core::metrics::{knowledgeability, miou_mpa, part_pq, pq, SegmentSet};
use hetseg_core::panoptic_uid::{encode, PanopticSpec};
use hetseg_core::raster_io::{confusion_matrix, ClassRaster, UidRaster};

const CLASSES: usize = 5;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn miou_matches_set_oracle(
        gt in prop::collection::vec(0u16..CLASSES as u16, 64),
        pred in prop::collection::vec(0u16..CLASSES as u16, 64),
        ignore in prop::collection::btree_set(0u16..CLASSES as u16, 0..2),
    ) {
        let g = ClassRaster::new(8, 8, gt.clone()).unwrap();
        let p = ClassRaster::new(8, 8, pred.clone()).unwrap();
        let scores = miou_mpa(&confusion_matrix(&g, &p, CLASSES, &ignore).unwrap());

        let kept: Vec<usize> = (0..64).filter(|&i| !ignore.contains(&gt[i])).collect();
        let mut valid = Vec::new();
        for c in 0..CLASSES as u16 {
            let gs: HashSet<usize> = kept.iter().copied().filter(|&i| gt[i] == c).collect();
            let ps: HashSet<usize> = kept.iter().copied().filter(|&i| pred[i] == c).collect();
            let union = gs.union(&ps).count();
            let expect = (union > 0).then(|| gs.intersection(&ps).count() as f64 / union as f64);
            match (scores.per_class_iou[c as usize], expect) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
            valid.extend(expect);
        }
        let mean = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
        match (scores.miou, mean) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }
}

proptest! {
    #[test]
    fn knowledgeability_bounded_and_monotone(
        ious in prop::collection::vec(0.0f64..=1.0, 0..25),
        c in 1usize..25,
        n_t in 1usize..15,
        bump in 0.0f64..1.0,
        pick in any::<prop::sample::Index>(),
    ) {
        let k = knowledgeability(&ious, c, n_t).unwrap();
        prop_assert!(k >= 0.0);
        prop_assert!(k <= ious.len().min(c) as f64 / c as f64 + 1e-12);
        if !ious.is_empty() {
            let mut up = ious.clone();
            let i = pick.index(up.len());
            up[i] = (up[i] + bump).min(1.0);
            prop_assert!(knowledgeability(&up, c, n_t).unwrap() >= k);
        }
    }
}

fn spec() -> PanopticSpec {
    PanopticSpec {
        stuff: BTreeSet::from([1, 2]),
        things: BTreeSet::from([3, 4]),
        parts: BTreeMap::from([(2, 2), (3, 3)]),
        ..PanopticSpec::default()
    }
}

/// UIDs over void, stuff 1 and 2 (2 has parts), things 3 (with parts) and 4.
fn uid_value() -> impl Strategy<Value = u32> {
    prop_oneof![
        Just(0u32),
        Just(1),
        (0u32..=2).prop_map(|p| encode(2, Some(0), (p > 0).then_some(p)).unwrap()),
        (1u32..=3, 0u32..=3).prop_map(|(i, p)| encode(3, Some(i), Some(p)).unwrap()),
        (1u32..=3).prop_map(|i| encode(4, Some(i), None).unwrap()),
    ]
}

fn uid_raster() -> impl Strategy<Value = UidRaster> {
    prop::collection::vec(uid_value(), 48).prop_map(|d| UidRaster::new(8, 6, d).unwrap())
}

proptest! {
    #[test]
    fn matching_is_injective_and_scores_bounded(gt in uid_raster(), pred in uid_raster()) {
        let spec = spec();
        let g = SegmentSet::from_uid_raster(&gt, &spec).unwrap();
        let p = SegmentSet::from_uid_raster(&pred, &spec).unwrap();
        let stats = pq(&g, &p).unwrap();
        let gts: HashSet<_> = stats.matches.iter().map(|m| m.0).collect();
        let preds: HashSet<_> = stats.matches.iter().map(|m| m.1).collect();
        prop_assert_eq!(gts.len(), stats.matches.len());
        prop_assert_eq!(preds.len(), stats.matches.len());

        let parts: BTreeMap<u16, u8> = spec.parts.iter().map(|(&k, &v)| (k as u16, v)).collect();
        let part = part_pq(&g, &p, &parts).unwrap();
        if let Some(q) = part.quality() {
            prop_assert!((0.0..=1.0).contains(&q));
        }
        for q in part.per_class_quality().values() {
            prop_assert!((0.0..=1.0).contains(q));
        }
    }

    #[test]
    fn part_pq_without_parts_is_pq(gt in uid_raster(), pred in uid_raster()) {
        let spec = spec();
        let g = SegmentSet::from_uid_raster(&gt, &spec).unwrap();
        let p = SegmentSet::from_uid_raster(&pred, &spec).unwrap();
        let plain = pq(&g, &p).unwrap();
        let part = part_pq(&g, &p, &BTreeMap::new()).unwrap();
        prop_assert_eq!(plain.per_class, part.per_class);
    }

    #[test]
    fn identical_inputs_score_one(gt in uid_raster()) {
        let spec = spec();
        let g = SegmentSet::from_uid_raster(&gt, &spec).unwrap();
        let stats = pq(&g, &g).unwrap();
        if let Some(q) = stats.quality() {
            prop_assert_eq!(q, 1.0);
        }
    }
}
