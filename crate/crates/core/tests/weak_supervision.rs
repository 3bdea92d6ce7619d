use proptest::prelude::*;

use hetseg_core::conversion::softmax;
use hetseg_core::raster_io::ProbRaster;
use hetseg_core::weak_supervision::{is_labeled, rasterize_votes, refine, WeakAnnotation};

const LABELS: usize = 4;

fn scene() -> impl Strategy<Value = (usize, usize, Vec<WeakAnnotation>)> {
    (1usize..16, 1usize..16).prop_flat_map(|(w, h)| {
        let annot = (1..LABELS, 0..w, 0..h, 1..=w, 1..=h, 0u8..10).prop_map(
            move |(label, x0, y0, dx, dy, kind)| {
                if kind == 0 {
                    WeakAnnotation::Tag { label }
                } else {
                    WeakAnnotation::Box {
                        label,
                        x0,
                        y0,
                        x1: (x0 + dx).min(w),
                        y1: (y0 + dy).min(h),
                    }
                }
            },
        );
        (Just(w), Just(h), prop::collection::vec(annot, 0..8))
    })
}

fn prediction(w: usize, h: usize) -> impl Strategy<Value = ProbRaster> {
    prop::collection::vec(-4.0f64..4.0, w * h * LABELS).prop_map(move |raw| {
        let data: Vec<f64> = raw.chunks(LABELS).flat_map(softmax).collect();
        ProbRaster::new(w, h, LABELS, data).unwrap()
    })
}

proptest! {
    #[test]
    fn pseudo_labels_are_categorical((w, h, annots) in scene()) {
        let r = rasterize_votes(&annots, LABELS, w, h).unwrap();
        for px in r.pixels() {
            prop_assert!((px.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn tags_give_a_constant_raster(w in 1usize..10, h in 1usize..10, labels in prop::collection::vec(1..LABELS, 1..5)) {
        let annots: Vec<_> = labels.into_iter().map(|label| WeakAnnotation::Tag { label }).collect();
        let r = rasterize_votes(&annots, LABELS, w, h).unwrap();
        let first = r.pixel(0).to_vec();
        for px in r.pixels() {
            prop_assert_eq!(px, first.as_slice());
        }
    }

    #[test]
    fn refine_idempotent_and_shrinking(
        ((w, h, annots), pred) in scene().prop_flat_map(|s| { let (w, h) = (s.0, s.1); (Just(s), prediction(w, h)) }),
        t in 0.05f64..=1.0,
    ) {
        let pseudo = rasterize_votes(&annots, LABELS, w, h).unwrap();
        let once = refine(&pseudo, &pred, t).unwrap();
        prop_assert_eq!(&refine(&once, &pred, t).unwrap(), &once);
        let labeled = |r: &ProbRaster| r.pixels().filter(|p| is_labeled(p)).count();
        prop_assert!(labeled(&once) <= labeled(&pseudo));
    }
}
