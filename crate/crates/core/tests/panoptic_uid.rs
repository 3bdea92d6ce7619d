use proptest::prelude::*;

use hetseg_core::panoptic_uid::{decode, encode, project, Level, Projection};
use hetseg_core::raster_io::UidRaster;

fn triple() -> impl Strategy<Value = (u32, Option<u32>, Option<u32>)> {
    prop_oneof![
        (0u32..=99).prop_map(|s| (s, None, None)),
        (1u32..=99, 0u32..=999).prop_map(|(s, i)| (s, Some(i), None)),
        (1u32..=99, 0u32..=999, 0u32..=99).prop_map(|(s, i, p)| (s, Some(i), Some(p))),
    ]
}

proptest! {
    #[test]
    fn encode_is_injective(a in triple(), b in triple()) {
        let (ea, eb) = (encode(a.0, a.1, a.2).unwrap(), encode(b.0, b.1, b.2).unwrap());
        prop_assert_eq!(ea == eb, a == b);
    }

    #[test]
    fn decode_inverts_encode(t in triple()) {
        let u = decode(encode(t.0, t.1, t.2).unwrap()).unwrap();
        prop_assert_eq!(
            (u32::from(u.semantic), u.instance.map(u32::from), u.part.map(u32::from)),
            t
        );
    }

    #[test]
    fn panoptic_projection_drops_parts(ts in prop::collection::vec(triple(), 12)) {
        let data = ts.iter().map(|t| encode(t.0, t.1, t.2).unwrap()).collect();
        let r = UidRaster::new(4, 3, data).unwrap();
        let Projection::Uid(p) = project(&r, Level::Panoptic).unwrap() else {
            panic!("panoptic projection must keep uids");
        };
        for (&v, t) in p.data().iter().zip(&ts) {
            let u = decode(v).unwrap();
            prop_assert_eq!(u.part, None);
            prop_assert_eq!(u32::from(u.semantic), t.0);
        }
    }
}
