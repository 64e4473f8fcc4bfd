use proptest::prelude::*;

use geoforest::mhd::{read_label_mhd, read_mhd, write_label_mhd, write_mhd};
use geoforest::volume::{ChannelKind, Geometry, LabelVolume, Volume3};

fn geometry() -> impl Strategy<Value = Geometry> {
    (
        prop::array::uniform3(1usize..6),
        prop::array::uniform3(0.25f64..4.0),
        prop::array::uniform3(-300.0f64..300.0),
    )
        .prop_map(|(dims, spacing, origin)| Geometry::new(dims, spacing, origin).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // Intensities are stored as f32, so values representable in f32 survive exactly.
    #[test]
    fn intensity_volume_round_trips(g in geometry(), seed in any::<u64>()) {
        let data: Vec<f64> = (0..g.len())
            .map(|i| ((seed.wrapping_mul(i as u64 + 1) % 4001) as f32 - 2000.0) as f64 * 0.5)
            .collect();
        let vol = Volume3::new(g, data, ChannelKind::CtHu).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mhd");
        write_mhd(&vol, &path).unwrap();
        let back = read_mhd(&path).unwrap();
        prop_assert_eq!(back.dims(), vol.dims());
        for a in 0..3 {
            prop_assert!((back.geometry().spacing[a] - g.spacing[a]).abs() <= 1e-9 * g.spacing[a]);
            prop_assert!((back.geometry().origin[a] - g.origin[a]).abs() <= 1e-9);
        }
        prop_assert_eq!(back.data(), vol.data());
    }

    #[test]
    fn label_volume_round_trips(g in geometry(), labels in prop::collection::vec(0u8..3, 125)) {
        let labels = LabelVolume::new(g, labels[..g.len()].to_vec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.mhd");
        write_label_mhd(&labels, &path).unwrap();
        let back = read_label_mhd(&path).unwrap();
        prop_assert_eq!(back, labels);
    }
}
