use std::io::Write;

use flate2::write::GzEncoder;
use flate2::Compression;
use ppgl_core::nifti::{decode_volume, encode_volume_as, load_volume, save_volume_as, Datatype, Endian};
use ppgl_core::{Error, LabelData, VoxelGrid, VoxelKind};
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = [usize; 3]> {
    [1usize..=16, 1usize..=16, 1usize..=16]
}

fn spacing() -> impl Strategy<Value = [f64; 3]> {
    // Values exact in f32.
    [1u32..=40, 1u32..=40, 1u32..=40].prop_map(|s| s.map(|v| v as f64 / 8.0))
}

fn label_grid(max: u32) -> impl Strategy<Value = VoxelGrid> {
    (dims(), spacing()).prop_flat_map(move |(d, s)| {
        let n: usize = d.iter().product();
        prop::collection::vec(0..=max, n)
            .prop_map(move |v| VoxelGrid::label(d, s, LabelData::from_values(v)).unwrap())
    })
}

fn intensity_grid() -> impl Strategy<Value = VoxelGrid> {
    (dims(), spacing()).prop_flat_map(|(d, s)| {
        let n: usize = d.iter().product();
        prop::collection::vec(-3000.0f32..3000.0, n).prop_map(move |v| VoxelGrid::intensity(d, s, v).unwrap())
    })
}

fn endian() -> impl Strategy<Value = Endian> {
    prop_oneof![Just(Endian::Little), Just(Endian::Big)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn labels_round_trip(grid in label_grid(255), dt in prop_oneof![Just(Datatype::U8), Just(Datatype::I16), Just(Datatype::I32)], e in endian()) {
        let back = decode_volume(encode_volume_as(&grid, dt, e).unwrap(), Some(VoxelKind::Label)).unwrap();
        prop_assert_eq!(back, grid);
    }

    #[test]
    fn wide_labels_round_trip(grid in label_grid(70_000), e in endian()) {
        let back = decode_volume(encode_volume_as(&grid, Datatype::I32, e).unwrap(), None).unwrap();
        prop_assert_eq!(back, grid);
    }

    #[test]
    fn intensities_round_trip(grid in intensity_grid(), e in endian()) {
        let back = decode_volume(encode_volume_as(&grid, Datatype::F32, e).unwrap(), Some(VoxelKind::Intensity)).unwrap();
        prop_assert_eq!(back, grid);
    }

    #[test]
    fn gzip_files_round_trip(grid in label_grid(40), gz in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(if gz { "m.nii.gz" } else { "m.nii" });
        save_volume_as(&grid, &path, Datatype::U8).unwrap();
        prop_assert_eq!(load_volume(&path, None).unwrap(), grid);
    }

    #[test]
    fn truncated_or_padded_payload_rejected(grid in label_grid(9), cut in 1usize..64, pad in any::<bool>()) {
        let mut bytes = encode_volume_as(&grid, Datatype::I16, Endian::Little).unwrap();
        if pad {
            bytes.extend(std::iter::repeat_n(0u8, cut));
        } else {
            let keep = bytes.len().saturating_sub(cut).max(352);
            prop_assume!(keep < bytes.len());
            bytes.truncate(keep);
        }
        let is_payload_error = matches!(decode_volume(bytes, None), Err(Error::PayloadSize { .. }));
        prop_assert!(is_payload_error);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..700)) {
        let _ = decode_volume(bytes, None);
    }
}

#[test]
fn truncated_gzip_stream_is_an_error() {
    let grid = VoxelGrid::label([8, 8, 8], [1.0; 3], LabelData::from_values((0..512).map(|i| i % 3).collect())).unwrap();
    let raw = encode_volume_as(&grid, Datatype::U8, Endian::Little).unwrap();
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(&raw).unwrap();
    let gz = enc.finish().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cut.nii.gz");
    std::fs::write(&path, &gz[..gz.len() / 2]).unwrap();
    assert!(load_volume(&path, None).is_err());
}
