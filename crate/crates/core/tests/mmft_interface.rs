//! The feature file is the hand-off point from the offline CNN extractor, so
//! these tests build files byte by byte the way an external producer would.

use std::io::Write;

use mmgru_core::data::{load_features, write_features, FeatureMap, DEFAULT_FEATURE_DIM};
use mmgru_core::linalg::Rng;
use mmgru_core::Error;

fn producer_bytes(records: &[(&str, Vec<f32>)], dim: u32) -> Vec<u8> {
    let mut out = b"MMFT".to_vec();
    out.extend(1u32.to_le_bytes());
    out.extend((records.len() as u32).to_le_bytes());
    out.extend(dim.to_le_bytes());
    for (id, v) in records {
        out.extend((id.len() as u16).to_le_bytes());
        out.extend(id.as_bytes());
        for x in v {
            out.extend(x.to_le_bytes());
        }
    }
    out
}

fn fc7_like(rng: &mut Rng) -> Vec<f32> {
    // Post-ReLU activations: non-negative, mostly sparse.
    (0..DEFAULT_FEATURE_DIM)
        .map(|_| if rng.next_f64() < 0.7 { 0.0 } else { rng.uniform(0.0, 8.0) as f32 })
        .collect()
}

#[test]
fn three_extracted_images_load() {
    let mut rng = Rng::new(4);
    let records = vec![
        ("zebra_03", fc7_like(&mut rng)),
        ("apple_01", fc7_like(&mut rng)),
        ("mango_02", fc7_like(&mut rng)),
    ];
    let bytes = producer_bytes(&records, DEFAULT_FEATURE_DIM as u32);
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(&bytes).unwrap();

    let map = load_features(f.path()).unwrap();
    assert_eq!(map.dim, 4096);
    assert_eq!(map.len(), 3);
    for (id, v) in &records {
        let got = map.get(id).unwrap();
        assert!(got.iter().zip(v).all(|(a, &b)| *a == b as f64));
        assert!(got.iter().all(|x| x.is_finite()));
        assert!(got.iter().any(|&x| x != 0.0));
    }
}

#[test]
fn writer_matches_producer_layout_byte_for_byte() {
    let mut rng = Rng::new(5);
    // Sorted ids: the writer emits records in id order.
    let records = vec![("a", fc7_like(&mut rng)), ("b", fc7_like(&mut rng))];
    let mut map = FeatureMap::new(DEFAULT_FEATURE_DIM);
    for (id, v) in &records {
        map.insert(*id, v.iter().map(|&x| x as f64).collect()).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.mmft");
    write_features(&path, &map).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), producer_bytes(&records, 4096));
}

#[test]
fn empty_extraction_is_a_valid_file() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(&producer_bytes(&[], 4096)).unwrap();
    let map = load_features(f.path()).unwrap();
    assert!(map.is_empty());
    assert_eq!(map.dim, 4096);
}

#[test]
fn malformed_producer_output_is_rejected() {
    let good = producer_bytes(&[("x", vec![1.0, 2.0])], 2);
    let load = |bytes: &[u8]| {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(bytes).unwrap();
        load_features(f.path())
    };
    let mut bad_magic = good.clone();
    bad_magic[..4].copy_from_slice(b"MMFX");
    assert!(matches!(load(&bad_magic), Err(Error::Format(_))));
    let mut bad_version = good.clone();
    bad_version[4] = 2;
    assert!(matches!(load(&bad_version), Err(Error::Format(_))));
    assert!(matches!(load(&good[..good.len() - 1]), Err(Error::Io(_))));
    let dup = producer_bytes(&[("x", vec![1.0, 2.0]), ("x", vec![3.0, 4.0])], 2);
    assert!(matches!(load(&dup), Err(Error::Data(_))));
    let nan = producer_bytes(&[("x", vec![f32::NAN, 2.0])], 2);
    assert!(matches!(load(&nan), Err(Error::Data(_))));
}
