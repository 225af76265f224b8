//! Files written the way an external exporter writes them (hand-packed
//! bytes, no use of the crate's encoder) must load through the pipeline.

use std::fs;
use std::path::Path;

use oodseg::pipeline::{self, TileFeatures};
use oodseg::tensorio::{self, TensorData};
use oodseg::tiles::{self, ShiftConfig};
use oodseg::{Error, FeatureMap, LabelMap};

fn pack(dtype: u8, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = b"OODS".to_vec();
    out.extend(1u32.to_le_bytes());
    out.push(dtype);
    out.push(dims.len() as u8);
    for d in dims {
        out.extend(d.to_le_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn f32_file(dims: &[u32], values: &[f32]) -> Vec<u8> {
    pack(0, dims, &values.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>())
}

fn i32_file(dims: &[u32], values: &[i32]) -> Vec<u8> {
    pack(1, dims, &values.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>())
}

/// Stub model: channel `c` at window cell `(y, x)` of window `(sx, sy)`.
fn stub(c: usize, y: usize, x: usize, sx: usize, sy: usize) -> f32 {
    (c as f32 + 1.0) * 0.25 + (y * 18 + x) as f32 / 1024.0 - (sx + 3 * sy) as f32 / 4096.0
}

fn write_windows(dir: &Path, tile: &str, channels: usize) {
    let cfg = ShiftConfig::default();
    let side = cfg.latent_inner();
    for s in tiles::enumerate_shifts(&cfg).unwrap() {
        let mut values = Vec::with_capacity(channels * side * side);
        for c in 0..channels {
            for y in 0..side {
                for x in 0..side {
                    values.push(stub(c, y, x, s.x, s.y));
                }
            }
        }
        let name = format!("{tile}@{}_{}.feat.oods", s.x, s.y);
        fs::write(dir.join(name), f32_file(&[channels as u32, side as u32, side as u32], &values)).unwrap();
    }
}

#[test]
fn hand_packed_windows_load_with_declared_dims_and_exact_values() {
    let root = tempfile::tempdir().unwrap();
    let slide = root.path().join("slide_a");
    fs::create_dir(&slide).unwrap();
    write_windows(&slide, "t00", 3);
    let labels: Vec<i32> = (0..252 * 252).map(|i| i % 3).collect();
    fs::write(slide.join("t00.label.oods"), i32_file(&[252, 252], &labels)).unwrap();

    let loaded = pipeline::load_tiles(root.path(), None).unwrap();
    assert_eq!(loaded.len(), 1);
    assert_eq!((loaded[0].wsi.as_str(), loaded[0].id.as_str()), ("slide_a", "t00"));
    let TileFeatures::Shifted(maps) = &loaded[0].features else {
        panic!("expected per-window features");
    };
    assert_eq!(maps.len(), 36);
    for m in maps {
        assert_eq!((m.map.channels(), m.map.height(), m.map.width()), (3, 18, 18));
        for c in 0..3 {
            for y in 0..18 {
                for x in 0..18 {
                    assert_eq!(m.map.get(c, y, x).to_bits(), stub(c, y, x, m.shift.x, m.shift.y).to_bits());
                }
            }
        }
    }
    assert_eq!(loaded[0].labels.as_ref().unwrap().values(), labels.as_slice());
    let agg = pipeline::aggregate_features(&loaded[0].features, &ShiftConfig::default()).unwrap();
    assert_eq!((agg.channels(), agg.height(), agg.width()), (3, 18, 18));
}

#[test]
fn aggregated_features_round_trip_through_crate_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<f32> = (0..2 * 4 * 5).map(|i| i as f32 * 0.1 - 1.7).collect();
    let path = dir.path().join("x.feat.oods");
    fs::write(&path, f32_file(&[2, 4, 5], &values)).unwrap();
    let map = FeatureMap::read(&path).unwrap();
    assert_eq!(map.data(), values.as_slice());
    // the crate writes the same bytes back
    let again = dir.path().join("y.feat.oods");
    map.write(&again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    let t = tensorio::read_tensor(&again).unwrap();
    assert!(matches!(t.data(), TensorData::F32(_)));
}

#[test]
fn corrupted_files_are_rejected() {
    let good = f32_file(&[2, 3, 3], &[0.5; 18]);
    assert!(tensorio::decode(&good).is_ok());

    // declared dims larger than the payload
    let mut grown = good.clone();
    grown[12..16].copy_from_slice(&4u32.to_le_bytes());
    assert!(matches!(tensorio::decode(&grown), Err(Error::DimensionMismatch(_))));

    // declared dims smaller than the payload
    let mut shrunk = good.clone();
    shrunk[16..20].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(tensorio::decode(&shrunk), Err(Error::DimensionMismatch(_))));

    assert!(tensorio::decode(&good[..good.len() - 1]).is_err());
    let mut magic = good.clone();
    magic[0] = b'X';
    assert!(tensorio::decode(&magic).is_err());
    let mut dtype = good.clone();
    dtype[8] = 9;
    assert!(matches!(tensorio::decode(&dtype), Err(Error::UnknownDtype(9))));
}

#[test]
fn label_geometry_must_match_features() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path();
    let cfg = ShiftConfig::default();
    let features = FeatureMap::zeros(2, 18, 18);
    features.write(dir.join("t.feat.oods")).unwrap();
    // 250 is not a multiple of the 18-cell feature grid
    LabelMap::filled(250, 250, 0).write(dir.join("t.label.oods")).unwrap();
    let tiles = pipeline::load_tiles(dir, None).unwrap();
    assert!(pipeline::labeled_features(&tiles, &cfg, 2).is_err());
}
