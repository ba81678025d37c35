//! On-disk scene archive: a directory holding `manifest.json` plus one raw
//! little-endian, row-major binary file per array.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DomainId, SceneSample};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_points: usize,
    pub domain: String,
    pub class_names: Vec<String>,
    pub scene_id: String,
    pub arrays: BTreeMap<String, ArraySpec>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

pub fn save_scene(scene: &SceneSample, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    scene.validate()?;
    fs::create_dir_all(dir)?;
    let n = scene.n_points();
    let mut arrays = BTreeMap::new();
    arrays.insert("positions".to_string(), ArraySpec { dtype: "f32".into(), shape: vec![n, 3] });
    arrays.insert("instance_ids".to_string(), ArraySpec { dtype: "i32".into(), shape: vec![n] });
    arrays.insert("class_ids".to_string(), ArraySpec { dtype: "i32".into(), shape: vec![n] });
    let manifest = Manifest {
        n_points: n,
        domain: scene.domain.as_str().to_string(),
        class_names: scene.class_names.clone(),
        scene_id: scene.scene_id.clone(),
        arrays,
    };

    let mut pos = Vec::with_capacity(n * 12);
    for p in &scene.positions {
        for v in p {
            pos.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join("positions.bin"), pos)?;
    fs::write(dir.join("instance_ids.bin"), i32_bytes(&scene.instance_ids))?;
    fs::write(dir.join("class_ids.bin"), i32_bytes(&scene.class_ids))?;
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn i32_bytes(values: &[i32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn load_scene(dir: impl AsRef<Path>) -> Result<SceneSample> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let raw = fs::read(&manifest_path)
        .map_err(|e| format_err(&manifest_path, format!("cannot read manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_slice(&raw)
        .map_err(|e| format_err(&manifest_path, format!("invalid manifest: {e}")))?;
    let domain: DomainId = manifest.domain.parse()?;
    let n = manifest.n_points;

    let positions_raw = read_array(dir, &manifest, "positions", "f32")?;
    let instance_raw = read_array(dir, &manifest, "instance_ids", "i32")?;
    let class_raw = read_array(dir, &manifest, "class_ids", "i32")?;

    if positions_raw.len() != n * 12 {
        return Err(Error::Consistency(format!(
            "positions hold {} bytes, expected {} for {n} points",
            positions_raw.len(),
            n * 12
        )));
    }
    for (name, raw) in [("instance_ids", &instance_raw), ("class_ids", &class_raw)] {
        if raw.len() != n * 4 {
            return Err(Error::Consistency(format!(
                "{name} holds {} values, expected {n}",
                raw.len() / 4
            )));
        }
    }
    let positions = positions_raw
        .chunks_exact(12)
        .map(|c| {
            let f = |o: usize| f32::from_le_bytes([c[o], c[o + 1], c[o + 2], c[o + 3]]);
            [f(0), f(4), f(8)]
        })
        .collect();
    let scene = SceneSample {
        positions,
        instance_ids: decode_i32(&instance_raw),
        class_ids: decode_i32(&class_raw),
        domain,
        class_names: manifest.class_names,
        scene_id: manifest.scene_id,
    };
    scene.validate()?;
    Ok(scene)
}

fn decode_i32(raw: &[u8]) -> Vec<i32> {
    raw.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

fn read_array(dir: &Path, manifest: &Manifest, name: &str, dtype: &str) -> Result<Vec<u8>> {
    let manifest_path = dir.join(MANIFEST);
    let spec = manifest
        .arrays
        .get(name)
        .ok_or_else(|| format_err(&manifest_path, format!("array `{name}` not declared")))?;
    if spec.dtype != dtype {
        return Err(format_err(
            &manifest_path,
            format!("array `{name}` has dtype {}, expected {dtype}", spec.dtype),
        ));
    }
    let declared: usize = spec.shape.iter().product();
    let expected_rows = spec.shape.first().copied().unwrap_or(0);
    if expected_rows != manifest.n_points {
        return Err(Error::Consistency(format!(
            "array `{name}` declares {expected_rows} rows for {} points",
            manifest.n_points
        )));
    }
    let path = dir.join(format!("{name}.bin"));
    let bytes = fs::read(&path).map_err(|e| format_err(&path, format!("cannot read: {e}")))?;
    if bytes.len() != declared * 4 {
        return Err(Error::Consistency(format!(
            "`{name}.bin` holds {} bytes, its declared shape {:?} needs {}",
            bytes.len(),
            spec.shape,
            declared * 4
        )));
    }
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn scene(n: usize, labeled: bool) -> SceneSample {
        SceneSample {
            positions: (0..n).map(|i| [i as f32 * 0.5, -(i as f32), 1.0 / (i as f32 + 3.0)]).collect(),
            instance_ids: (0..n).map(|i| if labeled { (i % 2) as i32 } else { -1 }).collect(),
            class_ids: (0..n).map(|i| if labeled { (i % 2) as i32 } else { -1 }).collect(),
            domain: DomainId::Indoor,
            class_names: vec!["chair".into(), "table".into()],
            scene_id: "unit/scene".into(),
        }
    }

    #[test]
    fn round_trip_small_and_unlabeled() {
        let tmp = tempfile::tempdir().unwrap();
        for (i, s) in [scene(4, true), scene(1, true), scene(5, false)].into_iter().enumerate() {
            let dir = tmp.path().join(format!("s{i}"));
            save_scene(&s, &dir).unwrap();
            assert_eq!(load_scene(&dir).unwrap(), s);
        }
    }

    #[test]
    fn length_mismatch_is_a_consistency_error() {
        let tmp = tempfile::tempdir().unwrap();
        save_scene(&scene(4, true), tmp.path()).unwrap();
        std::fs::write(tmp.path().join("instance_ids.bin"), i32_bytes(&[0, 0, 1])).unwrap();
        assert!(matches!(load_scene(tmp.path()), Err(Error::Consistency(_))));
    }

    #[test]
    fn unknown_domain_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        save_scene(&scene(4, true), tmp.path()).unwrap();
        let path = tmp.path().join(MANIFEST);
        let text = std::fs::read_to_string(&path).unwrap().replace("\"indoor\"", "\"underwater\"");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_scene(tmp.path()), Err(Error::Domain(d)) if d == "underwater"));
    }

    #[test]
    fn missing_or_corrupt_manifest_is_a_format_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(load_scene(tmp.path()), Err(Error::Format { .. })));
        std::fs::write(tmp.path().join(MANIFEST), b"{not json").unwrap();
        assert!(matches!(load_scene(tmp.path()), Err(Error::Format { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn archive_round_trip_is_bit_exact(
            pts in prop::collection::vec(prop::array::uniform3(-1e4f32..1e4), 1..64),
            seed in 0i32..3,
        ) {
            let n = pts.len();
            let s = SceneSample {
                positions: pts,
                instance_ids: (0..n as i32).map(|i| if (i + seed) % 3 == 0 { -1 } else { i % 4 }).collect(),
                class_ids: (0..n as i32).map(|i| if (i + seed) % 3 == 0 { -1 } else { i % 4 % 2 }).collect(),
                domain: DomainId::Aerial,
                class_names: vec!["x".into(), "y".into()],
                scene_id: format!("prop/{seed}"),
            };
            let tmp = tempfile::tempdir().unwrap();
            save_scene(&s, tmp.path()).unwrap();
            let back = load_scene(tmp.path()).unwrap();
            prop_assert_eq!(back.positions.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            s.positions.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back, s);
        }
    }
}
