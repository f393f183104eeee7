//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/seq_NNNN/meta.json
//! <root>/seq_NNNN/{rgb,depth,flow,pose}_TTTT.f32
//! <root>/seq_NNNN/intrinsics.json
//! ```
//!
//! Arrays are little-endian f32 in C order: rgb `[H, W, 3]`, depth `[H, W]`,
//! flow `[H, W, 2]`, pose `[4, 4]` row-major world→camera.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SequenceRecord;
use crate::error::{Error, Result};
use crate::frames::{DepthMap, FlowField, Frame};
use crate::geometry::{CameraIntrinsics, Mat3, Se3};
use crate::tensor::Tensor;

pub const FORMAT_MAGIC: &str = "DFN1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub name: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub magic: String,
    pub version: u32,
    pub seed: u64,
    pub sequences: Vec<SequenceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    file: String,
    role: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceMeta {
    magic: String,
    version: u32,
    frames: usize,
    height: usize,
    width: usize,
    arrays: Vec<ArrayEntry>,
}

const DTYPE: &str = "f32le";

fn seq_name(i: usize) -> String {
    format!("seq_{i:04}")
}

fn to_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

/// Channel-major `[C, H, W]` to interleaved `[H, W, C]`.
fn interleave(t: &Tensor) -> Vec<u8> {
    let (c, h, w) = t.dims3().expect("3-d tensor");
    to_bytes((0..h * w).flat_map(move |p| (0..c).map(move |ch| t.data()[ch * h * w + p])))
}

fn deinterleave(values: &[f64], c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn3(c, h, w, |ch, y, x| values[(y * w + x) * c + ch])
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn check_header(path: &Path, magic: &str, version: u32) -> Result<()> {
    if magic != FORMAT_MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:?}, expected {FORMAT_MAGIC:?}")));
    }
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version.to_string(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    Ok(())
}

fn write_sequence(rec: &SequenceRecord, dir: &Path) -> Result<SequenceEntry> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (t, h, w) = (rec.len(), rec.height(), rec.width());
    let mut arrays = Vec::new();
    let mut put = |file: String, role: &str, shape: Vec<usize>, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        arrays.push(ArrayEntry {
            file,
            role: role.to_string(),
            shape,
            dtype: DTYPE.to_string(),
        });
        Ok(())
    };
    for i in 0..t {
        put(format!("rgb_{i:04}.f32"), "rgb", vec![h, w, 3], interleave(rec.frames[i].tensor()))?;
        put(
            format!("depth_{i:04}.f32"),
            "depth",
            vec![h, w],
            to_bytes(rec.depths[i].values().data().iter().copied()),
        )?;
        if i + 1 < t {
            put(format!("flow_{i:04}.f32"), "flow", vec![h, w, 2], interleave(rec.flows[i].tensor()))?;
        }
        put(
            format!("pose_{i:04}.f32"),
            "pose_world_to_camera",
            vec![4, 4],
            to_bytes(rec.poses[i].to_row_major().into_iter()),
        )?;
    }
    write_json(&dir.join("intrinsics.json"), &rec.intrinsics)?;
    let meta = SequenceMeta {
        magic: FORMAT_MAGIC.into(),
        version: FORMAT_VERSION,
        frames: t,
        height: h,
        width: w,
        arrays,
    };
    write_json(&dir.join("meta.json"), &meta)?;
    Ok(SequenceEntry {
        name: String::new(),
        frames: t,
        height: h,
        width: w,
    })
}

fn replace_dir(tmp: &Path, dest: &Path) -> Result<()> {
    if dest.exists() {
        fs::remove_dir_all(dest).map_err(|e| Error::io(dest, e))?;
    }
    fs::rename(tmp, dest).map_err(|e| Error::io(dest, e))
}

/// Writes `records` under `root`. Each sequence is assembled in a hidden
/// temporary directory and renamed into place; the manifest goes last.
pub fn write_dataset(records: &[SequenceRecord], root: impl AsRef<Path>, seed: u64) -> Result<DatasetManifest> {
    let root = root.as_ref();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut sequences = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        rec.validate()?;
        let name = seq_name(i);
        let tmp = root.join(format!(".{name}.tmp"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        let mut entry = write_sequence(rec, &tmp)?;
        replace_dir(&tmp, &root.join(&name))?;
        entry.name = name;
        sequences.push(entry);
    }
    let manifest = DatasetManifest {
        magic: FORMAT_MAGIC.into(),
        version: FORMAT_VERSION,
        seed,
        sequences,
    };
    let tmp = root.join(".manifest.json.tmp");
    write_json(&tmp, &manifest)?;
    let dest = root.join("manifest.json");
    fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))?;
    Ok(manifest)
}

/// A dataset on disk; sequences are read on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

/// Opens `root` and validates the manifest header.
pub fn read_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref().to_path_buf();
    let path = root.join("manifest.json");
    let manifest: DatasetManifest = read_json(&path)?;
    check_header(&path, &manifest.magic, manifest.version)?;
    Ok(Dataset { root, manifest })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.sequences.is_empty()
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn load_all(&self) -> Result<Vec<SequenceRecord>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }

    pub fn load(&self, index: usize) -> Result<SequenceRecord> {
        let entry = self.manifest.sequences.get(index).ok_or_else(|| {
            Error::invalid(format!("sequence {index} out of range (dataset has {})", self.len()))
        })?;
        let dir = self.root.join(&entry.name);
        let meta_path = dir.join("meta.json");
        let meta: SequenceMeta = read_json(&meta_path)?;
        check_header(&meta_path, &meta.magic, meta.version)?;
        if (meta.frames, meta.height, meta.width) != (entry.frames, entry.height, entry.width) {
            return Err(Error::format(
                &meta_path,
                format!(
                    "sequence shape {}x{}x{} disagrees with manifest {}x{}x{}",
                    meta.frames, meta.height, meta.width, entry.frames, entry.height, entry.width
                ),
            ));
        }
        let (t, h, w) = (meta.frames, meta.height, meta.width);
        let intrinsics: CameraIntrinsics = read_json(&dir.join("intrinsics.json"))?;
        intrinsics.validate()?;

        let mut frames = Vec::with_capacity(t);
        let mut depths = Vec::with_capacity(t);
        let mut flows = Vec::with_capacity(t.saturating_sub(1));
        let mut poses = Vec::with_capacity(t);
        for a in &meta.arrays {
            let path = dir.join(&a.file);
            if a.dtype != DTYPE {
                return Err(Error::format(&path, format!("unsupported dtype {:?}", a.dtype)));
            }
            let expected: Vec<usize> = match a.role.as_str() {
                "rgb" => vec![h, w, 3],
                "depth" => vec![h, w],
                "flow" => vec![h, w, 2],
                "pose_world_to_camera" => vec![4, 4],
                other => return Err(Error::format(&meta_path, format!("unknown array role {other:?}"))),
            };
            if a.shape != expected {
                return Err(Error::format(
                    &path,
                    format!("shape {:?} for role {} (expected {expected:?})", a.shape, a.role),
                ));
            }
            let values = read_f32(&path, expected.iter().product())?;
            let bad = |e: Error| Error::format(&path, e.to_string());
            match a.role.as_str() {
                "rgb" => frames.push(Frame::new(deinterleave(&values, 3, h, w)).map_err(bad)?),
                "depth" => depths.push(DepthMap::new(Tensor::from_vec(&[1, h, w], values).map_err(bad)?).map_err(bad)?),
                "flow" => flows.push(FlowField::new(deinterleave(&values, 2, h, w)).map_err(bad)?),
                _ => poses.push(pose_from_f32(&values).map_err(bad)?),
            }
        }
        let rec = SequenceRecord {
            frames,
            depths,
            flows,
            poses,
            intrinsics,
        };
        rec.validate().map_err(|e| Error::format(&meta_path, e.to_string()))?;
        if rec.len() != t {
            return Err(Error::format(&meta_path, format!("expected {t} frames, found {}", rec.len())));
        }
        Ok(rec)
    }
}

fn read_f32(path: &Path, count: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 4 * count {
        return Err(Error::format(
            path,
            format!("expected {} bytes ({count} f32 values), found {}", 4 * count, bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite value"));
    }
    Ok(values)
}

/// f32 storage breaks exact orthonormality, so the rotation is restored by
/// Gram-Schmidt on its rows before validation.
fn pose_from_f32(v: &[f64]) -> Result<Se3> {
    let mut r: Mat3 = [[v[0], v[1], v[2]], [v[4], v[5], v[6]], [v[8], v[9], v[10]]];
    let norm = |a: &[f64; 3]| (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let n0 = norm(&r[0]);
    r[0] = r[0].map(|x| x / n0);
    let d = super::dot(&r[0], &r[1]);
    r[1] = [r[1][0] - d * r[0][0], r[1][1] - d * r[0][1], r[1][2] - d * r[0][2]];
    let n1 = norm(&r[1]);
    r[1] = r[1].map(|x| x / n1);
    r[2] = super::cross(&r[0], &r[1]);
    if (v[12], v[13], v[14], v[15]) != (0.0, 0.0, 0.0, 1.0) {
        return Err(Error::invalid("pose bottom row must be (0,0,0,1)"));
    }
    let pose = Se3::from_rt(&r, &[v[3], v[7], v[11]]);
    pose.validate()?;
    Ok(pose)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_dataset, GeneratorConfig};
    use super::*;

    fn small() -> Vec<SequenceRecord> {
        let cfg = GeneratorConfig {
            height: 8,
            width: 24,
            frames: 3,
            ..Default::default()
        };
        generate_dataset(&cfg, 2, 4).unwrap().into_iter().map(|(_, r)| r).collect()
    }

    fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn round_trip_is_exact_in_f32() {
        let recs = small();
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&recs, dir.path(), 4).unwrap();
        assert_eq!(m.sequences.len(), 2);
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        for (i, rec) in recs.iter().enumerate() {
            let back = ds.load(i).unwrap();
            let f32eq = |a: &Tensor, b: &Tensor| {
                a.data().iter().zip(b.data()).all(|(x, y)| (*x as f32) as f64 == *y)
            };
            for t in 0..rec.len() {
                assert!(f32eq(rec.frames[t].tensor(), back.frames[t].tensor()));
                assert!(f32eq(rec.depths[t].values(), back.depths[t].values()));
                assert!(rec.poses[t].max_abs_diff(&back.poses[t]) < 1e-5);
            }
            for t in 0..rec.flows.len() {
                assert!(f32eq(rec.flows[t].tensor(), back.flows[t].tensor()));
            }
            assert_eq!(rec.intrinsics, back.intrinsics);
        }
        // deterministic bytes
        let again = tempfile::tempdir().unwrap();
        write_dataset(&recs, again.path(), 4).unwrap();
        assert_eq!(files(dir.path()), files(again.path()));
    }

    #[test]
    fn truncated_array_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&small(), dir.path(), 0).unwrap();
        let p = dir.path().join("seq_0001/depth_0002.f32");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        ds.load(0).unwrap();
        assert!(matches!(ds.load(1), Err(Error::Format { .. })));
    }

    #[test]
    fn unknown_version_and_bad_magic_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&small(), dir.path(), 0).unwrap();
        let mp = dir.path().join("manifest.json");
        let text = fs::read_to_string(&mp).unwrap();
        fs::write(&mp, text.replace("\"version\": 1", "\"version\": 7")).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::UnsupportedVersion { .. })));
        fs::write(&mp, text.replace("DFN1", "XXXX")).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));
        fs::write(&mp, "{ not json").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));

        fs::write(&mp, &text).unwrap();
        let meta = dir.path().join("seq_0000/meta.json");
        let mt = fs::read_to_string(&meta).unwrap();
        fs::write(&meta, mt.replacen("\"version\": 1", "\"version\": 2", 1)).unwrap();
        let ds = read_dataset(dir.path()).unwrap();
        assert!(matches!(ds.load(0), Err(Error::UnsupportedVersion { .. })));
    }

    #[test]
    fn rewrite_replaces_existing_sequences() {
        let dir = tempfile::tempdir().unwrap();
        let recs = small();
        write_dataset(&recs, dir.path(), 1).unwrap();
        write_dataset(&recs[..1], dir.path(), 1).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap().len(), 1);
        assert!(!dir.path().join(".seq_0000.tmp").exists());
    }
}
