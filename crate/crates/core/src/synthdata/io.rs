//! On-disk dataset layout.
//!
//! ```text
//! <root>/dataset.json                 index of sequences and splits
//! <root>/<name>/manifest.json         spec, rig, poses, array descriptors
//! <root>/<name>/frame_NNN_images.bin  f32 LE, [views, height, width, 3]
//! <root>/<name>/frame_NNN_points.bin  f32 LE, [points, 3] (ego x, y, z)
//! <root>/<name>/frame_NNN_labels.bin  u8, [H, W, Z]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ImageRgb, OccupancyGrid, SceneSample, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::EgoPose;

const DATASET_FORMAT: &str = "occloff-dataset";
const SEQUENCE_FORMAT: &str = "occloff-sequence";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub name: String,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub format: String,
    pub version: u32,
    pub sequences: Vec<SequenceEntry>,
}

impl DatasetIndex {
    pub fn new(sequences: Vec<SequenceEntry>) -> Self {
        Self { format: DATASET_FORMAT.into(), version: VERSION, sequences }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SequenceEntry> {
        self.sequences.iter().filter(move |s| s.split == split)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayDesc {
    pub file: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_order: String,
    pub layout: String,
}

impl ArrayDesc {
    fn new(file: String, dtype: &str, shape: Vec<usize>, layout: &str) -> Self {
        Self { file, dtype: dtype.into(), shape, byte_order: "little".into(), layout: layout.into() }
    }

    fn elems(&self) -> usize {
        self.shape.iter().product()
    }

    fn check(&self, dtype: &str, rank: usize) -> Result<()> {
        if self.dtype != dtype || self.byte_order != "little" || self.shape.len() != rank {
            return Err(Error::Format(format!("array {} must be {dtype}, little-endian, rank {rank}", self.file)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameArrays {
    images: ArrayDesc,
    points: ArrayDesc,
    labels: ArrayDesc,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameEntry {
    frame_index: usize,
    pose: EgoPose,
    arrays: FrameArrays,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    spec: SceneSpec,
    frames: Vec<FrameEntry>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::json(path, e))?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

fn f32_bytes(v: impl Iterator<Item = f32>) -> Vec<u8> {
    v.flat_map(f32::to_le_bytes).collect()
}

fn f32_from(bytes: &[u8], n: usize, file: &str) -> Result<Vec<f32>> {
    if bytes.len() != n * 4 {
        return Err(Error::Format(format!("{file}: expected {} bytes, found {}", n * 4, bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Writes one sequence directory.
pub fn write_sequence(dir: &Path, spec: &SceneSpec, samples: &[SceneSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::with_capacity(samples.len());
    for s in samples {
        let t = s.frame_index;
        let (w, h) = (s.images[0].width, s.images[0].height);
        let images = ArrayDesc::new(format!("frame_{t:03}_images.bin"), "f32", vec![s.images.len(), h, w, 3], "view,row,col,rgb");
        let points = ArrayDesc::new(format!("frame_{t:03}_points.bin"), "f32", vec![s.points.len(), 3], "point,xyz");
        let g = s.gt.grid.dims;
        let labels = ArrayDesc::new(format!("frame_{t:03}_labels.bin"), "u8", g.to_vec(), "h,w,z");
        write_file(&dir.join(&images.file), &f32_bytes(s.images.iter().flat_map(|im| im.data.iter().copied())))?;
        write_file(&dir.join(&points.file), &f32_bytes(s.points.iter().flatten().copied()))?;
        write_file(&dir.join(&labels.file), &s.gt.labels)?;
        frames.push(FrameEntry { frame_index: t, pose: s.pose.clone(), arrays: FrameArrays { images, points, labels } });
    }
    let m = Manifest { format: SEQUENCE_FORMAT.into(), version: VERSION, spec: spec.clone(), frames };
    write_json(&dir.join("manifest.json"), &m)
}

/// Reads one sequence directory back into memory.
pub fn read_sequence(dir: &Path) -> Result<(SceneSpec, Vec<SceneSample>)> {
    let mpath = dir.join("manifest.json");
    let m: Manifest = read_json(&mpath)?;
    if m.format != SEQUENCE_FORMAT || m.version != VERSION {
        return Err(Error::Format(format!("{}: unsupported format {} v{}", mpath.display(), m.format, m.version)));
    }
    m.spec.validate()?;
    let mut out = Vec::with_capacity(m.frames.len());
    for f in m.frames {
        let a = &f.arrays;
        a.images.check("f32", 4)?;
        a.points.check("f32", 2)?;
        a.labels.check("u8", 3)?;
        let (v, h, w) = (a.images.shape[0], a.images.shape[1], a.images.shape[2]);
        if a.images.shape[3] != 3 || a.points.shape[1] != 3 || v != m.spec.rig.len() {
            return Err(Error::Format(format!("{}: inconsistent array shapes", mpath.display())));
        }
        let px = f32_from(&read_file(&dir.join(&a.images.file))?, a.images.elems(), &a.images.file)?;
        let images = px.chunks_exact(h * w * 3).map(|c| ImageRgb { width: w, height: h, data: c.to_vec() }).collect();
        let pts = f32_from(&read_file(&dir.join(&a.points.file))?, a.points.elems(), &a.points.file)?;
        let points = pts.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        if a.labels.shape != m.spec.grid.dims.to_vec() {
            return Err(Error::Format(format!("{}: label shape does not match grid", a.labels.file)));
        }
        let labels = read_file(&dir.join(&a.labels.file))?;
        let gt = OccupancyGrid::new(m.spec.grid, labels).map_err(|e| Error::Format(format!("{}: {e}", a.labels.file)))?;
        out.push(SceneSample { frame_index: f.frame_index, images, points, gt, pose: f.pose });
    }
    Ok((m.spec, out))
}

pub fn write_dataset(root: &Path, index: &DatasetIndex) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_json(&root.join("dataset.json"), index)
}

pub fn read_dataset(root: &Path) -> Result<DatasetIndex> {
    let path: PathBuf = root.join("dataset.json");
    let idx: DatasetIndex = read_json(&path)?;
    if idx.format != DATASET_FORMAT || idx.version != VERSION {
        return Err(Error::Format(format!("{}: unsupported format {} v{}", path.display(), idx.format, idx.version)));
    }
    Ok(idx)
}
