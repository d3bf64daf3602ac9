//! Real-sweep readers (KITTI-360 / nuScenes `.bin`), split manifests and the
//! beam subsampling used to build sparse densification inputs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RangeImage};

const KITTI_RECORD: usize = 16;
const NUSCENES_RECORD: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub id: String,
    pub cloud: PointCloud,
}

impl SweepRecord {
    pub fn new(id: impl Into<String>, cloud: PointCloud) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::InvalidConfig("sweep id must be non-empty".into()));
        }
        Ok(SweepRecord { id, cloud })
    }
}

fn read_f32_records(bytes: &[u8], record: usize) -> Result<impl Iterator<Item = Vec<f32>> + '_> {
    let rem = bytes.len() % record;
    if rem != 0 {
        return Err(Error::Truncated {
            offset: bytes.len() - rem,
            record_size: record,
        });
    }
    Ok(bytes.chunks_exact(record).map(|rec| {
        rec.chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect()
    }))
}

/// Velodyne layout: little-endian `f32` x, y, z, intensity per point.
/// Intensities are returned in file units.
pub fn read_kitti_bin(bytes: &[u8]) -> Result<PointCloud> {
    let mut pc = PointCloud::with_capacity(bytes.len() / KITTI_RECORD);
    for v in read_f32_records(bytes, KITTI_RECORD)? {
        pc.push([v[0] as f64, v[1] as f64, v[2] as f64], v[3] as f64)?;
    }
    Ok(pc)
}

/// nuScenes layout: x, y, z, intensity, ring. The ring channel is dropped.
pub fn read_nuscenes_bin(bytes: &[u8]) -> Result<PointCloud> {
    let mut pc = PointCloud::with_capacity(bytes.len() / NUSCENES_RECORD);
    for v in read_f32_records(bytes, NUSCENES_RECORD)? {
        pc.push([v[0] as f64, v[1] as f64, v[2] as f64], v[3] as f64)?;
    }
    Ok(pc)
}

pub fn write_kitti_bin(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.len() * KITTI_RECORD);
    for ([x, y, z], r) in pc.iter() {
        for v in [x, y, z, r] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Writes the nuScenes layout with the given ring index per point (0 if
/// `rings` is shorter than the cloud).
pub fn write_nuscenes_bin(pc: &PointCloud, rings: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.len() * NUSCENES_RECORD);
    for (i, ([x, y, z], r)) in pc.iter().enumerate() {
        let ring = rings.get(i).copied().unwrap_or(0.0);
        for v in [x as f32, y as f32, z as f32, r as f32, ring] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Sensor file formats understood by the readers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepFormat {
    Kitti,
    Nuscenes,
}

impl SweepFormat {
    pub fn read(self, bytes: &[u8]) -> Result<PointCloud> {
        match self {
            SweepFormat::Kitti => read_kitti_bin(bytes),
            SweepFormat::Nuscenes => read_nuscenes_bin(bytes),
        }
    }
}

pub fn read_sweep(path: &Path, format: SweepFormat) -> Result<SweepRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::at_path(path, e))?;
    let cloud = format.read(&bytes)?;
    SweepRecord::new(path.display().to_string(), cloud)
}

/// Which rows of a range image survive subsampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BeamSelection {
    /// Keep rows `0, stride, 2 * stride, ...`.
    Stride(usize),
    Rows(Vec<usize>),
}

impl BeamSelection {
    pub fn rows(&self, height: usize) -> Result<BTreeSet<usize>> {
        let rows: BTreeSet<usize> = match self {
            BeamSelection::Stride(0) => {
                return Err(Error::InvalidConfig("beam stride must be >= 1".into()))
            }
            BeamSelection::Stride(s) => (0..height).step_by(*s).collect(),
            BeamSelection::Rows(r) => r.iter().copied().collect(),
        };
        if rows.is_empty() {
            return Err(Error::InvalidConfig("beam selection keeps no rows".into()));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= height) {
            return Err(Error::OutOfRange(format!("row {r} >= height {height}")));
        }
        Ok(rows)
    }
}

/// Per-pixel boolean mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl PixelMask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        PixelMask {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn inverted(&self) -> PixelMask {
        PixelMask {
            data: self.data.iter().map(|&m| !m).collect(),
            ..self.clone()
        }
    }

    pub fn and(&self, other: &[bool]) -> PixelMask {
        PixelMask {
            data: self.data.iter().zip(other).map(|(&a, &b)| a && b).collect(),
            ..self.clone()
        }
    }
}

/// Simulates a lower-beam sensor: kept rows are copied verbatim, dropped
/// rows become empty pixels. Returns the sparse image and the row-visibility
/// mask (true on every pixel of a kept row).
pub fn subsample_beams(img: &RangeImage, keep: &BeamSelection) -> Result<(RangeImage, PixelMask)> {
    let (h, w) = (img.height(), img.width());
    let rows = keep.rows(h)?;
    let mut sparse = img.clone();
    let mut mask = PixelMask::filled(h, w, false);
    for row in 0..h {
        if rows.contains(&row) {
            mask.data[row * w..(row + 1) * w].fill(true);
        } else {
            for col in 0..w {
                sparse.clear_pixel(row, col);
            }
        }
    }
    Ok((sparse, mask))
}

/// Sequence id of a sweep path: the first ancestor directory whose name
/// contains `_drive_` (KITTI-360 naming), otherwise the parent directory.
pub fn sequence_id(path: &Path) -> String {
    path.ancestors()
        .skip(1)
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()))
        .find(|n| n.contains("_drive_"))
        .or_else(|| {
            path.parent()
                .and_then(|p| p.file_name())
                .and_then(|n| n.to_str())
        })
        .unwrap_or("")
        .to_string()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

/// Puts every sweep of the first `test_sequences` sequences (sorted by id)
/// into the test split and the rest into train.
pub fn split_by_sequence(paths: &[PathBuf], test_sequences: usize) -> DatasetSplit {
    let ids: BTreeSet<String> = paths.iter().map(|p| sequence_id(p)).collect();
    let test_ids: BTreeSet<&String> = ids.iter().take(test_sequences).collect();
    let mut split = DatasetSplit::default();
    let mut sorted = paths.to_vec();
    sorted.sort();
    for p in sorted {
        if test_ids.contains(&sequence_id(&p)) {
            split.test.push(p);
        } else {
            split.train.push(p);
        }
    }
    split
}

pub fn write_manifest(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| format!("{}\n", p.display())).collect()
}

pub fn read_manifest(text: &str) -> Vec<PathBuf> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(PathBuf::from)
        .collect()
}
