//! On-disk formats: the canonical range-image container, an NPZ export for
//! numpy interop, and ASCII PLY point clouds.
//!
//! Container layout (little-endian):
//!
//! ```text
//! magic     b"RIMG"
//! version   u32 = 1
//! height    u32
//! width     u32
//! theta_min, theta_max, depth_log_divisor, intensity_divisor, min_depth   f64 x 5
//! depth     f32 x H*W  (row-major)
//! intensity f32 x H*W
//! mask      u8  x H*W  (0 or 1)
//! ```

use std::io::{Cursor, Read, Seek, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, ProjectionConfig, RangeImage};

pub const RANGE_IMAGE_MAGIC: &[u8; 4] = b"RIMG";
pub const RANGE_IMAGE_VERSION: u32 = 1;

pub fn write_range_image<W: Write>(
    mut w: W,
    img: &RangeImage,
    cfg: &ProjectionConfig,
) -> Result<()> {
    w.write_all(RANGE_IMAGE_MAGIC)?;
    w.write_u32::<LittleEndian>(RANGE_IMAGE_VERSION)?;
    w.write_u32::<LittleEndian>(img.height() as u32)?;
    w.write_u32::<LittleEndian>(img.width() as u32)?;
    for v in [
        cfg.theta_min,
        cfg.theta_max,
        cfg.depth_log_divisor,
        cfg.intensity_divisor,
        cfg.min_depth,
    ] {
        w.write_f64::<LittleEndian>(v)?;
    }
    for &v in img.depth().iter().chain(img.intensity()) {
        w.write_f32::<LittleEndian>(v)?;
    }
    let mask: Vec<u8> = img.mask().iter().map(|&m| m as u8).collect();
    w.write_all(&mask)?;
    Ok(())
}

pub fn read_range_image<R: Read>(mut r: R) -> Result<(RangeImage, ProjectionConfig)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != RANGE_IMAGE_MAGIC {
        return Err(Error::Format(format!("bad range image magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != RANGE_IMAGE_VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version}"
        )));
    }
    let height = r.read_u32::<LittleEndian>()? as usize;
    let width = r.read_u32::<LittleEndian>()? as usize;
    let mut f = [0.0; 5];
    for v in &mut f {
        *v = r.read_f64::<LittleEndian>()?;
    }
    let cfg = ProjectionConfig {
        height,
        width,
        theta_min: f[0],
        theta_max: f[1],
        depth_log_divisor: f[2],
        intensity_divisor: f[3],
        min_depth: f[4],
    };
    cfg.validate()?;
    let n = height * width;
    let read_f32s = |r: &mut R| -> Result<Vec<f32>> {
        let mut v = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut v)?;
        Ok(v)
    };
    let depth = read_f32s(&mut r)?;
    let intensity = read_f32s(&mut r)?;
    let mut mask = vec![0u8; n];
    r.read_exact(&mut mask)?;
    if mask.iter().any(|&m| m > 1) {
        return Err(Error::Format("mask bytes must be 0 or 1".into()));
    }
    let img = RangeImage::from_parts(
        height,
        width,
        depth,
        intensity,
        mask.into_iter().map(|m| m == 1).collect(),
    )?;
    Ok((img, cfg))
}

pub fn save_range_image(path: &Path, img: &RangeImage, cfg: &ProjectionConfig) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::at_path(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_range_image(&mut w, img, cfg)?;
    w.flush().map_err(|e| Error::at_path(path, e))?;
    Ok(())
}

pub fn load_range_image(path: &Path) -> Result<(RangeImage, ProjectionConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::at_path(path, e))?;
    read_range_image(Cursor::new(bytes))
}

// --- NPZ ---------------------------------------------------------------

/// Typed array stored in an NPZ archive.
#[derive(Debug, Clone, PartialEq)]
pub enum NpyArray {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl NpyArray {
    fn descr(&self) -> &'static str {
        match self {
            NpyArray::F32 { .. } => "<f4",
            NpyArray::F64 { .. } => "<f8",
            NpyArray::U8 { .. } => "|u1",
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            NpyArray::F32 { shape, .. }
            | NpyArray::F64 { shape, .. }
            | NpyArray::U8 { shape, .. } => shape,
        }
    }
}

fn npy_bytes(arr: &NpyArray) -> Vec<u8> {
    let shape = arr.shape();
    let shape_str = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        arr.descr(),
        shape_str
    );
    // magic(6) + version(2) + len(2) + header + '\n' padded to 64 bytes
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::new();
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match arr {
        NpyArray::F32 { data, .. } => data.iter().for_each(|v| out.extend(v.to_le_bytes())),
        NpyArray::F64 { data, .. } => data.iter().for_each(|v| out.extend(v.to_le_bytes())),
        NpyArray::U8 { data, .. } => out.extend_from_slice(data),
    }
    out
}

fn parse_npy(bytes: &[u8]) -> Result<NpyArray> {
    let bad = |m: &str| Error::Format(format!("npy: {m}"));
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(bad("missing magic"));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(
        bytes
            .get(10..10 + hlen)
            .ok_or_else(|| bad("short header"))?,
    )
    .map_err(|_| bad("header not utf-8"))?;
    let field = |key: &str| -> Result<&str> {
        let start = header.find(key).ok_or_else(|| bad(&format!("no {key}")))? + key.len();
        Ok(header[start..].trim_start_matches([':', ' ', '\'']))
    };
    let descr: String = field("'descr'")?
        .chars()
        .take_while(|&c| c != '\'')
        .collect();
    if field("'fortran_order'")?.starts_with("True") {
        return Err(bad("fortran order unsupported"));
    }
    let shape_str = field("'shape'")?;
    let open = shape_str.find('(').ok_or_else(|| bad("shape"))?;
    let close = shape_str.find(')').ok_or_else(|| bad("shape"))?;
    let shape: Vec<usize> = shape_str[open + 1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad("shape entry")))
        .collect::<Result<_>>()?;
    let n: usize = shape.iter().product();
    let body = &bytes[10 + hlen..];
    let need = |size: usize| -> Result<&[u8]> {
        body.get(..n * size).ok_or_else(|| bad("truncated data"))
    };
    Ok(match descr.as_str() {
        "<f4" => NpyArray::F32 {
            data: need(4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            shape,
        },
        "<f8" => NpyArray::F64 {
            data: need(8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            shape,
        },
        "|u1" => NpyArray::U8 {
            data: need(1)?.to_vec(),
            shape,
        },
        other => return Err(bad(&format!("unsupported dtype {other}"))),
    })
}

/// Writes named arrays as an uncompressed `.npz` archive.
pub fn write_npz<W: Write + Seek>(w: W, arrays: &[(&str, NpyArray)]) -> Result<()> {
    let mut zip = zip::ZipWriter::new(w);
    let opts =
        zip::write::SimpleFileOptions::default().compression_method(zip::CompressionMethod::Stored);
    for (name, arr) in arrays {
        zip.start_file(format!("{name}.npy"), opts)
            .map_err(|e| Error::Format(e.to_string()))?;
        zip.write_all(&npy_bytes(arr))?;
    }
    zip.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn read_npz<R: Read + Seek>(r: R) -> Result<Vec<(String, NpyArray)>> {
    let mut zip = zip::ZipArchive::new(r).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    for i in 0..zip.len() {
        let mut f = zip.by_index(i).map_err(|e| Error::Format(e.to_string()))?;
        let name = f.name().trim_end_matches(".npy").to_string();
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        out.push((name, parse_npy(&bytes)?));
    }
    Ok(out)
}

/// Arrays `depth`, `intensity` (float32 `H x W`), `mask` (uint8 `H x W`) and
/// `config` (float64: theta_min, theta_max, c, q, min_depth).
pub fn range_image_npz_arrays(
    img: &RangeImage,
    cfg: &ProjectionConfig,
) -> Vec<(&'static str, NpyArray)> {
    let shape = vec![img.height(), img.width()];
    vec![
        (
            "depth",
            NpyArray::F32 {
                shape: shape.clone(),
                data: img.depth().to_vec(),
            },
        ),
        (
            "intensity",
            NpyArray::F32 {
                shape: shape.clone(),
                data: img.intensity().to_vec(),
            },
        ),
        (
            "mask",
            NpyArray::U8 {
                shape,
                data: img.mask().iter().map(|&m| m as u8).collect(),
            },
        ),
        (
            "config",
            NpyArray::F64 {
                shape: vec![5],
                data: vec![
                    cfg.theta_min,
                    cfg.theta_max,
                    cfg.depth_log_divisor,
                    cfg.intensity_divisor,
                    cfg.min_depth,
                ],
            },
        ),
    ]
}

pub fn export_range_image_npz(path: &Path, img: &RangeImage, cfg: &ProjectionConfig) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::at_path(path, e))?;
    write_npz(file, &range_image_npz_arrays(img, cfg))
}

pub fn import_range_image_npz<R: Read + Seek>(r: R) -> Result<(RangeImage, ProjectionConfig)> {
    let arrays = read_npz(r)?;
    let get = |name: &str| {
        arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Format(format!("npz missing array {name}")))
    };
    let (
        NpyArray::F32 { shape, data: depth },
        NpyArray::F32 {
            data: intensity, ..
        },
        NpyArray::U8 { data: mask, .. },
        NpyArray::F64 { data: c, .. },
    ) = (
        get("depth")?,
        get("intensity")?,
        get("mask")?,
        get("config")?,
    )
    else {
        return Err(Error::Format("npz arrays have unexpected dtypes".into()));
    };
    if shape.len() != 2 || c.len() != 5 {
        return Err(Error::Format("npz arrays have unexpected shapes".into()));
    }
    let cfg = ProjectionConfig {
        height: shape[0],
        width: shape[1],
        theta_min: c[0],
        theta_max: c[1],
        depth_log_divisor: c[2],
        intensity_divisor: c[3],
        min_depth: c[4],
    };
    let img = RangeImage::from_parts(
        shape[0],
        shape[1],
        depth.clone(),
        intensity.clone(),
        mask.iter().map(|&m| m != 0).collect(),
    )?;
    Ok((img, cfg))
}

// --- PLY ---------------------------------------------------------------

pub fn write_ply<W: Write>(mut w: W, pc: &PointCloud) -> Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", pc.len())?;
    for p in ["x", "y", "z", "intensity"] {
        writeln!(w, "property float {p}")?;
    }
    writeln!(w, "end_header")?;
    for ([x, y, z], r) in pc.iter() {
        writeln!(w, "{x} {y} {z} {r}")?;
    }
    Ok(())
}

pub fn read_ply<R: Read>(mut r: R) -> Result<PointCloud> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let mut lines = text.lines();
    let mut count = None;
    for line in lines.by_ref() {
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(
                n.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Format("ply vertex count".into()))?,
            );
        }
        if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| Error::Format("ply header has no vertex element".into()))?;
    let mut pc = PointCloud::with_capacity(count);
    for line in lines.take(count) {
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Format(format!("ply value {t}")))
            })
            .collect::<Result<_>>()?;
        if v.len() != 4 {
            return Err(Error::Format(format!("ply row has {} values", v.len())));
        }
        pc.push([v[0], v[1], v[2]], v[3])?;
    }
    if pc.len() != count {
        return Err(Error::Format("ply body shorter than header count".into()));
    }
    Ok(pc)
}
