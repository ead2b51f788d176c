//! On-disk formats. All binary payloads are little-endian; every header is
//! a single line of JSON after a one-line magic, so files can be inspected
//! with `head -c 4096`.
//!
//! Volume (`.vol`):
//! ```text
//! GWVOL 1\n
//! {"dims":[nx,ny,nz],"ndim":2,"spacing_mm":[..],"origin_mm":[..],"channels":c,"dtype":"f64"}\n
//! <nx*ny*nz*c values, x fastest, then y, z, channel>
//! ```
//! `dtype` is `f64` (8 bytes) or `u8` (binary masks).
//!
//! Checkpoint (`.ckpt`):
//! ```text
//! GWCKPT 1\n
//! {"kind":..,"meta":{..},"tensors":[{"name":..,"shape":[..]},..]}\n
//! <f64 values of every tensor in header order>
//! ```
//! The fingerprint of a checkpoint is the SHA-256 of the whole file.

use std::fs;
use std::io::Write;
use std::path::Path;

use gwinpaint_core::geometry::{BinaryMask, VolumeGrid};
use gwinpaint_core::nn::Tensor;
use gwinpaint_core::Volume;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const VOL_MAGIC: &str = "GWVOL 1";
pub const CKPT_MAGIC: &str = "GWCKPT 1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolHeader {
    pub dims: [usize; 3],
    pub ndim: usize,
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub channels: usize,
    pub dtype: String,
}

impl VolHeader {
    fn of(grid: &VolumeGrid, channels: usize, dtype: &str) -> Self {
        Self { dims: grid.shape(), ndim: grid.ndim(), spacing_mm: grid.spacing(), origin_mm: grid.origin(), channels, dtype: dtype.into() }
    }

    pub fn grid(&self) -> gwinpaint_core::Result<VolumeGrid> {
        GridMeta { dims: self.dims, ndim: self.ndim, spacing_mm: self.spacing_mm, origin_mm: self.origin_mm }.grid()
    }
}

/// Grid geometry as stored in metadata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridMeta {
    pub dims: [usize; 3],
    pub ndim: usize,
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
}

impl GridMeta {
    pub fn of(g: &VolumeGrid) -> Self {
        Self { dims: g.shape(), ndim: g.ndim(), spacing_mm: g.spacing(), origin_mm: g.origin() }
    }

    pub fn grid(&self) -> gwinpaint_core::Result<VolumeGrid> {
        let (d, s, o) = (self.dims, self.spacing_mm, self.origin_mm);
        if self.ndim == 2 {
            VolumeGrid::new_2d([d[0], d[1]], [s[0], s[1]], [o[0], o[1]])
        } else {
            VolumeGrid::new_3d(d, s, o)
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_fingerprint(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read(path)?))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Write via a temporary file and rename, creating parent directories.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("part");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read(path)?).map_err(|e| Error::format(path, e.to_string()))
}

fn split_header<'a>(path: &Path, bytes: &'a [u8], magic: &str) -> Result<(&'a [u8], &'a [u8])> {
    let m = magic.len();
    if bytes.len() < m + 1 || &bytes[..m] != magic.as_bytes() || bytes[m] != b'\n' {
        return Err(Error::format(path, format!("missing '{magic}' magic")));
    }
    let rest = &bytes[m + 1..];
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::format(path, "unterminated header"))?;
    Ok((&rest[..nl], &rest[nl + 1..]))
}

fn frame(magic: &str, header: &impl Serialize, payload_len: usize) -> Vec<u8> {
    let h = serde_json::to_string(header).expect("headers serialize");
    let mut out = Vec::with_capacity(magic.len() + h.len() + 2 + payload_len);
    out.extend_from_slice(magic.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(h.as_bytes());
    out.push(b'\n');
    out
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = frame(VOL_MAGIC, &VolHeader::of(&v.grid, v.channels, "f64"), v.len() * 8);
    for x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_mask(m: &BinaryMask) -> Vec<u8> {
    let mut out = frame(VOL_MAGIC, &VolHeader::of(&m.grid, 1, "u8"), m.values.len());
    out.extend(m.values.iter().map(|&b| b as u8));
    out
}

fn decode_vol(path: &Path, bytes: &[u8]) -> Result<(VolHeader, VolumeGrid, Vec<f64>)> {
    let (h, payload) = split_header(path, bytes, VOL_MAGIC)?;
    let header: VolHeader = serde_json::from_slice(h).map_err(|e| Error::format(path, e.to_string()))?;
    let grid = header.grid()?;
    let n = grid.len() * header.channels;
    let data: Vec<f64> = match header.dtype.as_str() {
        "f64" if payload.len() == n * 8 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        "u8" if payload.len() == n => payload.iter().map(|&b| b as f64).collect(),
        "f64" | "u8" => return Err(Error::format(path, format!("payload has {} bytes for {} values", payload.len(), n))),
        other => return Err(Error::format(path, format!("unsupported dtype '{other}'"))),
    };
    Ok((header, grid, data))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_atomic(path, &encode_volume(v))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let (h, grid, data) = decode_vol(path, &read(path)?)?;
    Ok(Volume::from_data(grid, h.channels, data)?)
}

pub fn write_mask(path: &Path, m: &BinaryMask) -> Result<()> {
    write_atomic(path, &encode_mask(m))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let (h, grid, data) = decode_vol(path, &read(path)?)?;
    if h.channels != 1 || h.dtype != "u8" {
        return Err(Error::format(path, "masks are single-channel u8 volumes"));
    }
    Ok(BinaryMask { grid, values: data.iter().map(|&v| v != 0.0).collect() })
}

/// 8-bit binary PGM of slice `z` of channel 0, values clamped to [0, 1].
pub fn encode_pgm(v: &Volume, z: usize) -> Vec<u8> {
    let (nx, ny) = (v.grid.nx(), v.grid.ny());
    let mut out = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    let plane = &v.data[z * nx * ny..(z + 1) * nx * ny];
    // Image rows run top to bottom; y grows upwards in the phantom frame.
    for y in (0..ny).rev() {
        out.extend(plane[y * nx..(y + 1) * nx].iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CkptHeader {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
    pub fingerprint: String,
}

impl Checkpoint {
    pub fn meta_as<T: for<'de> Deserialize<'de>>(&self, path: &Path) -> Result<T> {
        serde_json::from_value(self.meta.clone()).map_err(|e| Error::format(path, format!("checkpoint metadata: {e}")))
    }
}

pub fn encode_checkpoint(kind: &str, meta: &impl Serialize, names: &[String], tensors: &[Tensor]) -> Vec<u8> {
    let header = CkptHeader {
        kind: kind.into(),
        meta: serde_json::to_value(meta).expect("metadata serializes"),
        tensors: names.iter().zip(tensors).map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape.clone() }).collect(),
    };
    let total: usize = tensors.iter().map(|t| t.len()).sum();
    let mut out = frame(CKPT_MAGIC, &header, total * 8);
    for t in tensors {
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Write a checkpoint and return its fingerprint.
pub fn write_checkpoint(path: &Path, kind: &str, meta: &impl Serialize, names: &[String], tensors: &[Tensor]) -> Result<String> {
    let bytes = encode_checkpoint(kind, meta, names, tensors);
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_checkpoint(path: &Path, expect_kind: &str) -> Result<Checkpoint> {
    let bytes = read(path)?;
    let (h, payload) = split_header(path, &bytes, CKPT_MAGIC)?;
    let header: CkptHeader = serde_json::from_slice(h).map_err(|e| Error::format(path, e.to_string()))?;
    if header.kind != expect_kind {
        return Err(Error::Compatibility(format!("{} holds a '{}' checkpoint, expected '{}'", path.display(), header.kind, expect_kind)));
    }
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(Error::format(path, format!("payload has {} bytes for {} values", payload.len(), total)));
    }
    let mut vals = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let tensors = header
        .tensors
        .iter()
        .map(|e| {
            let n = e.shape.iter().product();
            (e.name.clone(), Tensor::new(&e.shape, vals.by_ref().take(n).collect()))
        })
        .collect();
    Ok(Checkpoint { kind: header.kind, meta: header.meta, tensors, fingerprint: sha256_hex(&bytes) })
}
