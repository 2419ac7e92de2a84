//! Binary frame-pair files and dataset directories.
//!
//! Layout (all little-endian):
//!
//! | field     | type            |
//! |-----------|-----------------|
//! | magic     | `b"SFPR"`       |
//! | version   | u32             |
//! | flags     | u32: bit 0 gt_flow, bit 1 fg_mask |
//! | n_t, n_t1 | u32, u32        |
//! | ego       | 16 × f64, row-major 4×4 |
//! | points_t  | n_t × 3 × f32   |
//! | points_t1 | n_t1 × 3 × f32  |
//! | gt_flow   | n_t × 3 × f32 (if flagged) |
//! | fg_mask   | n_t × u8, 0 or 1 (if flagged) |
//!
//! A dataset is a directory of `*.sfpr` files, visited in lexicographic
//! filename order, plus an optional `manifest.toml` listing split membership.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, FormatError, Result};
use crate::geometry::{PointCloud, RigidTransform, Vec3};
use crate::synthdata::FramePair;

pub const FRAME_MAGIC: [u8; 4] = *b"SFPR";
pub const FRAME_VERSION: u32 = 1;
pub const FLAG_GT_FLOW: u32 = 1;
pub const FLAG_FG_MASK: u32 = 2;
/// Bytes before the point payload.
pub const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 4 + 128;
pub const FRAME_EXTENSION: &str = "sfpr";
pub const MANIFEST_NAME: &str = "manifest.toml";

fn payload_len(flags: u32, n_t: u64, n_t1: u64) -> u64 {
    let mut len = (n_t + n_t1) * 12;
    if flags & FLAG_GT_FLOW != 0 {
        len += n_t * 12;
    }
    if flags & FLAG_FG_MASK != 0 {
        len += n_t;
    }
    len
}

fn put_points(out: &mut Vec<u8>, pts: &[Vec3]) {
    for p in pts {
        for &v in p.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

/// Serialize `pair`. Ground points are dropped; positions and flow are
/// stored as `f32`.
pub fn encode_frame_pair(pair: &FramePair) -> Result<Vec<u8>> {
    pair.validate()?;
    let t = pair.cloud_t.without_ground();
    let t1 = pair.cloud_t1.without_ground();
    let n_t = u32::try_from(t.len()).map_err(|_| validation("cloud_t has too many points"))?;
    let n_t1 = u32::try_from(t1.len()).map_err(|_| validation("cloud_t1 has too many points"))?;
    let mut flags = 0;
    if t.gt_flow.is_some() {
        flags |= FLAG_GT_FLOW;
    }
    if t.foreground_mask.is_some() {
        flags |= FLAG_FG_MASK;
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload_len(flags, n_t as u64, n_t1 as u64) as usize);
    out.extend_from_slice(&FRAME_MAGIC);
    out.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&n_t.to_le_bytes());
    out.extend_from_slice(&n_t1.to_le_bytes());
    for v in pair.ego.to_row_major() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_points(&mut out, &t.positions);
    put_points(&mut out, &t1.positions);
    if let Some(f) = &t.gt_flow {
        put_points(&mut out, f);
    }
    if let Some(m) = &t.foreground_mask {
        out.extend(m.iter().map(|&b| b as u8));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> &[u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().expect("4 bytes"))
    }

    fn points(&mut self, n: usize, what: &str) -> std::result::Result<Vec<Vec3>, FormatError> {
        let raw = self.take(n * 12);
        let vals: Vec<f64> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::Payload(format!("{what} row {} is not finite", i / 3)));
        }
        Ok(vals.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
    }
}

pub fn decode_frame_pair(bytes: &[u8]) -> std::result::Result<FramePair, FormatError> {
    let short = |expected: usize| FormatError::SizeMismatch { expected: expected as u64, found: bytes.len() as u64 };
    if bytes.len() < 4 {
        return Err(short(HEADER_LEN));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != FRAME_MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(short(HEADER_LEN));
    }
    let mut c = Cursor { bytes, pos: 4 };
    let version = c.u32();
    if version != FRAME_VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let flags = c.u32();
    if flags & !(FLAG_GT_FLOW | FLAG_FG_MASK) != 0 {
        return Err(FormatError::BadFlags(flags));
    }
    let n_t = c.u32() as usize;
    let n_t1 = c.u32() as usize;
    let expected = HEADER_LEN as u64 + payload_len(flags, n_t as u64, n_t1 as u64);
    if bytes.len() as u64 != expected {
        return Err(FormatError::SizeMismatch { expected, found: bytes.len() as u64 });
    }
    let ego: [f64; 16] = std::array::from_fn(|_| f64::from_le_bytes(c.take(8).try_into().expect("8 bytes")));
    if ego[12..] != [0.0, 0.0, 0.0, 1.0] || !ego.iter().all(|v| v.is_finite()) {
        return Err(FormatError::Payload("ego is not a finite homogeneous transform".into()));
    }
    let ego = RigidTransform::from_row_major(&ego).map_err(|_| FormatError::NonOrthonormal)?;
    let positions_t = c.points(n_t, "points_t")?;
    let positions_t1 = c.points(n_t1, "points_t1")?;
    let gt_flow = if flags & FLAG_GT_FLOW != 0 { Some(c.points(n_t, "gt_flow")?) } else { None };
    let foreground_mask = if flags & FLAG_FG_MASK != 0 {
        let raw = c.take(n_t);
        if let Some(i) = raw.iter().position(|&b| b > 1) {
            return Err(FormatError::Payload(format!("fg_mask byte {i} is {}", raw[i])));
        }
        Some(raw.iter().map(|&b| b == 1).collect())
    } else {
        None
    };
    Ok(FramePair {
        cloud_t: PointCloud { positions: positions_t, gt_flow, foreground_mask, ground_mask: None },
        cloud_t1: PointCloud::new(positions_t1),
        ego,
    })
}

/// Write `pair` to `path` and fsync it.
pub fn write_frame_pair(pair: &FramePair, path: &Path) -> Result<()> {
    let bytes = encode_frame_pair(pair)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(path, e))
}

pub fn read_frame_pair(path: &Path) -> Result<FramePair> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_frame_pair(&bytes).map_err(|k| Error::format(path, k))
}

/// `*.sfpr` files directly inside `dir`, sorted by file name.
pub fn list_dataset(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == FRAME_EXTENSION) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Split membership by file name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub splits: BTreeMap<String, Vec<String>>,
}

pub fn read_manifest(dir: &Path) -> Result<Option<Manifest>> {
    let path = dir.join(MANIFEST_NAME);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map(Some).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST_NAME);
    let text = toml::to_string(manifest).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Files of `split`, or every file when `split` is `None`. Split files keep
/// the lexicographic order.
pub fn dataset_files(dir: &Path, split: Option<&str>) -> Result<Vec<PathBuf>> {
    let all = list_dataset(dir)?;
    let Some(split) = split else {
        return Ok(all);
    };
    let manifest = read_manifest(dir)?.ok_or_else(|| Error::Config(format!("{} has no {MANIFEST_NAME}", dir.display())))?;
    let names = manifest.splits.get(split).ok_or_else(|| Error::Config(format!("split {split:?} is not in the manifest")))?;
    for n in names {
        if !all.iter().any(|p| p.file_name().is_some_and(|f| f == n.as_str())) {
            return Err(validation(format!("manifest lists missing file {n:?}")));
        }
    }
    Ok(all.into_iter().filter(|p| p.file_name().and_then(|f| f.to_str()).is_some_and(|f| names.iter().any(|n| n == f))).collect())
}

pub fn load_dataset(dir: &Path, split: Option<&str>) -> Result<Vec<FramePair>> {
    dataset_files(dir, split)?.iter().map(|p| read_frame_pair(p)).collect()
}

/// File name of pair `index` in a generated dataset.
pub fn pair_file_name(index: usize) -> String {
    format!("pair_{index:06}.{FRAME_EXTENSION}")
}

/// Write `pairs` as `pair_000000.sfpr`, `pair_000001.sfpr`, ...
pub fn write_dataset(dir: &Path, pairs: &[FramePair]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let path = dir.join(pair_file_name(i));
            write_frame_pair(p, &path).map(|_| path)
        })
        .collect()
}
