//! `<scan_id>/volume.raw` holds a fixed header followed by little-endian
//! `f32` pixels; `<scan_id>/meta.json` holds the metadata.

use std::fs;
use std::path::{Path, PathBuf};

use super::{ScanMetadata, SetId, VolumetricScan};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SPGC";
pub const FORMAT_VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 3 * 4;
const VOLUME_FILE: &str = "volume.raw";
const META_FILE: &str = "meta.json";

/// Writes `scan` under `parent/<scan_id>/` and returns that directory.
pub fn save_scan(scan: &VolumetricScan, parent: &Path) -> Result<PathBuf> {
    let id = &scan.meta.scan_id;
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::invalid(format!("scan id `{id}` is not a valid directory name")));
    }
    let dir = parent.join(id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * scan.pixels.len());
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in [scan.n_slices, scan.height, scan.width] {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} exceeds u32")))?;
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for v in &scan.pixels {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let volume = dir.join(VOLUME_FILE);
    fs::write(&volume, bytes).map_err(|e| Error::io(&volume, e))?;
    let meta = dir.join(META_FILE);
    let json = serde_json::to_vec_pretty(&scan.meta)?;
    fs::write(&meta, json).map_err(|e| Error::io(&meta, e))?;
    Ok(dir)
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(offset as u64, "header truncated"))
}

fn decode_volume(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    match bytes.get(..4) {
        Some(m) if m == MAGIC => {}
        Some(m) => return Err(Error::format(0, format!("bad magic {m:02x?}"))),
        None => return Err(Error::format(0, "header truncated")),
    }
    let version = bytes
        .get(4..6)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or_else(|| Error::format(4, "header truncated"))?;
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let n = read_u32(bytes, 6)? as usize;
    let h = read_u32(bytes, 10)? as usize;
    let w = read_u32(bytes, 14)? as usize;
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::format(6, format!("empty volume {n}x{h}x{w}")));
    }
    let expected = n
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::format(6, "declared size overflows"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("payload truncated: {} of {expected} bytes", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(Error::format(
            (HEADER_LEN + expected) as u64,
            format!("{} trailing bytes", payload.len() - expected),
        ));
    }
    let pixels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((n, h, w, pixels))
}

/// Reads a scan directory written by [`save_scan`].
pub fn load_scan(dir: &Path) -> Result<VolumetricScan> {
    let volume = dir.join(VOLUME_FILE);
    let bytes = fs::read(&volume).map_err(|e| Error::io(&volume, e))?;
    let (n_slices, height, width, pixels) =
        decode_volume(&bytes).map_err(|e| e.context(volume.display().to_string()))?;
    let meta_path = dir.join(META_FILE);
    let text = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: ScanMetadata = serde_json::from_slice(&text)
        .map_err(|e| Error::from(e).context(meta_path.display().to_string()))?;
    if let Some(&bad) = meta.infected_slices.iter().find(|&&z| z >= n_slices) {
        return Err(Error::invalid(format!(
            "{}: infected slice {bad} out of range for {n_slices} slices",
            meta_path.display()
        )));
    }
    Ok(VolumetricScan {
        n_slices,
        height,
        width,
        pixels,
        meta,
    })
}

/// Scan directories directly under `dir`, sorted by name.
pub fn list_scan_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.join(VOLUME_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Loads every scan of `set` from `root/<set>/`.
pub fn load_set(root: &Path, set: SetId) -> Result<Vec<VolumetricScan>> {
    list_scan_dirs(&root.join(set.dir_name()))?
        .iter()
        .map(|d| load_scan(d))
        .collect()
}
