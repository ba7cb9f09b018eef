//! Binary checkpoint format for parameter stores.
//!
//! Layout: the 4-byte magic `EXL1`, then one record per parameter in
//! registration order until end of file. Each record is the name length
//! (u64 LE) and UTF-8 name, the rank (u64 LE), one extent per dimension
//! (u64 LE), and the values as f32 little-endian in row-major order.
//! A JSON sidecar at `<path>.json` carries model configuration and metadata.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};
use crate::numerics::store::ParameterStore;
use crate::numerics::tensor::{Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EXL1";

/// Path of the JSON sidecar that accompanies a checkpoint.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".json");
    PathBuf::from(name)
}

/// Serializes every parameter to `path`, then fsync-free atomic rename.
pub fn save<E: Element>(path: &Path, store: &ParameterStore<E>) -> Result<()> {
    let tmp = temp_sibling(path);
    {
        let file = File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(tmp.display().to_string(), e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
        for (name, value) in store.iter() {
            w.write_all(&(name.len() as u64).to_le_bytes()).map_err(io_err)?;
            w.write_all(name.as_bytes()).map_err(io_err)?;
            w.write_all(&2u64.to_le_bytes()).map_err(io_err)?;
            w.write_all(&(value.rows() as u64).to_le_bytes()).map_err(io_err)?;
            w.write_all(&(value.cols() as u64).to_le_bytes()).map_err(io_err)?;
            for v in value.data() {
                w.write_all(&(v.to_f64() as f32).to_le_bytes()).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a checkpoint back into a fresh parameter store.
pub fn load<E: Element>(path: &Path) -> Result<ParameterStore<E>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("checkpoint {}", path.display())));
    }
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(&display, "file too short for magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(&display, format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}")));
    }

    let mut store = ParameterStore::new();
    loop {
        let name_len = match read_u64_opt(&mut r, &display)? {
            Some(v) => v as usize,
            None => break,
        };
        if name_len > 1 << 20 {
            return Err(Error::format(&display, format!("implausible name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| Error::format(&display, "truncated parameter name"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format(&display, "parameter name is not UTF-8"))?;

        let rank = read_u64(&mut r, &display, "rank")? as usize;
        if rank == 0 || rank > 2 {
            return Err(Error::format(&display, format!("parameter {name:?} has unsupported rank {rank}")));
        }
        let mut extents = Vec::with_capacity(rank);
        for d in 0..rank {
            extents.push(read_u64(&mut r, &display, &format!("extent {d} of {name:?}"))? as usize);
        }
        let (rows, cols) = if rank == 1 {
            (1, extents[0])
        } else {
            (extents[0], extents[1])
        };
        let count = rows.checked_mul(cols).ok_or_else(|| {
            Error::format(&display, format!("parameter {name:?} extents overflow"))
        })?;
        if count > 1 << 30 {
            return Err(Error::format(&display, format!("parameter {name:?} implausibly large ({count} values)")));
        }
        let mut data = Vec::with_capacity(count);
        let mut buf = [0u8; 4];
        for _ in 0..count {
            r.read_exact(&mut buf)
                .map_err(|_| Error::format(&display, format!("truncated values for parameter {name:?}")))?;
            data.push(E::from_f64(f32::from_le_bytes(buf) as f64));
        }
        let tensor = Tensor::from_vec(rows, cols, data)?;
        store
            .register(name.clone(), tensor)
            .map_err(|_| Error::format(&display, format!("duplicate parameter {name:?}")))?;
    }
    Ok(store)
}

/// Saves a checkpoint plus a JSON sidecar describing it.
pub fn save_with_meta<E: Element, M: Serialize>(
    path: &Path,
    store: &ParameterStore<E>,
    meta: &M,
) -> Result<()> {
    save(path, store)?;
    let sidecar = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::json(sidecar.display().to_string(), e))?;
    write_atomic(&sidecar, json.as_bytes())
}

/// Loads the JSON sidecar written by [`save_with_meta`].
pub fn load_meta<M: DeserializeOwned>(path: &Path) -> Result<M> {
    let sidecar = sidecar_path(path);
    if !sidecar.exists() {
        return Err(Error::MissingArtifact(format!("checkpoint sidecar {}", sidecar.display())));
    }
    let text = std::fs::read_to_string(&sidecar)
        .map_err(|e| Error::io(sidecar.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(sidecar.display().to_string(), e))
}

/// Writes `bytes` to `path` via a temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(format!(".tmp.{}", std::process::id()));
    PathBuf::from(name)
}

fn read_u64_opt(r: &mut impl Read, path: &str) -> Result<Option<u64>> {
    let mut buf = [0u8; 8];
    let mut filled = 0;
    while filled < 8 {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(Error::format(path, "truncated length field")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(Error::io(path, e)),
        }
    }
    Ok(Some(u64::from_le_bytes(buf)))
}

fn read_u64(r: &mut impl Read, path: &str, what: &str) -> Result<u64> {
    read_u64_opt(r, path)?.ok_or_else(|| Error::format(path, format!("truncated {what}")))
}
