//! Clip feature files and dataset manifests.
//!
//! Clip file layout: magic `EXC1`; id length (u32 LE) + UTF-8 id; label (u8,
//! where 2 = "correction" is folded into mistake on load); fps (f32 LE);
//! frame count N and feature dim F (u32 LE); payload of N×F f32 LE values.
//! The manifest is JSON: `{clips: [{path, split}], feature_dim, fps}` with
//! clip paths relative to the manifest's directory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::clip::{ClipRecord, Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::write_atomic;
use crate::numerics::tensor::Tensor;

pub const CLIP_MAGIC: &[u8; 4] = b"EXC1";
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub clips: Vec<ManifestEntry>,
    pub feature_dim: usize,
    pub fps: f64,
}

/// Writes one clip in the binary feature format.
pub fn save_clip(path: &Path, clip: &ClipRecord) -> Result<()> {
    clip.validate()?;
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(&display, e);
    w.write_all(CLIP_MAGIC).map_err(io_err)?;
    w.write_all(&(clip.id.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(clip.id.as_bytes()).map_err(io_err)?;
    w.write_all(&[clip.label]).map_err(io_err)?;
    w.write_all(&(clip.fps as f32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(clip.frame_count() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(clip.feature_dim() as u32).to_le_bytes()).map_err(io_err)?;
    for v in clip.features.data() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads one clip file; `split` comes from the manifest, not the file.
pub fn load_clip(path: &Path, split: Split) -> Result<ClipRecord> {
    let display = path.display().to_string();
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("clip file {display}")));
    }
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(&display, "file too short for magic"))?;
    if &magic != CLIP_MAGIC {
        return Err(Error::format(&display, format!("bad magic {magic:?}, expected {CLIP_MAGIC:?}")));
    }

    let id_len = read_u32(&mut r, &display, "id length")? as usize;
    if id_len == 0 || id_len > 4096 {
        return Err(Error::format(&display, format!("implausible id length {id_len}")));
    }
    let mut id_bytes = vec![0u8; id_len];
    r.read_exact(&mut id_bytes)
        .map_err(|_| Error::format(&display, "truncated clip id"))?;
    let id = String::from_utf8(id_bytes).map_err(|_| Error::format(&display, "clip id is not UTF-8"))?;

    let mut label = [0u8; 1];
    r.read_exact(&mut label)
        .map_err(|_| Error::format(&display, format!("truncated label for clip {id:?}")))?;
    // A third "correction" label is treated as a mistake.
    let label = match label[0] {
        0 | 2 => 0,
        1 => 1,
        other => {
            return Err(Error::format(&display, format!("clip {id:?} has invalid label byte {other}")))
        }
    };

    let mut fps_bytes = [0u8; 4];
    r.read_exact(&mut fps_bytes)
        .map_err(|_| Error::format(&display, format!("truncated fps for clip {id:?}")))?;
    let fps = f32::from_le_bytes(fps_bytes) as f64;
    if !(fps > 0.0) {
        return Err(Error::format(&display, format!("clip {id:?} has non-positive fps {fps}")));
    }

    let n = read_u32(&mut r, &display, &format!("frame count of clip {id:?}"))? as usize;
    let f = read_u32(&mut r, &display, &format!("feature dim of clip {id:?}"))? as usize;
    if n == 0 || f == 0 {
        return Err(Error::format(&display, format!("clip {id:?} declares empty geometry {n}x{f}")));
    }
    let mut data = Vec::with_capacity(n * f);
    let mut buf = [0u8; 4];
    for _ in 0..n * f {
        r.read_exact(&mut buf).map_err(|_| {
            Error::format(
                &display,
                format!("truncated payload for clip {id:?}: expected {n}x{f} features"),
            )
        })?;
        data.push(f32::from_le_bytes(buf));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(&display, e))? != 0 {
        return Err(Error::format(
            &display,
            format!("trailing bytes after payload of clip {id:?}: frame count mismatch"),
        ));
    }

    let clip = ClipRecord {
        id,
        features: Tensor::from_vec(n, f, data)?,
        duration: n as f64 / fps,
        fps,
        label,
        split,
    };
    clip.validate()
        .map_err(|e| Error::format(&display, e.to_string()))?;
    Ok(clip)
}

/// Writes every clip plus the manifest into `dir`.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut entries = Vec::with_capacity(dataset.clips.len());
    for clip in &dataset.clips {
        let file_name = format!("{}.exc1", clip.id);
        save_clip(&dir.join(&file_name), clip)?;
        entries.push(ManifestEntry {
            path: file_name,
            split: clip.split,
        });
    }
    let manifest = Manifest {
        clips: entries,
        feature_dim: dataset.feature_dim,
        fps: dataset.fps,
    };
    let manifest_path = dir.join(MANIFEST_NAME);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::json(manifest_path.display().to_string(), e))?;
    write_atomic(&manifest_path, json.as_bytes())?;
    Ok(manifest_path)
}

/// Loads a dataset from its manifest, validating every clip against the
/// manifest's feature geometry.
pub fn load_feature_files(manifest_path: &Path) -> Result<Dataset> {
    let display = manifest_path.display().to_string();
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(format!("dataset manifest {display}")));
    }
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(&display, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&display, e))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for entry in &manifest.clips {
        let clip = load_clip(&base.join(&entry.path), entry.split)?;
        if clip.feature_dim() != manifest.feature_dim {
            return Err(Error::format(
                base.join(&entry.path).display().to_string(),
                format!(
                    "clip {:?} has feature dim {}, manifest declares {}",
                    clip.id,
                    clip.feature_dim(),
                    manifest.feature_dim
                ),
            ));
        }
        if clip.fps != manifest.fps {
            return Err(Error::format(
                base.join(&entry.path).display().to_string(),
                format!("clip {:?} has fps {}, manifest declares {}", clip.id, clip.fps, manifest.fps),
            ));
        }
        clips.push(clip);
    }
    Dataset::new(clips)
}

/// Resolves the manifest path from either a dataset directory or a direct
/// manifest file path.
pub fn resolve_manifest(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_NAME)
    } else {
        data.to_path_buf()
    }
}

fn read_u32(r: &mut impl Read, path: &str, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(path, format!("truncated {what}")))?;
    Ok(u32::from_le_bytes(buf))
}
