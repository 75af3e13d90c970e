//! Artifact writers: PGM images, JSON/CSV files and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::field::BinaryGrid;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let err = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Binary 8-bit PGM of `values` in `[0, 1]`, row-major with `j = 0` at the
/// bottom; 1 maps to black.
pub fn pgm_bytes(nx: usize, ny: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), nx * ny, "pgm size");
    let mut out = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    for j in (0..ny).rev() {
        for i in 0..nx {
            let v = values[j * nx + i].clamp(0.0, 1.0);
            out.push((255.0 * (1.0 - v)).round() as u8);
        }
    }
    out
}

pub fn write_pgm(path: &Path, nx: usize, ny: usize, values: &[f64]) -> Result<()> {
    write_bytes(path, &pgm_bytes(nx, ny, values))
}

pub fn write_grid_pgm(path: &Path, g: &BinaryGrid) -> Result<()> {
    let v: Vec<f64> = g
        .cells()
        .iter()
        .map(|&s| if s { 1.0 } else { 0.0 })
        .collect();
    write_pgm(path, g.nx(), g.ny(), &v)
}

/// Width, height and pixels of a binary PGM.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::Parse {
        path: path.display().to_string(),
        line: 1,
        msg: "not a binary PGM".into(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let nx: usize = fields[1].parse().map_err(|_| bad())?;
    let ny: usize = fields[2].parse().map_err(|_| bad())?;
    let px = bytes.get(pos..).ok_or_else(bad)?.to_vec();
    if px.len() != nx * ny {
        return Err(bad());
    }
    Ok((nx, ny, px))
}

/// Provenance record written by every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config_sha256: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: config_sha256.into(),
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    /// Records the hash of a file (or of every file in a directory) under
    /// its path relative to `root`.
    pub fn record(map: &mut BTreeMap<String, String>, root: &Path, path: &Path) -> Result<()> {
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
                .collect::<Result<_>>()?;
            entries.sort();
            for p in entries {
                Self::record(map, root, &p)?;
            }
            return Ok(());
        }
        let key = path
            .strip_prefix(root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        map.insert(key, sha256_file(path)?);
        Ok(())
    }

    pub fn input(&mut self, root: &Path, path: &Path) -> Result<()> {
        Self::record(&mut self.inputs, root, path)
    }

    pub fn output(&mut self, root: &Path, path: &Path) -> Result<()> {
        Self::record(&mut self.outputs, root, path)
    }
}
