//! Bit-exact persistence: binary matrix blocks and hashed JSON manifests.
//!
//! # Block format
//!
//! A `.hrmb` file is a little-endian header followed by the payload:
//!
//! ```text
//! offset  size  content
//! 0       6     magic "HRMB1\0"
//! 6       1     dtype code (0 = f64)
//! 7       1     order flag (1 = row-major)
//! 8       8     n_rows, u64 LE
//! 16      8     n_cols, u64 LE
//! 24      8*r*c payload, IEEE-754 doubles LE, row-major
//! ```
//!
//! Doubles round-trip through their raw bit patterns, so NaN payloads and
//! signed infinities persist exactly.
//!
//! # Manifests
//!
//! Each pipeline stage writes a `manifest.json` listing every block with its
//! SHA-256 content hash, the resolved run configuration, and the seeds in
//! force. Manifests deliberately contain no timestamps: byte-identical
//! inputs must produce byte-identical manifests. Wall-clock measurements go
//! to separate, unhashed report files.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BLOCK_MAGIC: &[u8; 6] = b"HRMB1\0";
const DTYPE_F64: u8 = 0;
const ORDER_ROW_MAJOR: u8 = 1;

/// Writes a matrix block; row-major f64 payload.
pub fn write_block(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + 8 * m.len());
    buf.extend_from_slice(BLOCK_MAGIC);
    buf.push(DTYPE_F64);
    buf.push(ORDER_ROW_MAJOR);
    buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            buf.extend_from_slice(&m[(r, c)].to_bits().to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a matrix block written by [`write_block`].
pub fn read_block(path: &Path) -> Result<DMatrix<f64>> {
    let display = path.display().to_string();
    let mut file = fs::File::open(path)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;

    if buf.len() < 24 {
        return Err(Error::BlockTruncated {
            path: display,
            detail: format!("{} bytes, header needs 24", buf.len()),
        });
    }
    if &buf[0..6] != BLOCK_MAGIC {
        return Err(Error::BadMagic { path: display });
    }
    if buf[6] != DTYPE_F64 {
        return Err(Error::BadBlockLayout {
            path: display,
            detail: format!("dtype code {}", buf[6]),
        });
    }
    if buf[7] != ORDER_ROW_MAJOR {
        return Err(Error::BadBlockLayout {
            path: display,
            detail: format!("order flag {}", buf[7]),
        });
    }
    let rows = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(buf[16..24].try_into().unwrap()) as usize;
    let expected = 24 + 8 * rows * cols;
    if buf.len() != expected {
        return Err(Error::BlockTruncated {
            path: display,
            detail: format!("{} bytes, expected {expected}", buf.len()),
        });
    }

    let mut m = DMatrix::zeros(rows, cols);
    let mut off = 24;
    for r in 0..rows {
        for c in 0..cols {
            let bits = u64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
            m[(r, c)] = f64::from_bits(bits);
            off += 8;
        }
    }
    Ok(m)
}

/// SHA-256 of a file's contents, lowercase hex.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher)?;
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One file reference inside a manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFile {
    /// Path relative to the manifest's directory.
    pub name: String,
    pub rows: u64,
    pub cols: u64,
    pub sha256: String,
}

/// Self-validating description of one pipeline stage's outputs.
///
/// `config` echoes the fully resolved run configuration verbatim;
/// `inputs` references upstream manifests by hash so `verify` can walk the
/// chain. No timestamps by design (see module docs).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    /// Stage kind: "mesh", "fom", "reduce", "galerkin", "hyper", "rom", "sweep", "diag".
    pub kind: String,
    pub tool: String,
    pub seed: u64,
    pub threads: usize,
    pub config: serde_json::Value,
    /// Upstream manifest hashes keyed by stage kind.
    pub inputs: Vec<ManifestInput>,
    pub files: Vec<ManifestFile>,
    /// Stage-specific scalar outputs worth pinning (deterministic only).
    #[serde(default)]
    pub notes: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestInput {
    pub kind: String,
    pub sha256: String,
}

impl Manifest {
    pub fn new(kind: &str, seed: u64, threads: usize, config: serde_json::Value) -> Self {
        Manifest {
            schema_version: 1,
            kind: kind.to_string(),
            tool: format!("hyperrom {}", env!("CARGO_PKG_VERSION")),
            seed,
            threads,
            config,
            inputs: Vec::new(),
            files: Vec::new(),
            notes: serde_json::Value::Null,
        }
    }

    /// Writes `m` as `<name>.hrmb` under `dir` and records it.
    pub fn add_block(&mut self, dir: &Path, name: &str, m: &DMatrix<f64>) -> Result<()> {
        let file = format!("{name}.hrmb");
        let path = dir.join(&file);
        write_block(&path, m)?;
        self.files.push(ManifestFile {
            name: file,
            rows: m.nrows() as u64,
            cols: m.ncols() as u64,
            sha256: sha256_file(&path)?,
        });
        Ok(())
    }

    pub fn block_path(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        let file = format!("{name}.hrmb");
        if !self.files.iter().any(|f| f.name == file) {
            return Err(Error::MissingArtifact(format!(
                "block {name} not listed in {} manifest",
                self.kind
            )));
        }
        Ok(dir.join(file))
    }

    /// Reads a listed block after checking its content hash.
    pub fn read_checked(&self, dir: &Path, name: &str) -> Result<DMatrix<f64>> {
        let file = format!("{name}.hrmb");
        let entry = self
            .files
            .iter()
            .find(|f| f.name == file)
            .ok_or_else(|| Error::MissingArtifact(format!("block {name} in {}", self.kind)))?;
        let path = dir.join(&file);
        let actual = sha256_file(&path)?;
        if actual != entry.sha256 {
            return Err(Error::HashMismatch {
                path: path.display().to_string(),
                expected: entry.sha256.clone(),
                actual,
            });
        }
        read_block(&path)
    }
}

/// Serializes a manifest as `manifest.json` under `dir`.
pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "no manifest at {}",
            path.display()
        )));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Re-hashes every file listed in the manifest under `dir`.
pub fn verify_manifest(dir: &Path) -> Result<Manifest> {
    let manifest = read_manifest(dir)?;
    for f in &manifest.files {
        let path = dir.join(&f.name);
        let actual = sha256_file(&path)?;
        if actual != f.sha256 {
            return Err(Error::HashMismatch {
                path: path.display().to_string(),
                expected: f.sha256.clone(),
                actual,
            });
        }
    }
    Ok(manifest)
}

/// Hash of a directory's manifest file, used to chain stages.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    sha256_file(&dir.join("manifest.json"))
}
