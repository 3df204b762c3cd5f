//! File formats: CPCK checkpoints, CPTX patch containers, imager scene
//! files, profiler track CSVs, INI configs and run manifests.
//!
//! All binary payloads are little-endian. Writers go through a temp file
//! in the destination directory and rename into place, so a failed run
//! never leaves a partial output behind.

pub mod config;
pub mod cpck;
pub mod cptx;
pub mod manifest;
pub mod scene;
pub mod tracks;

use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic, expected {expected}")]
    BadMagic { path: String, expected: &'static str },
    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: String, version: u16 },
    #[error("{path}: truncated or corrupt ({detail})")]
    Corrupt { path: String, detail: String },
    #[error("{path}: {detail}")]
    Invalid { path: String, detail: String },
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, IoError>;

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn corrupt(path: &Path, detail: impl Into<String>) -> IoError {
    IoError::Corrupt {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Writes a file atomically: the payload is produced into a temp file in
/// the same directory, flushed, then renamed over the destination.
pub fn write_atomic(path: &Path, producer: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    {
        let mut writer = std::io::BufWriter::new(tmp.as_file_mut());
        producer(&mut writer)?;
        writer.flush().map_err(|e| io_err(path, e))?;
    }
    tmp.persist(path)
        .map_err(|e| io_err(path, e.error))?;
    Ok(())
}

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Cursor { buf, pos: 0, path }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(corrupt(
                self.path,
                format!("wanted {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
