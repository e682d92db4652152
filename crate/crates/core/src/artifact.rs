//! Versioned binary container for trained models.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DAMDL1" | u32 format version | u32 kind length | kind (utf-8)
//! u32 section count
//! repeated: u32 name length | name (utf-8) | u64 payload length | payload
//! ```
//!
//! Payloads are written with [`SectionWriter`]: fixed-width little-endian
//! `u64` and `f64` values, length-prefixed `f64` arrays and strings.

use std::fs;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 6] = b"DAMDL1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("not a model artifact (bad magic header)")]
    BadMagic,
    #[error("unsupported artifact version {0}")]
    UnsupportedVersion(u32),
    #[error("artifact is truncated")]
    Truncated,
    #[error("artifact holds a {found} model, expected {expected}")]
    WrongKind { expected: String, found: String },
    #[error("artifact is missing section {0:?}")]
    MissingSection(String),
    #[error("invalid artifact content: {0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    sections: Vec<(String, Vec<u8>)>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, payload: SectionWriter) {
        self.sections.push((name.into(), payload.0));
    }

    pub fn section(&self, name: &str) -> Result<SectionReader<'_>, ArtifactError> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| SectionReader { buf: p, pos: 0 })
            .ok_or_else(|| ArtifactError::MissingSection(name.to_string()))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), ArtifactError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(ArtifactError::WrongKind {
                expected: kind.to_string(),
                found: self.kind.clone(),
            })
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind.len() as u32).to_le_bytes());
        out.extend_from_slice(self.kind.as_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, payload) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArtifactError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ArtifactError::BadMagic);
        }
        let mut r = SectionReader {
            buf: bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ArtifactError::UnsupportedVersion(version));
        }
        let kind_len = r.u32()? as usize;
        let kind = r.utf8(kind_len)?;
        let n = r.u32()?;
        let mut sections = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = r.utf8(name_len)?;
            let len = r.u64()? as usize;
            sections.push((name, r.take(len)?.to_vec()));
        }
        if r.pos != bytes.len() {
            return Err(ArtifactError::Invalid("trailing bytes".into()));
        }
        Ok(Self { kind, sections })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ArtifactError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| ArtifactError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ArtifactError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| ArtifactError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Default)]
pub struct SectionWriter(Vec<u8>);

impl SectionWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn usize(&mut self, v: usize) -> &mut Self {
        self.u64(v as u64)
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        self.usize(vs.len());
        for v in vs {
            self.f64(*v);
        }
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
        self
    }
}

pub struct SectionReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> SectionReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ArtifactError> {
        let end = self.pos.checked_add(n).ok_or(ArtifactError::Truncated)?;
        let out = self
            .buf
            .get(self.pos..end)
            .ok_or(ArtifactError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ArtifactError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn utf8(&mut self, n: usize) -> Result<String, ArtifactError> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| ArtifactError::Invalid("non-utf8 string".into()))
    }

    pub fn u64(&mut self) -> Result<u64, ArtifactError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn usize(&mut self) -> Result<usize, ArtifactError> {
        usize::try_from(self.u64()?).map_err(|_| ArtifactError::Invalid("size overflow".into()))
    }

    pub fn f64(&mut self) -> Result<f64, ArtifactError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>, ArtifactError> {
        let n = self.usize()?;
        if n > self.buf.len() / 8 {
            return Err(ArtifactError::Truncated);
        }
        (0..n).map(|_| self.f64()).collect()
    }

    /// Reads a length-prefixed array and checks its length.
    pub fn f64s_exact(&mut self, len: usize) -> Result<Vec<f64>, ArtifactError> {
        let v = self.f64s()?;
        if v.len() != len {
            return Err(ArtifactError::Invalid(format!(
                "expected {len} values, found {}",
                v.len()
            )));
        }
        Ok(v)
    }

    pub fn str(&mut self) -> Result<String, ArtifactError> {
        let n = self.usize()?;
        self.utf8(n)
    }
}
