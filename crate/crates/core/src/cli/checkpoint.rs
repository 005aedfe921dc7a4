//! Binary checkpoint container.
//!
//! ```text
//! magic        8 bytes   "VAECKPT1"
//! version      u32       1
//! meta_len     u64       byte length of the metadata block
//! metadata     UTF-8     sorted `key=value` lines, `\` and newline escaped
//! n_entries    u32
//! entry        name_len u32, name UTF-8, dtype u8 (0 = f32, 1 = f64),
//!              ndim u32, dims u64 × ndim, payload
//! ```
//!
//! Every integer and float is little-endian regardless of host.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 8] = b"VAECKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: bad magic (not a checkpoint file)", path.display())]
    BadMagic { path: PathBuf },
    #[error("{}: unsupported checkpoint version {version} (this build reads {VERSION})", path.display())]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{}: unknown dtype tag {tag} in entry {entry}", path.display())]
    UnknownDType { path: PathBuf, entry: String, tag: u8 },
    #[error("{}: truncated while reading {what}: need {need} bytes at offset {offset}, file has {len}", path.display())]
    Truncated {
        path: PathBuf,
        what: String,
        offset: usize,
        need: usize,
        len: usize,
    },
    #[error("{}: {extra} trailing bytes after the last entry", path.display())]
    TrailingBytes { path: PathBuf, extra: usize },
    #[error("{}: {msg}", path.display())]
    Malformed { path: PathBuf, msg: String },
    #[error("checkpoint content: {0}")]
    Content(String),
}

/// One named tensor, stored as raw little-endian bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl Entry {
    pub fn from_tensor<T: Element>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut payload = Vec::with_capacity(t.len() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        Entry {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            payload,
        }
    }

    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>, CheckpointError> {
        if self.dtype != T::DTYPE {
            return Err(CheckpointError::Content(format!(
                "{} is {}, expected {}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let data: Vec<T> = self.payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        Tensor::new(&self.shape, data).map_err(|e| CheckpointError::Content(format!("{}: {e}", self.name)))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub entries: Vec<Entry>,
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            other => return Err(format!("bad escape \\{}", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated {
                path: self.path.to_path_buf(),
                what: what.to_string(),
                offset: self.pos,
                need: n,
                len: self.bytes.len(),
            });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize, CheckpointError> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| self.malformed(format!("{what} {v} does not fit in memory")))
    }

    fn malformed(&self, msg: String) -> CheckpointError {
        CheckpointError::Malformed {
            path: self.path.to_path_buf(),
            msg,
        }
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str, CheckpointError> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::Content(format!("missing metadata key {key}")))
    }

    pub fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V, CheckpointError> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| CheckpointError::Content(format!("metadata {key} = {raw:?} is not valid")))
    }

    pub fn push<T: Element>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push(Entry::from_tensor(name, t));
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor<T: Element>(&self, name: &str) -> Result<Tensor<T>, CheckpointError> {
        self.entry(name)
            .ok_or_else(|| CheckpointError::Content(format!("missing tensor {name}")))?
            .to_tensor()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            meta.push_str(&escape(k));
            meta.push('=');
            meta.push_str(&escape(v));
            meta.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.tag());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.payload);
        }
        out
    }

    /// Parses a checkpoint; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0, path };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic { path: path.to_path_buf() });
        }
        r.pos = MAGIC.len();
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        let meta_len = r.len("metadata length")?;
        let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|e| r.malformed(format!("metadata is not UTF-8: {e}")))?;
        let mut metadata = BTreeMap::new();
        for line in meta.split_terminator('\n') {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| r.malformed(format!("metadata line without '=': {line:?}")))?;
            let k = unescape(k).map_err(|m| r.malformed(m))?;
            let v = unescape(v).map_err(|m| r.malformed(m))?;
            if metadata.insert(k.clone(), v).is_some() {
                return Err(r.malformed(format!("duplicate metadata key {k}")));
            }
        }
        let n = r.u32("entry count")?;
        let mut entries = Vec::with_capacity(n.min(4096) as usize);
        for i in 0..n {
            let name_len = r.u32(&format!("entry {i} name length"))? as usize;
            let name = std::str::from_utf8(r.take(name_len, &format!("entry {i} name"))?)
                .map_err(|e| r.malformed(format!("entry {i} name is not UTF-8: {e}")))?
                .to_string();
            let tag = r.take(1, &format!("{name} dtype"))?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| CheckpointError::UnknownDType {
                path: path.to_path_buf(),
                entry: name.clone(),
                tag,
            })?;
            let ndim = r.u32(&format!("{name} rank"))? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.len(&format!("{name} dims"))?);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|c| c.checked_mul(dtype.size()))
                .ok_or_else(|| r.malformed(format!("{name}: shape {shape:?} overflows")))?;
            let payload = r.take(count, &format!("{name} payload"))?.to_vec();
            entries.push(Entry {
                name,
                dtype,
                shape,
                payload,
            });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes {
                path: path.to_path_buf(),
                extra: bytes.len() - r.pos,
            });
        }
        Ok(Checkpoint { metadata, entries })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }

    /// Writes to a sibling temporary file and renames it into place, so a
    /// crash never leaves a half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set("b", "two\nlines \\ backslash");
        c.set("a", 1.5);
        c.push("w", &Tensor::<f32>::from_f64(&[2, 2], &[1.0, -2.0, 0.5, 3.25]).unwrap());
        c.push("s", &Tensor::<f64>::scalar(std::f64::consts::PI));
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.get("b").unwrap(), "two\nlines \\ backslash");
        assert_eq!(back.tensor::<f64>("s").unwrap().item(), std::f64::consts::PI);
        assert!(back.tensor::<f64>("w").is_err());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        let p = Path::new("ck.bin");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let e = Checkpoint::from_bytes(&bad, p).unwrap_err();
        assert!(e.to_string().contains("bad magic") && e.to_string().contains("ck.bin"));

        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bad, p),
            Err(CheckpointError::UnsupportedVersion { version: 2, .. })
        ));

        for cut in [9, 20, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut], p),
                Err(CheckpointError::Truncated { .. })
            ));
        }

        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&bad, p),
            Err(CheckpointError::TrailingBytes { extra: 1, .. })
        ));
    }

    #[test]
    fn rejects_unknown_dtype() {
        let mut c = Checkpoint::new();
        c.push("w", &Tensor::<f32>::scalar(1.0));
        let mut bytes = c.to_bytes();
        // magic + version + meta_len (empty metadata) + count + name_len + "w"
        let tag_at = 8 + 4 + 8 + 4 + 4 + 1;
        bytes[tag_at] = 7;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("x")),
            Err(CheckpointError::UnknownDType { tag: 7, .. })
        ));
    }

    #[test]
    fn escaping_round_trips() {
        for s in ["", "plain", "a\\nb", "x\ny\\", "=\\\\="] {
            assert_eq!(unescape(&escape(s)).unwrap(), s);
        }
        assert!(unescape("bad\\q").is_err());
    }
}
