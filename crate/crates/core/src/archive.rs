//! Named-array container used for checkpoints and feature-extractor weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "DIMLARC\0"
//! version      u32       1
//! payload_len  u64       bytes that follow the header
//! payload:
//!   meta_count u32
//!   meta_count x { key: str, tag: u8, value }
//!       tag 0: u64, tag 1: f64, tag 2: bool (u8), tag 3: str
//!   array_count u32
//!   array_count x { name: str, rank: u32, dims: rank x u64, data: numel x f32 }
//! str = u32 byte length followed by UTF-8 bytes
//! ```
//!
//! Entries keep their insertion order, so saving a loaded archive reproduces
//! the original bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"DIMLARC\0";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub enum MetaValue {
    U64(u64),
    F64(f64),
    Bool(bool),
    Str(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Array {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::Format(format!("array dims {dims:?} need {numel} values, got {}", data.len())));
        }
        Ok(Array { dims, data })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    meta: Vec<(String, MetaValue)>,
    arrays: Vec<(String, Array)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: MetaValue) {
        let key = key.into();
        match self.meta.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key, value)),
        }
    }

    pub fn push_array(&mut self, name: impl Into<String>, array: Array) {
        self.arrays.push((name.into(), array));
    }

    pub fn meta(&self) -> &[(String, MetaValue)] {
        &self.meta
    }

    pub fn arrays(&self) -> &[(String, Array)] {
        &self.arrays
    }

    pub fn get_meta(&self, key: &str) -> Option<&MetaValue> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn array(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|(k, _)| k == name).map(|(_, v)| v)
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        match self.get_meta(key) {
            Some(MetaValue::U64(v)) => Ok(*v),
            other => Err(missing(key, "integer", other)),
        }
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        match self.get_meta(key) {
            Some(MetaValue::F64(v)) => Ok(*v),
            other => Err(missing(key, "float", other)),
        }
    }

    pub fn meta_bool(&self, key: &str) -> Result<bool> {
        match self.get_meta(key) {
            Some(MetaValue::Bool(v)) => Ok(*v),
            other => Err(missing(key, "bool", other)),
        }
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        match self.get_meta(key) {
            Some(MetaValue::Str(v)) => Ok(v),
            other => Err(missing(key, "string", other)),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = Vec::new();
        p.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut p, k);
            match v {
                MetaValue::U64(x) => {
                    p.push(0);
                    p.extend_from_slice(&x.to_le_bytes());
                }
                MetaValue::F64(x) => {
                    p.push(1);
                    p.extend_from_slice(&x.to_le_bytes());
                }
                MetaValue::Bool(x) => {
                    p.push(2);
                    p.push(*x as u8);
                }
                MetaValue::Str(s) => {
                    p.push(3);
                    put_str(&mut p, s);
                }
            }
        }
        p.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            put_str(&mut p, name);
            p.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
            for &d in &a.dims {
                p.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &a.data {
                p.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN as usize + p.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        out.extend_from_slice(&p);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let actual = bytes.len() as u64;
        if actual < HEADER_LEN {
            return Err(Error::Truncated { expected: HEADER_LEN, actual });
        }
        if bytes[..8] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..8])));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
        }
        let payload_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let expected = HEADER_LEN.checked_add(payload_len).ok_or_else(|| Error::Format("payload length overflows".into()))?;
        if actual < expected {
            return Err(Error::Truncated { expected, actual });
        }
        if actual > expected {
            return Err(Error::Format(format!("{} trailing bytes after payload", actual - expected)));
        }
        let mut r = Reader { buf: &bytes[HEADER_LEN as usize..], pos: 0 };
        let mut ar = Archive::new();
        for _ in 0..r.u32()? {
            let key = r.str()?;
            let v = match r.u8()? {
                0 => MetaValue::U64(r.u64()?),
                1 => MetaValue::F64(f64::from_le_bytes(r.take(8)?.try_into().unwrap())),
                2 => match r.u8()? {
                    0 => MetaValue::Bool(false),
                    1 => MetaValue::Bool(true),
                    b => return Err(Error::Format(format!("meta `{key}`: invalid bool byte {b}"))),
                },
                3 => MetaValue::Str(r.str()?),
                t => return Err(Error::Format(format!("meta `{key}`: unknown tag {t}"))),
            };
            ar.meta.push((key, v));
        }
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(usize::try_from(r.u64()?).map_err(|_| Error::Format(format!("array `{name}`: dim too large")))?);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("array `{name}`: element count overflows")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format(format!("array `{name}` too large")))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            ar.arrays.push((name, Array { dims, data }));
        }
        if r.pos != r.buf.len() {
            return Err(Error::Format(format!("{} unread payload bytes", r.buf.len() - r.pos)));
        }
        Ok(ar)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn missing(key: &str, want: &str, got: Option<&MetaValue>) -> Error {
    match got {
        None => Error::Format(format!("missing meta entry `{key}`")),
        Some(v) => Error::Format(format!("meta entry `{key}` should be {want}, found {v:?}")),
    }
}

fn put_str(p: &mut Vec<u8>, s: &str) {
    p.extend_from_slice(&(s.len() as u32).to_le_bytes());
    p.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "payload ends early: need {n} bytes at offset {}, {} left",
                HEADER_LEN as usize + self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in name".into()))
    }
}
