//! Single-file container: the magic `S3ED`, a format version, then named
//! sections. All integers and floats are little-endian, so a save, load and
//! save again reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use s3e_autograd::{Adam, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"S3ED";
pub const VERSION: u32 = 1;

/// Ordered named byte sections.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    sections: Vec<(String, Vec<u8>)>,
}

/// One stored tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a section, keeping first-insertion order.
    pub fn put(&mut self, name: &str, bytes: Vec<u8>) {
        match self.sections.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = bytes,
            None => self.sections.push((name.to_string(), bytes)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[u8]> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section {name:?}")))
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn put_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.put(name, serde_json::to_vec(value)?);
        Ok(())
    }

    pub fn get_json<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T> {
        serde_json::from_slice(self.require(name)?).map_err(|e| Error::Checkpoint(format!("section {name:?}: {e}")))
    }

    pub fn put_tensors(&mut self, name: &str, tensors: &[NamedTensor]) {
        let mut w = Writer::default();
        w.u32(tensors.len() as u32);
        for t in tensors {
            w.str(&t.name);
            w.u8(t.frozen as u8);
            w.tensor(&t.value);
        }
        self.put(name, w.0);
    }

    pub fn get_tensors(&self, name: &str) -> Result<Vec<NamedTensor>> {
        let mut r = Reader::new(self.require(name)?, name);
        let n = r.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.str()?;
            let frozen = r.u8()? != 0;
            let value = r.tensor()?;
            out.push(NamedTensor { name, value, frozen });
        }
        r.finish()?;
        Ok(out)
    }

    pub fn put_adam(&mut self, name: &str, opt: &Adam) {
        let (step, moments) = opt.state();
        let mut w = Writer::default();
        w.u64(step);
        w.u32(moments.len() as u32);
        for (n, m, v) in moments {
            w.str(n);
            w.tensor(m);
            w.tensor(v);
        }
        self.put(name, w.0);
    }

    /// Restores step and moments into `opt`; hyperparameters are left as is.
    pub fn get_adam(&self, name: &str, opt: &mut Adam) -> Result<()> {
        let mut r = Reader::new(self.require(name)?, name);
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut moments = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.str()?;
            let m = r.tensor()?;
            let v = r.tensor()?;
            moments.push((name, m, v));
        }
        r.finish()?;
        opt.restore(step, moments);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(self.sections.len() as u32);
        for (name, bytes) in &self.sections {
            w.str(name);
            w.u64(bytes.len() as u64);
            w.0.extend_from_slice(bytes);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let mut r = Reader::new(&bytes[4..], "header");
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let n = r.u32()? as usize;
        let mut sections = Vec::with_capacity(n.min(1 << 10));
        for _ in 0..n {
            let name = r.str()?;
            let len = r.u64()? as usize;
            sections.push((name, r.take(len)?.to_vec()));
        }
        r.finish()?;
        Ok(Self { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.iter() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    section: &'a str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], section: &'a str) -> Self {
        Self { bytes, pos: 0, section }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("section {:?} is truncated", self.section)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
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
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("section {:?} holds a non-UTF-8 name", self.section)))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = count
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("section {:?} holds an oversized tensor", self.section)))?;
        let data = self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::from_shape_vec(shape, data).unwrap())
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "section {:?} has trailing bytes",
                self.section
            )))
        }
    }
}
