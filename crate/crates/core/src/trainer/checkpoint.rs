//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"BJAMCKPT"
//! version u32
//! config  u64 length + UTF-8 JSON
//! meta    u64 length + UTF-8 JSON
//! count   u64
//! record* u32 name length, name, u32 rank, u64 dims[rank], f64 values
//! ```

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kernel::{Tensor, WeightSet};

const MAGIC: &[u8; 8] = b"BJAMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub records: WeightSet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for json in [&self.config, &self.meta] {
            let s = serde_json::to_vec(json)?;
            out.extend_from_slice(&(s.len() as u64).to_le_bytes());
            out.extend_from_slice(&s);
        }
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for (name, t) in self.records.names.iter().zip(&self.records.tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let config = r.json()?;
        let meta = r.json()?;
        let count = r.u64()? as usize;
        let mut records = WeightSet::default();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            records.names.push(name);
            records.tensors.push(Tensor::new(shape, data)?);
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after the last record".into()));
        }
        Ok(Checkpoint { config, meta, records })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Records whose names do not start with `prefix`.
    pub fn records_without(&self, prefix: &str) -> WeightSet {
        filter_records(&self.records, |n| !n.starts_with(prefix))
    }

    pub fn records_with(&self, prefix: &str) -> WeightSet {
        filter_records(&self.records, |n| n.starts_with(prefix))
    }
}

fn filter_records(ws: &WeightSet, keep: impl Fn(&str) -> bool) -> WeightSet {
    let mut out = WeightSet::default();
    for (n, t) in ws.names.iter().zip(&ws.tensors) {
        if keep(n) {
            out.names.push(n.clone());
            out.tensors.push(t.clone());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn json(&mut self) -> Result<serde_json::Value> {
        let len = self.u64()? as usize;
        Ok(serde_json::from_slice(self.take(len)?)?)
    }
}

/// Entrywise arithmetic mean of weight sets with identical names and shapes.
pub fn average_checkpoints(sets: &[WeightSet]) -> Result<WeightSet> {
    let Some(first) = sets.first() else {
        return Err(Error::invalid("nothing to average"));
    };
    for s in &sets[1..] {
        if let Some(name) = first.first_mismatch(s) {
            return Err(Error::Checkpoint(format!("parameter mismatch at `{name}`")));
        }
    }
    // running mean: identical inputs come back bit-identical, which a
    // sum-then-divide does not guarantee
    let mut out = first.clone();
    for (i, t) in out.tensors.iter_mut().enumerate() {
        let data = t.data_mut();
        for (n, s) in sets[1..].iter().enumerate() {
            let k = (n + 2) as f64;
            for (m, x) in data.iter_mut().zip(s.tensors[i].data()) {
                *m += (x - *m) / k;
            }
        }
    }
    Ok(out)
}

/// The last `window` epoch weight sets, mirrored to `dir` when given.
#[derive(Clone, Debug)]
pub struct CheckpointRing {
    window: usize,
    dir: Option<PathBuf>,
    entries: VecDeque<(u64, WeightSet)>,
}

impl CheckpointRing {
    pub fn new(window: usize, dir: Option<PathBuf>) -> Result<Self> {
        if window == 0 {
            return Err(Error::invalid("averaging window must be at least 1"));
        }
        Ok(CheckpointRing {
            window,
            dir,
            entries: VecDeque::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn epochs(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn file_for(dir: &Path, epoch: u64) -> PathBuf {
        dir.join(format!("epoch-{epoch:04}.ckpt"))
    }

    /// Adds one epoch; `checkpoint` is written to disk if the ring has a
    /// directory. The oldest entry (and its file) is dropped beyond the window.
    pub fn push(&mut self, epoch: u64, weights: WeightSet, checkpoint: Option<&Checkpoint>) -> Result<()> {
        if let (Some(dir), Some(ck)) = (&self.dir, checkpoint) {
            ck.save(&Self::file_for(dir, epoch))?;
        }
        self.entries.push_back((epoch, weights));
        while self.entries.len() > self.window {
            let (old, _) = self.entries.pop_front().expect("nonempty");
            if let Some(dir) = &self.dir {
                let path = Self::file_for(dir, old);
                if path.exists() {
                    fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                }
            }
        }
        Ok(())
    }

    /// Re-inserts an entry without touching the disk (used on resume).
    pub fn restore(&mut self, epoch: u64, weights: WeightSet) {
        self.entries.push_back((epoch, weights));
        while self.entries.len() > self.window {
            self.entries.pop_front();
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut WeightSet)) {
        self.entries.iter_mut().for_each(|(_, w)| f(w));
    }

    pub fn average(&self) -> Result<WeightSet> {
        let sets: Vec<WeightSet> = self.entries.iter().map(|e| e.1.clone()).collect();
        average_checkpoints(&sets)
    }
}
