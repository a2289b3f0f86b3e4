//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FTEA" | u32 version | u32 entry count
//! per entry: u32 name length | name bytes | u8 dtype (0 = f64) | u32 rank | u64 dims.. | f64 data..
//! u64 text length | UTF-8 text
//! ```
//!
//! The text block holds the resolved configuration followed by one
//! `class = machine_type,attribute` line per label, in id order. Entries
//! cover every parameter and buffer of the store.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::{ExperimentConfig, Preset};
use crate::error::{Error, Result};
use crate::model::{Detector, LabelMap};

pub const MAGIC: &[u8; 4] = b"FTEA";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Writes through a temporary sibling file and renames it into place.
pub fn save(det: &Detector, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(det.store.len() as u32).to_le_bytes());
    for (_, p) in det.store.iter() {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(DTYPE_F64);
        buf.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut text = det.config.to_text();
    for (m, a) in det.labels.classes() {
        text.push_str(&format!("class = {m},{a}\n"));
    }
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());

    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("checkpoint length overflows".into()))
    }
}

/// Raw checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub text: String,
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn parse(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = c.u32()? as usize;
    let mut entries = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        let dtype = c.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("entry {name}: unknown dtype {dtype}")));
        }
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.len()?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("entry {name}: shape overflows")))?;
        let raw = c.take(
            count
                .checked_mul(8)
                .ok_or_else(|| Error::Format("entry too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        entries.push((name, shape, data));
    }
    let tlen = c.len()?;
    let text = std::str::from_utf8(c.take(tlen)?)
        .map_err(|_| Error::Format("config block is not UTF-8".into()))?
        .to_string();
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(Checkpoint { entries, text })
}

/// Splits the text block into the configuration and the label map.
pub fn parse_text(text: &str) -> Result<(ExperimentConfig, LabelMap)> {
    let mut cfg_lines = String::new();
    let mut classes = Vec::new();
    for line in text.lines() {
        match line.split_once('=') {
            Some((k, v)) if k.trim() == "class" => {
                let (m, a) = v
                    .trim()
                    .split_once(',')
                    .ok_or_else(|| Error::Format(format!("bad class line `{line}`")))?;
                classes.push((m.to_string(), a.to_string()));
            }
            _ => {
                cfg_lines.push_str(line);
                cfg_lines.push('\n');
            }
        }
    }
    let cfg = ExperimentConfig::from_text(Preset::Full, &cfg_lines)?;
    let labels = LabelMap::new(classes)?;
    Ok((cfg, labels))
}

/// Rebuilds a detector from its checkpoint.
pub fn load(path: &Path) -> Result<Detector> {
    let ck = read(path)?;
    let (cfg, labels) = parse_text(&ck.text)?;
    let mut det = Detector::new(cfg, labels)?;
    if ck.entries.len() != det.store.len() {
        return Err(Error::Format(format!(
            "{}: {} entries but the configured model has {} parameters",
            path.display(),
            ck.entries.len(),
            det.store.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for (name, shape, data) in ck.entries {
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("{}: duplicate entry `{name}`", path.display())));
        }
        det.store
            .assign(&name, data, &shape)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    Ok(det)
}
