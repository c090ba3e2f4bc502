//! Flat binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! magic bytes `SLACCKPT`, format version `u32`, then repeated entries until
//! EOF — name length `u64`, UTF-8 name, rank `u64`, extents `u64` each,
//! row-major `f64` payload. Optimizer moments ride along as entries named
//! `adam.m/<name>`, `adam.v/<name>` and the step count as `adam.t/<name>`.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autograd::ParamGroup;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SLACCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Named tensors in deterministic (sorted) order.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    entries: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "checkpoint entry {name}: shape/data mismatch"
        );
        self.entries.insert(name, (shape, data));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.entries.get(name).map(|(s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.entries
            .get(name)
            .map(|(_, d)| d.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Store a parameter group: data plus Adam moments and step count.
    pub fn insert_group(&mut self, group: &ParamGroup) {
        for p in group.iter() {
            let inner = p.borrow();
            self.insert(inner.name.clone(), inner.shape.clone(), inner.data.clone());
            self.insert(format!("adam.m/{}", inner.name), inner.shape.clone(), inner.adam_m.clone());
            self.insert(format!("adam.v/{}", inner.name), inner.shape.clone(), inner.adam_v.clone());
            self.insert(format!("adam.t/{}", inner.name), vec![1], vec![inner.adam_t as f64]);
        }
    }

    /// Restore a parameter group in place. Every parameter must be present
    /// with a matching shape; Adam state is optional (zeros if absent).
    pub fn restore_group(&self, group: &ParamGroup) -> Result<()> {
        for p in group.iter() {
            let name = p.name();
            let (shape, data) = self
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))?;
            if shape != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} has shape {:?} in checkpoint, expected {:?}",
                    shape,
                    p.shape()
                )));
            }
            p.set_data(data);
            if let (Some((_, m)), Some((_, v)), Some((_, t))) = (
                self.get(&format!("adam.m/{name}")),
                self.get(&format!("adam.v/{name}")),
                self.get(&format!("adam.t/{name}")),
            ) {
                p.set_adam_state(m, v, t[0] as u64);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for (name, (shape, data)) in &self.entries {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(shape.len() as u64).to_le_bytes())?;
            for e in shape {
                w.write_all(&(*e as u64).to_le_bytes())?;
            }
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mut out = Checkpoint::new();
        loop {
            let name_len = match read_u64_or_eof(&mut r)? {
                Some(n) => n as usize,
                None => break,
            };
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)
                .map_err(|_| Error::Checkpoint("truncated name".into()))?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let rank = read_u64(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0f64; numel];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Checkpoint(format!("truncated payload for {name:?}")))?;
                *v = f64::from_le_bytes(buf);
            }
            out.entries.insert(name, (shape, data));
        }
        Ok(out)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|_| Error::Checkpoint("truncated entry".into()))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_u64_or_eof(r: &mut impl Read) -> Result<Option<u64>> {
    let mut buf = [0u8; 8];
    let mut filled = 0;
    while filled < 8 {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(Error::Checkpoint("truncated entry header".into()));
        }
        filled += n;
    }
    Ok(Some(u64::from_le_bytes(buf)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Param;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut ck = Checkpoint::new();
        ck.insert("w", vec![2, 2], vec![1.0, -2.5, 3.25e-300, f64::MAX]);
        ck.insert("b", vec![1], vec![0.1 + 0.2]);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let (shape, data) = back.get("w").unwrap();
        assert_eq!(shape, &[2, 2]);
        assert_eq!(data, &[1.0, -2.5, 3.25e-300, f64::MAX]);
        assert_eq!(back.get("b").unwrap().1[0].to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPT____").unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.ckpt");
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut ck = Checkpoint::new();
        ck.insert("w", vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        ck.save(&path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 7]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn group_roundtrip_restores_adam_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let p = Param::new("net/w", vec![2], vec![0.5, -0.5]);
        crate::autograd::adam_update(&p, &[0.1, -0.2], 0.01);
        let mut group = ParamGroup::new();
        group.push(p.clone());

        let mut ck = Checkpoint::new();
        ck.insert_group(&group);
        ck.save(&path).unwrap();

        let q = Param::zeros("net/w", vec![2]);
        let mut fresh = ParamGroup::new();
        fresh.push(q.clone());
        Checkpoint::load(&path).unwrap().restore_group(&fresh).unwrap();

        assert_eq!(q.value(), p.value());
        assert_eq!(q.borrow().adam_m, p.borrow().adam_m);
        assert_eq!(q.borrow().adam_v, p.borrow().adam_v);
        assert_eq!(q.borrow().adam_t, 1);
    }

    #[test]
    fn restore_shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        let mut ck = Checkpoint::new();
        ck.insert("w", vec![3], vec![1.0, 2.0, 3.0]);
        ck.save(&path).unwrap();

        let mut group = ParamGroup::new();
        group.push(Param::zeros("w", vec![2]));
        let err = Checkpoint::load(&path).unwrap().restore_group(&group).unwrap_err();
        assert!(err.to_string().contains("shape"));
    }
}
