//! Self-describing binary checkpoints: a versioned header with the
//! configuration as key/value text, followed by named tensor records
//! (little-endian f64 payloads) in deterministic declaration order.
//! Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 8] = b"IFORMER\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CkptRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// Ordered key/value configuration lines.
    pub config: Vec<(String, String)>,
    pub records: Vec<CkptRecord>,
}

impl Checkpoint {
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn record(&self, name: &str) -> Option<&CkptRecord> {
        self.records.iter().find(|r| r.name == name)
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CkptError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let mut config_text = String::new();
    for (k, v) in &ckpt.config {
        config_text.push_str(k);
        config_text.push_str(" = ");
        config_text.push_str(v);
        config_text.push('\n');
    }
    let bytes = config_text.as_bytes();
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    w.write_all(&(ckpt.records.len() as u32).to_le_bytes())?;
    for r in &ckpt.records {
        let name = r.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(CkptError::Format(format!("record name too long: {}", r.name)));
        }
        let numel: usize = r.shape.iter().product();
        if numel != r.data.len() {
            return Err(CkptError::Format(format!(
                "record {} shape {:?} vs {} values",
                r.name,
                r.shape,
                r.data.len()
            )));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[r.shape.len() as u8])?;
        for &dim in &r.shape {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in &r.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N], CkptError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn load(path: &Path) -> Result<Checkpoint, CkptError> {
    let mut r = BufReader::new(File::open(path)?);
    let magic: [u8; 8] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(CkptError::Format("bad magic (not a checkpoint)".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != VERSION {
        return Err(CkptError::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config_len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)?;
    let config_text = String::from_utf8(config_bytes)
        .map_err(|_| CkptError::Format("config is not utf-8".into()))?;
    let mut config = Vec::new();
    for line in config_text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| CkptError::Format(format!("bad config line '{line}'")))?;
        config.push((k.to_string(), v.to_string()));
    }
    let n_records = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let name_len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CkptError::Format("record name is not utf-8".into()))?;
        let rank = read_exact::<1>(&mut r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_exact(&mut r)?) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(read_exact(&mut r)?));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(CkptError::Format(format!(
                "record {name} holds non-finite value {bad}"
            )));
        }
        records.push(CkptRecord { name, shape, data });
    }
    Ok(Checkpoint { config, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = Checkpoint {
            config: vec![
                ("block.d".into(), "8".into()),
                ("block.fusion".into(), "sfm".into()),
            ],
            records: vec![
                CkptRecord {
                    name: "w".into(),
                    shape: vec![2, 3],
                    data: vec![1.5, -2.25, 1e-300, 0.1 + 0.2, f64::MIN_POSITIVE, -0.0],
                },
                CkptRecord {
                    name: "b".into(),
                    shape: vec![1],
                    data: vec![42.0],
                },
            ],
        };
        save(&path, &ckpt).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.records.len(), 2);
        for (a, b) in loaded.records.iter().zip(&ckpt.records) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert!(a
                .data
                .iter()
                .zip(&b.data)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load(&path), Err(CkptError::Format(_))));
        assert!(load(Path::new("/nonexistent/x.ckpt")).is_err());
    }
}
