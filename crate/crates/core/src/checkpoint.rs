//! Binary checkpoints: config snapshot, every parameter entry with its
//! optimizer moments, and the step counter, serialized little-endian and
//! restored bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::{ParamEntry, ParamStore};

const MAGIC: &[u8; 8] = b"MVDETCK\0";
const VERSION: u32 = 1;

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    write_u64(w, b.len() as u64)?;
    w.write_all(b)
}

fn write_f64s(w: &mut impl Write, v: &[f64]) -> std::io::Result<()> {
    write_u64(w, v.len() as u64)?;
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read) -> std::io::Result<Vec<u8>> {
    let n = read_u64(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_f64s(r: &mut impl Read) -> std::io::Result<Vec<f64>> {
    let n = read_u64(r)? as usize;
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    let mut inner = || -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        write_u32(&mut w, VERSION)?;
        let cfg_json = serde_json::to_vec(cfg).expect("config serializes");
        write_bytes(&mut w, &cfg_json)?;
        write_u64(&mut w, store.step)?;
        write_u64(&mut w, store.entries.len() as u64)?;
        for e in &store.entries {
            write_bytes(&mut w, e.name.as_bytes())?;
            write_u64(&mut w, e.shape.len() as u64)?;
            for &d in &e.shape {
                write_u64(&mut w, d as u64)?;
            }
            w.write_all(&[e.trainable as u8])?;
            write_f64s(&mut w, &e.data)?;
            write_f64s(&mut w, &e.m)?;
            write_f64s(&mut w, &e.v)?;
        }
        w.flush()
    };
    inner().map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = std::io::BufReader::new(f);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r).map_err(|e| io_err(path, e))?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "{}: checkpoint version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let cfg_json = read_bytes(&mut r).map_err(|e| io_err(path, e))?;
    let cfg: ModelConfig = serde_json::from_slice(&cfg_json)
        .map_err(|e| Error::Data(format!("{}: config block: {e}", path.display())))?;
    let step = read_u64(&mut r).map_err(|e| io_err(path, e))?;
    let count = read_u64(&mut r).map_err(|e| io_err(path, e))? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let mut inner = || -> std::io::Result<ParamEntry> {
            let name = String::from_utf8_lossy(&read_bytes(&mut r)?).into_owned();
            let rank = read_u64(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            Ok(ParamEntry {
                name,
                shape,
                data: read_f64s(&mut r)?,
                m: read_f64s(&mut r)?,
                v: read_f64s(&mut r)?,
                trainable: flag[0] != 0,
            })
        };
        let e = inner().map_err(|e| io_err(path, e))?;
        let expect: usize = e.shape.iter().product();
        if e.data.len() != expect || e.m.len() != expect || e.v.len() != expect {
            return Err(Error::Data(format!(
                "{}: entry {} payload does not match its shape",
                path.display(),
                e.name
            )));
        }
        store.entries.push(e);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| io_err(path, e))? != 0 {
        return Err(Error::Data(format!(
            "{}: trailing bytes after checkpoint payload",
            path.display()
        )));
    }
    store.step = step;
    store.reindex();
    Ok((cfg, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    fn small_model() -> Model {
        let cfg = ModelConfig {
            n_queries: 6,
            embed_dim: 16,
            heads: 2,
            cameras: 2,
            l_hybrid: 1,
            ..ModelConfig::default()
        };
        Model::new(cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = small_model();
        // scribble awkward values into moments and step
        model.store.step = 1234;
        for e in &mut model.store.entries {
            for (i, x) in e.m.iter_mut().enumerate() {
                *x = (i as f64 + 0.1).sin() * 1e-7;
            }
            e.v[0] = f64::MIN_POSITIVE;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, &model.config, &model.store).unwrap();
        let (cfg, store) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, model.config);
        assert_eq!(store, model.store);
        assert_eq!(store.lookup("q3d0").unwrap(), model.store.lookup("q3d0").unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        let msg = load_checkpoint(&path).unwrap_err().to_string();
        assert!(msg.contains("magic"), "{msg}");
    }

    #[test]
    fn truncated_file_rejected() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, &model.config, &model.store).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn trailing_garbage_rejected() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, &model.config, &model.store).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
