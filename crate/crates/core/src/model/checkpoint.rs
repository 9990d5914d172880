//! Checkpoint: `ARSRCKPT`, u32 JSON length, JSON `ModelConfig`, u32 tensor
//! count, then per tensor: u32 name length, name, u32 rows, u32 cols and
//! little-endian f32 values.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ModelParams;
use super::ModelConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ARSRCKPT";

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn save_checkpoint(path: &Path, p: &ModelParams) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    let cfg = serde_json::to_vec(p.config())?;
    write_u32(&mut w, cfg.len())?;
    w.write_all(&cfg)?;
    write_u32(&mut w, p.tensors().len())?;
    for t in p.tensors() {
        write_u32(&mut w, t.name.len())?;
        w.write_all(t.name.as_bytes())?;
        write_u32(&mut w, t.rows)?;
        write_u32(&mut w, t.cols)?;
        for &x in &p.data()[t.range()] {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{} is not a model checkpoint", path.display())));
    }
    let n = read_u32(&mut r)?;
    let mut cfg = vec![0u8; n];
    r.read_exact(&mut cfg)?;
    let cfg: ModelConfig = serde_json::from_slice(&cfg)?;
    let mut p = ModelParams::zeros(&cfg)?;
    let count = read_u32(&mut r)?;
    if count != p.tensors().len() {
        return Err(Error::ArtifactMismatch(format!(
            "checkpoint holds {count} tensors, config implies {}",
            p.tensors().len()
        )));
    }
    let mut values = Vec::with_capacity(p.len());
    for t in p.tensors() {
        let len = read_u32(&mut r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let (rows, cols) = (read_u32(&mut r)?, read_u32(&mut r)?);
        if name != t.name.as_bytes() || rows != t.rows || cols != t.cols {
            return Err(Error::ArtifactMismatch(format!(
                "tensor {} ({rows}x{cols}) where {} ({}x{}) was expected",
                String::from_utf8_lossy(&name),
                t.name,
                t.rows,
                t.cols
            )));
        }
        let mut buf = vec![0u8; 4 * t.len()];
        r.read_exact(&mut buf)?;
        values.extend(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64));
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    p.set_data(values)?;
    if !p.all_finite() {
        return Err(Error::Format("checkpoint contains non-finite values".into()));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_rounds_to_f32() {
        let cfg = ModelConfig { layers: 1, dim: 8, heads: 2, vocab_size: 12, ..Default::default() };
        let p = ModelParams::init(&cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &p).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(q.config(), p.config());
        for (a, b) in p.data().iter().zip(q.data()) {
            assert_eq!(*a as f32 as f64, *b);
        }
        // saving a loaded checkpoint is byte-stable
        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&path2, &q).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"NOTACKPTxxxx").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
