//! Binary parameter snapshots.
//!
//! Layout: the magic bytes, a little-endian `u32` version and record
//! count, then per record the name length (`u32`), UTF-8 name, a trainable
//! flag byte, rows and cols (`u64`), and `rows * cols` little-endian `f64`
//! values.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::autodiff::ParameterStore;
use crate::error::{Error, Result};
use crate::io::create;
use crate::linalg::DenseMatrix;

const MAGIC: &[u8; 8] = b"TIMMECKP";
const VERSION: u32 = 1;

pub fn write_checkpoint(path: &Path, params: &ParameterStore) -> Result<()> {
    let mut w = create(path)?;
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    put(&(params.len() as u32).to_le_bytes())?;
    for (name, slot) in params.iter() {
        put(&(name.len() as u32).to_le_bytes())?;
        put(name.as_bytes())?;
        put(&[u8::from(slot.trainable())])?;
        let v = slot.value();
        put(&(v.rows() as u64).to_le_bytes())?;
        put(&(v.cols() as u64).to_le_bytes())?;
        for x in v.data() {
            put(&x.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("file is truncated".into()))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<ParameterStore> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
    };
    if r.bytes(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let mut params = ParameterStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let trainable = r.bytes(1)?[0] != 0;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let raw = r.bytes(rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| {
            Error::Checkpoint(format!("parameter {name:?} has an impossible shape"))
        })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, DenseMatrix::from_vec(rows, cols, data)?, trainable)?;
    }
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.bin");
        let mut params = ParameterStore::new();
        params
            .insert("a", DenseMatrix::from_vec(2, 2, vec![0.1, -1e-300, f64::MAX, 3.0]).unwrap(), true)
            .unwrap();
        params.insert("b", DenseMatrix::scalar(7.5), false).unwrap();
        write_checkpoint(&p, &params).unwrap();
        let back = read_checkpoint(&p).unwrap();
        assert_eq!(back.value("a").unwrap(), params.value("a").unwrap());
        assert_eq!(back.value("b").unwrap(), params.value("b").unwrap());
        assert!(!back.is_trainable("b"));
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        std::fs::write(&p, b"not a checkpoint").unwrap();
        assert!(read_checkpoint(&p).is_err());
        let mut params = ParameterStore::new();
        params.insert("a", DenseMatrix::filled(3, 3, 1.0), true).unwrap();
        write_checkpoint(&p, &params).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_checkpoint(&p), Err(Error::Checkpoint(_))));
    }
}
