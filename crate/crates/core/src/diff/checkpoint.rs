//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "RCNECKPT"
//! version    u32      CHECKPOINT_VERSION
//! config     u32 length + UTF-8 text (the config file contents)
//! groups     u32 count, then per group:
//!              u32 name length + UTF-8 name
//!              u64 rows, u64 cols
//!              rows*cols f64 values (IEEE-754 bits)
//! ```
//!
//! Values are stored as raw bits, so a write/read round trip is exact.

use std::io::{Read, Write};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"RCNECKPT";

/// A parameter store plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub store: ParamStore,
}

pub fn write_checkpoint<W: Write>(mut w: W, config: &str, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_str(&mut w, config)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for id in store.ids() {
        write_str(&mut w, store.name(id))?;
        let t = store.value(id);
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
        for x in t.data() {
            w.write_all(&x.to_bits().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let config = read_str(&mut r)?;
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = read_str(&mut r)?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| Error::Data(format!("group '{name}' has an impossible shape")))?;
        let mut data = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            data.push(f64::from_bits(read_u64(&mut r)?));
        }
        store.register(&name, Tensor::new(rows, cols, data)?)?;
    }
    Ok(Checkpoint { config, store })
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Data(format!("invalid UTF-8 in checkpoint: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.register("a", Tensor::new(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap()).unwrap();
        s.register("b", Tensor::row(vec![std::f64::consts::PI])).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "version = 1\nd = 2\n", &s).unwrap();
        let ck = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(ck.config, "version = 1\nd = 2\n");
        for (x, y) in s.ids().zip(ck.store.ids()) {
            assert_eq!(s.name(x), ck.store.name(y));
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(s.value(x)), bits(ck.store.value(y)));
        }
        let mut again = Vec::new();
        write_checkpoint(&mut again, &ck.config, &ck.store).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        assert!(read_checkpoint(&b"NOTACKPT\x01\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "", &ParamStore::new()).unwrap();
        buf[8] = 9;
        assert!(matches!(read_checkpoint(&buf[..]), Err(Error::Data(_))));
        // truncated
        assert!(read_checkpoint(&buf[..10]).is_err());
    }
}
