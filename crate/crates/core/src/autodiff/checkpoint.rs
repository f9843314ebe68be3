//! Binary parameter files: magic, version, config JSON, then
//! `(name, trainable, shape, values)` records, all little-endian.

use std::io::{Read, Write};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HRDCKPT\0";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, config_json: &str, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(config_json.len() as u64).to_le_bytes())?;
    w.write_all(config_json.as_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (_, p) in store.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[p.trainable as u8])?;
        w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for d in p.value.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_arr<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_arr(r)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_arr(r)?))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    if len > 1 << 30 {
        return Err(Error::Checkpoint(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Returns the embedded config JSON and the parameters.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(String, ParamStore)> {
    if &read_arr::<8, _>(&mut r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let clen = read_u64(&mut r)? as usize;
    let config = read_string(&mut r, clen)?;
    let count = read_u64(&mut r)?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let nlen = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, nlen)?;
        let trainable = read_arr::<1, _>(&mut r)?[0] != 0;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_arr(&mut r)?));
        }
        entries.push((name, Tensor::new(shape, data)?, trainable));
    }
    Ok((config, ParamStore::from_entries(entries)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.register("a.w", &[3, 4], Init::XavierUniform { fan_in: 4, fan_out: 3 }, &mut rng);
        s.register_buffer("pe", Tensor::new(vec![2], vec![f64::MIN_POSITIVE, -0.0]).unwrap());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "{\"x\":1}", &s).unwrap();
        let (cfg, back) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(cfg, "{\"x\":1}");
        assert_eq!(back.len(), 2);
        for ((_, a), (_, b)) in s.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_checkpoint(&b"NOTACKPT"[..]).is_err());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "{}", &ParamStore::new()).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
