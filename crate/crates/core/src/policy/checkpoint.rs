//! Binary weight format.
//!
//! ```text
//! magic          8 bytes  "PPPOPOL\0"
//! version        u32 LE
//! vocab_size     u32 LE
//! context_order  u32 LE
//! feature_map_id u32 LE
//! hash_bits      u32 LE
//! conj_order     u32 LE
//! feature_dim    u64 LE
//! weights        f64 LE × feature_dim × vocab_size, row-major
//! ```

use std::io::{Read, Write};

use super::{FeatureMap, PolicyParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PPPOPOL\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_params<W: Write>(mut w: W, params: &PolicyParams) -> Result<()> {
    let m = params.map();
    w.write_all(MAGIC)?;
    for x in [
        CHECKPOINT_VERSION,
        m.vocab_size as u32,
        m.context_order as u32,
        FeatureMap::ID,
        m.hash_bits,
        m.conjunction_order as u32,
    ] {
        w.write_all(&x.to_le_bytes())?;
    }
    w.write_all(&(m.feature_dim() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(params.weights().len() * 8);
    for x in params.weights() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_params<R: Read>(mut r: R) -> Result<PolicyParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a policy checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("version {version} is not supported (expected {CHECKPOINT_VERSION})")));
    }
    let vocab_size = read_u32(&mut r)? as usize;
    let context_order = read_u32(&mut r)? as usize;
    let map_id = read_u32(&mut r)?;
    if map_id != FeatureMap::ID {
        return Err(Error::Checkpoint(format!("unknown feature map id {map_id}")));
    }
    let hash_bits = read_u32(&mut r)?;
    let conjunction_order = read_u32(&mut r)? as usize;
    let map = FeatureMap::new(vocab_size, context_order, hash_bits)
        .and_then(|m| m.with_conjunctions(conjunction_order))
        .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let feature_dim = u64::from_le_bytes(b) as usize;
    if feature_dim != map.feature_dim() {
        return Err(Error::Checkpoint(format!(
            "shape mismatch: header feature_dim {feature_dim}, map implies {}",
            map.feature_dim()
        )));
    }
    let n = feature_dim * vocab_size;
    let mut raw = vec![0u8; n * 8];
    r.read_exact(&mut raw).map_err(|_| Error::Checkpoint(format!("shape mismatch: expected {n} weights")))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after weights".into()));
    }
    let weights = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    PolicyParams::from_weights(map, weights).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn sample() -> PolicyParams {
        let map = FeatureMap::new(6, 2, 4).unwrap();
        PolicyParams::random(map, 1.0, &mut SeedStream::new(9).rng())
    }

    #[test]
    fn header_layout_and_round_trip() {
        let p = sample();
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 6);
        assert_eq!(buf.len(), 8 + 24 + 8 + p.weights().len() * 8);
        assert_eq!(read_params(&buf[..]).unwrap(), p);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let p = sample();
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_params(&bad[..]).unwrap_err().to_string().contains("magic"));

        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(read_params(&bad[..]).unwrap_err().to_string().contains("version"));

        let mut bad = buf.clone();
        bad[32] ^= 1; // feature_dim
        assert!(read_params(&bad[..]).unwrap_err().to_string().contains("shape"));

        assert!(read_params(&buf[..buf.len() - 8]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_params(&long[..]).is_err());
    }
}
