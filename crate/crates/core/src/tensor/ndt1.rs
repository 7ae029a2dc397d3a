//! The NDT1 tensor file format.
//!
//! Layout: the magic bytes `NDT1`, one dtype byte (`0` = f32, `1` = f64), one
//! rank byte `r`, `r` little-endian `u64` dimensions, then the row-major
//! little-endian element data.

use std::fs;
use std::path::Path;

use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NDT1";

pub fn encode<F: Real>(t: &Tensor<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + F::BYTES * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(F::DTYPE_CODE);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes into element type `G`, converting from the stored dtype.
pub fn decode<G: Real>(bytes: &[u8], origin: &Path) -> Result<Tensor<G>> {
    let bad = |reason: &str| Error::format(origin, reason);
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("missing NDT1 magic"));
    }
    let dtype = bytes[4];
    let rank = bytes[5] as usize;
    let header = 6 + 8 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[6 + 8 * i..14 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let n = numel(&shape);
    let body = &bytes[header..];
    let data: Vec<G> = match dtype {
        0 => {
            if body.len() != 4 * n {
                return Err(bad("payload length does not match shape"));
            }
            body.chunks_exact(4)
                .map(|c| G::c(f32::read_le(c) as f64))
                .collect()
        }
        1 => {
            if body.len() != 8 * n {
                return Err(bad("payload length does not match shape"));
            }
            body.chunks_exact(8).map(|c| G::c(f64::read_le(c))).collect()
        }
        other => return Err(bad(&format!("unknown dtype code {other}"))),
    };
    Tensor::new(&shape, data)
}

/// Writes via a temporary file and rename so readers never see a partial file.
pub fn save<F: Real>(path: &Path, t: &Tensor<F>) -> Result<()> {
    write_atomic(path, &encode(t))
}

pub fn load<G: Real>(path: &Path) -> Result<Tensor<G>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_f64(&[2, 1], &[1.0, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"NDT1");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 2);
        assert_eq!(u64::from_le_bytes(b[6..14].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[14..22].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(b[22..26].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 22 + 8);
    }

    #[test]
    fn rejects_garbage() {
        let p = Path::new("mem");
        assert!(decode::<f32>(b"NDT2\0\0", p).is_err());
        let mut b = encode(&Tensor::<f64>::zeros(&[3]));
        b.pop();
        assert!(decode::<f64>(&b, p).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_f64(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let mut rng = crate::tensor::RngStream::new(seed, 0);
            let t = Tensor::<f64>::from_fn(&shape, |_| rng.normal());
            let back: Tensor<f64> = decode(&encode(&t), Path::new("mem")).unwrap();
            prop_assert_eq!(back.numel(), n);
            prop_assert_eq!(back, t);
        }
    }
}
