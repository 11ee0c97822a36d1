//! Raw tensor files: `n, c, h, w` as u32 LE, then `n*c*h*w` f32 LE values.

use std::path::Path;

use pconv_core::tensor::Tensor4D;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{read_file, write_file, Error, Result};

pub fn encode_tensor(t: &Tensor4D) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * t.data().len());
    for d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Parse(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor4D> {
    if bytes.len() < 16 {
        return Err(Error::format(0, format!("tensor header needs 16 bytes, found {}", bytes.len())));
    }
    let dims: Vec<usize> =
        bytes[..16].chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize).collect();
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let expected = count.and_then(|n| n.checked_mul(4));
    if expected != Some(bytes.len() - 16) {
        return Err(Error::format(
            16,
            format!("length mismatch: dims {dims:?} need {expected:?} payload bytes, found {}", bytes.len() - 16),
        ));
    }
    let data = bytes[16..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Ok(Tensor4D::new(dims[0], dims[1], dims[2], dims[3], data)?)
}

pub fn read_tensor(path: &Path) -> Result<Tensor4D> {
    decode_tensor(&read_file(path)?)
}

pub fn write_tensor(path: &Path, t: &Tensor4D) -> Result<()> {
    write_file(path, &encode_tensor(t)?)
}

/// Uniform values in `[-1, 1)`.
pub fn random_tensor(dims: [usize; 4], seed: u64) -> Result<Tensor4D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [n, c, h, w] = dims;
    let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Ok(Tensor4D::new(n, c, h, w, data)?)
}
