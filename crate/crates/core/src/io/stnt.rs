//! STNT tensor file format.
//!
//! Little-endian layout: magic bytes `STNT`, `u8` version (1), `u8` dtype
//! (0 = f32, 1 = f64), `u8` rank, `rank x u32` dims, then the raw element
//! bytes. Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"STNT";
const VERSION: u8 = 1;

pub fn tensor_to_bytes<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let rank = t.rank();
    if rank > u8::MAX as usize {
        return Err(Error::Format(format!("rank {rank} exceeds format limit")));
    }
    let mut out = Vec::with_capacity(7 + 4 * rank + t.numel() * T::DTYPE.size_bytes());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.push(rank as u8);
    for &d in t.shape() {
        let d32 = u32::try_from(d)
            .map_err(|_| Error::Format(format!("dimension {d} overflows u32")))?;
        out.extend_from_slice(&d32.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn tensor_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let need = |n: usize| -> Result<()> {
        if bytes.len() < n {
            Err(Error::Format(format!(
                "truncated tensor: need {n} bytes, have {}",
                bytes.len()
            )))
        } else {
            Ok(())
        }
    };
    need(7)?;
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic, not an STNT tensor".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let dtype = Dtype::from_code(bytes[5])?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "dtype mismatch: file holds {dtype:?}, requested {:?}",
            T::DTYPE
        )));
    }
    let rank = bytes[6] as usize;
    need(7 + 4 * rank)?;
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for i in 0..rank {
        let off = 7 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::Format("dimension product overflows".into()))?;
        shape.push(d);
    }
    let elem = T::DTYPE.size_bytes();
    let data_off = 7 + 4 * rank;
    let data_len = numel
        .checked_mul(elem)
        .ok_or_else(|| Error::Format("data size overflows".into()))?;
    need(data_off + data_len)?;
    if bytes.len() != data_off + data_len {
        return Err(Error::Format(format!(
            "trailing bytes: expected {} total, got {}",
            data_off + data_len,
            bytes.len()
        )));
    }
    let data = bytes[data_off..]
        .chunks_exact(elem)
        .map(T::read_le)
        .collect();
    Tensor::from_vec(&shape, data)
}

pub fn tensor_save<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, tensor_to_bytes(t)?)?;
    Ok(())
}

pub fn tensor_load<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let bytes = fs::read(&path)?;
    tensor_from_bytes(&bytes).map_err(|e| {
        Error::Format(format!("{}: {e}", path.as_ref().display()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_f32_bit_exact() {
        let mut rng = Rng::new(2);
        let t = Tensor::<f32>::rand_normal(&[2, 3, 4], 0.0, 10.0, &mut rng).unwrap();
        let back: Tensor<f32> = tensor_from_bytes(&tensor_to_bytes(&t).unwrap()).unwrap();
        assert_eq!(t.shape(), back.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn round_trip_f64_bit_exact() {
        let mut rng = Rng::new(3);
        let t = Tensor::<f64>::rand_normal(&[7], 1.0, 0.5, &mut rng).unwrap();
        let back: Tensor<f64> = tensor_from_bytes(&tensor_to_bytes(&t).unwrap()).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = tensor_to_bytes(&Tensor::<f32>::scalar(1.0)).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            tensor_from_bytes::<f32>(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn truncation_rejected() {
        let bytes = tensor_to_bytes(&Tensor::<f64>::filled(&[4], 2.0).unwrap()).unwrap();
        assert!(matches!(
            tensor_from_bytes::<f64>(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let bytes = tensor_to_bytes(&Tensor::<f32>::scalar(1.0)).unwrap();
        assert!(matches!(
            tensor_from_bytes::<f64>(&bytes),
            Err(Error::Format(_))
        ));
    }
}
