//! Binary tensor exchange format used by golden-file tests and model
//! serialization: header of `rank` then each extent as little-endian u64,
//! followed by the little-endian IEEE-754 payload.

use super::{Element, Tensor};
use crate::error::{Error, Result};

pub fn write_tensor<E: Element>(t: &Tensor<E>, out: &mut Vec<u8>) {
    out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data().iter() {
        v.write_le(out);
    }
}

/// Read one tensor from `bytes`, returning it plus the number of bytes
/// consumed.
pub fn read_tensor<E: Element>(bytes: &[u8]) -> Result<(Tensor<E>, usize)> {
    let take_u64 = |at: usize| -> Result<u64> {
        bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::Marshal("truncated tensor header".into()))
    };
    let rank = take_u64(0)? as usize;
    if rank > 64 {
        return Err(Error::Marshal(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(take_u64(8 + 8 * i)? as usize);
    }
    let header = 8 + 8 * rank;
    let numel: usize = shape.iter().product();
    let payload = numel * E::BYTE_WIDTH;
    let end = header + payload;
    if bytes.len() < end {
        return Err(Error::Marshal(format!(
            "truncated tensor payload: want {payload} bytes, have {}",
            bytes.len().saturating_sub(header)
        )));
    }
    let data: Vec<E> = (0..numel)
        .map(|i| E::read_le(&bytes[header + i * E::BYTE_WIDTH..]))
        .collect();
    Ok((Tensor::from_vec(&shape, data)?, end))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![1.5, -0.25, 3.0, f32::MIN_POSITIVE, 0.0, -1.0])
            .unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf);
        let (back, used) = read_tensor::<f32>(&buf).unwrap();
        assert_eq!(used, buf.len());
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.to_vec(), t.to_vec());
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let t = Tensor::<f32>::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf);
        assert!(read_tensor::<f32>(&buf[..buf.len() - 1]).is_err());
    }
}
