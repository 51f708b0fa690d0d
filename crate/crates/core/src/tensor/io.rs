//! Portable tensor files and checkpoints.
//!
//! Tensor record: magic `LSTT`, u8 dtype (0 = f32, 1 = f64), u8 rank, `rank`
//! little-endian u32 dims, then the row-major little-endian payload.
//!
//! Checkpoint: a sequence of named records, each a little-endian u16 name
//! length, the UTF-8 name bytes and a tensor record, sorted by name.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LSTT";

/// A tensor of either supported dtype, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `R`, casting if the stored dtype differs.
    pub fn into_real<R: Real>(self) -> Tensor<R> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

pub fn encode_tensor<R: Real>(t: &Tensor<R>, out: &mut Vec<u8>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} too large", t.rank())));
    }
    out.extend_from_slice(MAGIC);
    out.push(R::DTYPE_CODE);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(t.len() * R::BYTES);
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

pub fn write_tensor<R: Real, W: Write>(w: &mut W, t: &Tensor<R>) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf)?;
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

fn read_payload<T: Real, R: Read>(r: &mut R, shape: Vec<usize>) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * T::BYTES];
    read_exact_or(r, &mut bytes, "tensor payload")?;
    let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<AnyTensor> {
    let mut head = [0u8; 6];
    read_exact_or(r, &mut head, "tensor header")?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected LSTT".into()));
    }
    let (dtype, rank) = (head[4], head[5] as usize);
    let mut dims = vec![0u8; rank * 4];
    read_exact_or(r, &mut dims, "tensor dims")?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    match dtype {
        0 => Ok(AnyTensor::F32(read_payload(r, shape)?)),
        1 => Ok(AnyTensor::F64(read_payload(r, shape)?)),
        other => Err(Error::Format(format!("unknown dtype code {other}"))),
    }
}

pub fn save_tensor<R: Real>(path: impl AsRef<Path>, t: &Tensor<R>) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let bytes = fs::read(path)?;
    let mut cursor = bytes.as_slice();
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format("trailing bytes after tensor record".into()));
    }
    Ok(t)
}

/// Named tensors, written in name order.
pub type Checkpoint = BTreeMap<String, AnyTensor>;

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (name, t) in ckpt {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match t {
            AnyTensor::F32(t) => encode_tensor(t, &mut out)?,
            AnyTensor::F64(t) => encode_tensor(t, &mut out)?,
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cursor = bytes;
    let mut out = Checkpoint::new();
    while !cursor.is_empty() {
        let mut len = [0u8; 2];
        read_exact_or(&mut cursor, &mut len, "checkpoint name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        read_exact_or(&mut cursor, &mut name, "checkpoint name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("checkpoint name is not UTF-8".into()))?;
        let t = read_tensor(&mut cursor)?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate checkpoint entry {name}")));
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf).unwrap();
        let mut expected = b"LSTT".to_vec();
        expected.extend_from_slice(&[0, 2, 1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            read_tensor(&mut &b"XXXX\0\0"[..]),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            read_tensor(&mut &b"LSTT\x07\0"[..]),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            read_tensor(&mut &b"LSTT\0\x01\x02\0\0\0\0"[..]),
            Err(Error::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bit_exact(
            shape in prop::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let mut s = seed;
            let data: Vec<f64> = (0..n).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits(s >> 2)
            }).collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            encode_tensor(&t, &mut buf).unwrap();
            let back = read_tensor(&mut buf.as_slice()).unwrap();
            match back {
                AnyTensor::F64(b) => {
                    prop_assert_eq!(b.shape(), t.shape());
                    for (x, y) in b.data().iter().zip(t.data()) {
                        prop_assert_eq!(x.to_bits(), y.to_bits());
                    }
                }
                AnyTensor::F32(_) => prop_assert!(false, "dtype changed"),
            }
        }

        #[test]
        fn checkpoint_round_trip(values in prop::collection::vec(-1e3f32..1e3, 1..20)) {
            let mut ckpt = Checkpoint::new();
            ckpt.insert("b.w".into(), Tensor::new(vec![values.len()], values.clone()).unwrap().into());
            ckpt.insert("a".into(), Tensor::<f64>::scalar(3.0).into());
            let bytes = encode_checkpoint(&ckpt).unwrap();
            prop_assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);
            // name order on disk
            prop_assert_eq!(&bytes[2..3], b"a");
        }
    }
}
