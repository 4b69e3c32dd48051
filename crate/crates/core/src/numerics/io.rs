//! `S2TN` binary tensor files.
//!
//! Layout (little-endian): magic `S2TN`, `u8` version (1), `u8` dtype tag
//! (0 = f32, 1 = f64), `u32` rank, `rank x u64` dims, then the payload in
//! row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DType, NumericsError, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"S2TN";
pub const TENSOR_VERSION: u8 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<(), NumericsError> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[TENSOR_VERSION, t.dtype().tag()])?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match t.dtype() {
        DType::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        DType::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], NumericsError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor, NumericsError> {
    let magic: [u8; 4] = read_array(r)?;
    if &magic != TENSOR_MAGIC {
        return Err(NumericsError::Format(format!("bad tensor magic {magic:?}")));
    }
    let [version, tag] = read_array::<2, _>(r)?;
    if version != TENSOR_VERSION {
        return Err(NumericsError::Format(format!("unsupported tensor version {version}")));
    }
    let dtype = DType::from_tag(tag).ok_or_else(|| NumericsError::Format(format!("unknown dtype tag {tag}")))?;
    let rank = u32::from_le_bytes(read_array(r)?) as usize;
    if rank == 0 || rank > 16 {
        return Err(NumericsError::Format(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(read_array(r)?);
        shape.push(usize::try_from(d).map_err(|_| NumericsError::Format(format!("dim {d} too large")))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n <= (1 << 34))
        .ok_or_else(|| NumericsError::Format(format!("implausible shape {shape:?}")))?;
    let mut data = Vec::with_capacity(numel);
    match dtype {
        DType::F32 => {
            for _ in 0..numel {
                data.push(f32::from_le_bytes(read_array(r)?) as f64);
            }
        }
        DType::F64 => {
            for _ in 0..numel {
                data.push(f64::from_le_bytes(read_array(r)?));
            }
        }
    }
    Tensor::with_dtype(shape, dtype, data).map_err(|e| NumericsError::Format(e.to_string()))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<(), NumericsError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor, NumericsError> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes() {
        let t = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"S2TN");
        assert_eq!(buf[4], 1);
        assert_eq!(buf[5], 1);
        assert_eq!(&buf[6..10], &1u32.to_le_bytes());
        assert_eq!(&buf[10..18], &2u64.to_le_bytes());
        assert_eq!(&buf[18..26], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 34);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tensor(&mut bad.as_slice()), Err(NumericsError::Format(_))));
        let short = &buf[..buf.len() - 3];
        assert!(read_tensor(&mut &short[..]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(shape in prop::collection::vec(1usize..5, 1..4), f32_mode in any::<bool>(), seed in any::<u64>()) {
            let mut rng = crate::numerics::Rng::new(seed);
            let dtype = if f32_mode { DType::F32 } else { DType::F64 };
            let t = rng.normal_tensor(&shape, 3.0).to_dtype(dtype);
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&mut buf.as_slice()).unwrap();
            prop_assert!(back.bit_eq(&t));
            prop_assert_eq!(back.dtype(), dtype);
        }
    }
}
