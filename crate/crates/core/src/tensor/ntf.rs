//! NTF1 tensor files: `NTF1`, u8 dtype code, u8 rank, rank x u32 extents, raw values.
//! Little-endian throughout.

use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Float, Result, Tensor, TensorError};

pub const NTF_MAGIC: &[u8; 4] = b"NTF1";

/// A tensor read from disk in whichever precision it was stored.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn to_precision<F: Float>(&self) -> Tensor<F> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn write_ntf_to<F: Float, W: Write>(tensor: &Tensor<F>, mut w: W) -> Result<()> {
    if tensor.rank() > u8::MAX as usize {
        return Err(TensorError::Format(format!(
            "rank {} exceeds 255",
            tensor.rank()
        )));
    }
    let mut buf =
        Vec::with_capacity(6 + 4 * tensor.rank() + tensor.numel() * std::mem::size_of::<F>());
    buf.extend_from_slice(NTF_MAGIC);
    buf.push(F::DTYPE.code());
    buf.push(tensor.rank() as u8);
    for &e in tensor.shape() {
        let e =
            u32::try_from(e).map_err(|_| TensorError::Format(format!("extent {e} exceeds u32")))?;
        buf.extend_from_slice(&e.to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact_or_format<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::Format(format!("truncated {what}")),
        _ => TensorError::Io(e),
    })
}

pub fn read_ntf_from<R: Read>(mut r: R) -> Result<AnyTensor> {
    let mut head = [0u8; 6];
    read_exact_or_format(&mut r, &mut head, "header")?;
    if &head[..4] != NTF_MAGIC {
        return Err(TensorError::Format(format!(
            "bad magic {:?}, expected NTF1",
            &head[..4]
        )));
    }
    let dtype = DType::from_code(head[4])
        .ok_or_else(|| TensorError::Format(format!("unknown dtype code {}", head[4])))?;
    let rank = head[5] as usize;
    let mut ext = vec![0u8; 4 * rank];
    read_exact_or_format(&mut r, &mut ext, "extents")?;
    let shape: Vec<usize> = ext
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| TensorError::Format(format!("extents {shape:?} overflow")))?;
    Ok(match dtype {
        DType::F32 => {
            let mut raw = vec![0u8; numel * 4];
            read_exact_or_format(&mut r, &mut raw, "values")?;
            let data = raw
                .chunks(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            AnyTensor::F32(Tensor::new(shape, data)?)
        }
        DType::F64 => {
            let mut raw = vec![0u8; numel * 8];
            read_exact_or_format(&mut r, &mut raw, "values")?;
            let data = raw
                .chunks(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            AnyTensor::F64(Tensor::new(shape, data)?)
        }
    })
}

pub fn write_ntf<F: Float>(tensor: &Tensor<F>, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_ntf_to(tensor, std::io::BufWriter::new(f))
}

pub fn read_ntf(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let f = std::fs::File::open(path)?;
    read_ntf_from(std::io::BufReader::new(f))
}
