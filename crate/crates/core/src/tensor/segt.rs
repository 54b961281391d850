//! SEGT: the binary array format used for checkpoints, images, masks and
//! ensemble softmax dumps.
//!
//! ```text
//! magic    4 bytes  "SEGT"
//! version  u16 LE   currently 1
//! dtype    u8       0 = u8, 1 = f32
//! ndim     u8
//! dims     ndim x u32 LE
//! payload  row-major, little-endian elements
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SEGT";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum SegtData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

/// A decoded SEGT array.
#[derive(Clone, Debug, PartialEq)]
pub struct SegtArray {
    pub shape: Vec<usize>,
    pub data: SegtData,
}

impl SegtArray {
    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        check_len(&shape, data.len())?;
        Ok(Self {
            shape,
            data: SegtData::U8(data),
        })
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_len(&shape, data.len())?;
        Ok(Self {
            shape,
            data: SegtData::F32(data),
        })
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        match self.data {
            SegtData::F32(d) => Tensor::new(self.shape, d),
            SegtData::U8(_) => Err(Error::Format("expected f32 payload, found u8".into())),
        }
    }

    pub fn into_u8(self) -> Result<(Vec<usize>, Vec<u8>)> {
        match self.data {
            SegtData::U8(d) => Ok((self.shape, d)),
            SegtData::F32(_) => Err(Error::Format("expected u8 payload, found f32".into())),
        }
    }

    pub fn encode<W: Write>(&self, mut w: W) -> Result<()> {
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("rank {} too large", self.shape.len())));
        }
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let dtype = match self.data {
            SegtData::U8(_) => 0u8,
            SegtData::F32(_) => 1u8,
        };
        w.write_all(&[dtype, self.shape.len() as u8])?;
        for &d in &self.shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        match &self.data {
            SegtData::U8(d) => w.write_all(d)?,
            SegtData::F32(d) => {
                let mut buf = Vec::with_capacity(d.len() * 4);
                for v in d {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn decode<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 8];
        r.read_exact(&mut header)
            .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
        if &header[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &header[..4])));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dtype = header[6];
        let ndim = header[7] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut d = [0u8; 4];
            r.read_exact(&mut d)
                .map_err(|e| Error::Format(format!("truncated dims: {e}")))?;
            shape.push(u32::from_le_bytes(d) as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("element count overflows".into()))?;
        let width = match dtype {
            0 => 1,
            1 => 4,
            other => return Err(Error::Format(format!("unknown dtype {other}"))),
        };
        let mut payload = vec![0u8; numel * width];
        r.read_exact(&mut payload)
            .map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        let data = if dtype == 0 {
            SegtData::U8(payload)
        } else {
            SegtData::F32(
                payload
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            )
        };
        Ok(Self { shape, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.encode(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path)
            .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
        Self::decode(BufReader::new(f))
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::shape(format!("shape {shape:?} needs {numel} values, got {len}")));
    }
    Ok(())
}

impl Tensor {
    pub fn save_segt(&self, path: impl AsRef<Path>) -> Result<()> {
        SegtArray::f32(self.shape().to_vec(), self.data().to_vec())?.save(path)
    }

    pub fn load_segt(path: impl AsRef<Path>) -> Result<Self> {
        SegtArray::load(path)?.into_tensor()
    }
}
