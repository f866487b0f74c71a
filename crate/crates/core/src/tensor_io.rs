//! Binary tensor dumps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"RCTD" | u32 version = 1 | u8 dtype (0 = f32, 1 = f64) | u8 rank
//!         | u64 dims[rank] | row-major element data
//! ```

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"RCTD";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("unknown dtype tag {0}")]
    BadDType(u8),
    #[error("truncated tensor dump: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("{0} trailing bytes after tensor payload")]
    Trailing(usize),
    #[error("dtype mismatch: file holds {found:?}, caller asked for {wanted:?}")]
    DTypeMismatch { found: DType, wanted: DType },
    #[error("shape overflow")]
    ShapeOverflow,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self, TensorIoError> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            t => Err(TensorIoError::BadDType(t)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

/// A decoded tensor dump.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorDump {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl TensorDump {
    pub fn from_f64(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data: TensorData::F64(data) }
    }

    pub fn from_f32(dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data: TensorData::F32(data) }
    }

    /// Builds a dump with the requested on-disk precision.
    pub fn with_dtype(dims: Vec<usize>, data: &[f64], dtype: DType) -> Self {
        match dtype {
            DType::F64 => Self::from_f64(dims, data.to_vec()),
            DType::F32 => Self::from_f32(dims, data.iter().map(|&x| x as f32).collect()),
        }
    }

    pub fn from_array<T: crate::Real>(a: &ArrayD<T>) -> Self {
        let dims = a.shape().to_vec();
        match T::DTYPE {
            DType::F32 => Self::from_f32(dims, a.iter().map(|x| x.to_f32().unwrap()).collect()),
            DType::F64 => Self::from_f64(dims, a.iter().map(|x| x.to_f64().unwrap()).collect()),
        }
    }

    pub fn to_array_f64(&self) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&self.dims), self.data.to_f64())
            .expect("dims validated on construction")
    }

    pub fn to_array<T: crate::Real>(&self) -> Result<ArrayD<T>, TensorIoError> {
        if self.data.dtype() != T::DTYPE {
            return Err(TensorIoError::DTypeMismatch { found: self.data.dtype(), wanted: T::DTYPE });
        }
        let v: Vec<T> = self.data.to_f64().into_iter().map(T::lit).collect();
        Ok(ArrayD::from_shape_vec(IxDyn(&self.dims), v).expect("dims validated on construction"))
    }

    pub fn encode(&self) -> Vec<u8> {
        let dtype = self.data.dtype();
        let mut out = Vec::with_capacity(10 + 8 * self.dims.len() + self.data.len() * dtype.size());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(dtype.tag());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TensorIoError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(TensorIoError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(TensorIoError::BadVersion(version));
        }
        let dtype = DType::from_tag(cur.take(1)?[0])?;
        let rank = cur.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
            dims.push(usize::try_from(d).map_err(|_| TensorIoError::ShapeOverflow)?);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(TensorIoError::ShapeOverflow)?;
        let nbytes = count.checked_mul(dtype.size()).ok_or(TensorIoError::ShapeOverflow)?;
        let payload = cur.take(nbytes)?;
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::F64 => TensorData::F64(
                payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        };
        if cur.pos != bytes.len() {
            return Err(TensorIoError::Trailing(bytes.len() - cur.pos));
        }
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), TensorIoError> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, TensorIoError> {
        Self::decode(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorIoError> {
        let end = self.pos.checked_add(n).ok_or(TensorIoError::ShapeOverflow)?;
        if end > self.bytes.len() {
            return Err(TensorIoError::Truncated { need: end, have: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let d = TensorDump::from_f32(vec![2, 1], vec![1.0, -2.0]);
        let b = d.encode();
        assert_eq!(&b[..4], b"RCTD");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(b[8], 0);
        assert_eq!(b[9], 2);
        assert_eq!(u64::from_le_bytes(b[10..18].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[18..26].try_into().unwrap()), 1);
        assert_eq!(b.len(), 26 + 8);
        assert_eq!(f32::from_le_bytes(b[30..34].try_into().unwrap()), -2.0);
    }

    #[test]
    fn rejects_corrupt_input() {
        let mut b = TensorDump::from_f64(vec![3], vec![1.0, 2.0, 3.0]).encode();
        assert!(matches!(TensorDump::decode(&b[..b.len() - 1]), Err(TensorIoError::Truncated { .. })));
        b.push(0);
        assert!(matches!(TensorDump::decode(&b), Err(TensorIoError::Trailing(1))));
        b[0] = b'X';
        assert!(matches!(TensorDump::decode(&b), Err(TensorIoError::BadMagic(_))));
        let mut c = TensorDump::from_f64(vec![1], vec![1.0]).encode();
        c[8] = 7;
        assert!(matches!(TensorDump::decode(&c), Err(TensorIoError::BadDType(7))));
    }

    #[test]
    fn scalar_rank_zero() {
        let d = TensorDump::from_f64(vec![], vec![4.5]);
        assert_eq!(TensorDump::decode(&d.encode()).unwrap(), d);
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bit_exact(
            dims in proptest::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let mut s = seed;
            let data: Vec<f64> = (0..n).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits(s >> 2)
            }).collect();
            let d = TensorDump::from_f64(dims, data);
            let back = TensorDump::decode(&d.encode()).unwrap();
            let (TensorData::F64(a), TensorData::F64(b)) = (&d.data, &back.data) else { unreachable!() };
            prop_assert_eq!(&d.dims, &back.dims);
            prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
