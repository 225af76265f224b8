//! Flat binary container for every map kind the pipeline exchanges.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "OODS"
//! version u32      currently 1
//! dtype   u8       0 = float32, 1 = int32, 2 = float64
//! rank    u8       2 or 3
//! dims    rank × u32
//! payload product(dims) values, row-major
//! ```
//!
//! Feature and logit maps are `[channels, height, width]` float32, label maps
//! are `[height, width]` int32 and calibration statistics are float64.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"OODS";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "oods";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    I32 = 1,
    F64 = 2,
}

impl Dtype {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::I32),
            2 => Ok(Dtype::F64),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::I32(_) => Dtype::I32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An n-dimensional row-major array as stored in a `.oods` file.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        validate_dims(&dims)?;
        let expected = element_count(&dims)?;
        if expected != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "dims {dims:?} imply {expected} values, payload has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn f32(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(values))
    }

    pub fn i32(dims: Vec<usize>, values: Vec<i32>) -> Result<Self> {
        Self::new(dims, TensorData::I32(values))
    }

    pub fn f64(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::new(dims, TensorData::F64(values))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    /// Equality on the encoded representation, so NaN payloads compare equal
    /// when their bits do.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        if self.dims != other.dims {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::I32(a), TensorData::I32(b)) => a == b,
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::InvalidArgument(format!(
                "expected float32 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Ok(v),
            other => Err(Error::InvalidArgument(format!(
                "expected int32 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Ok(v),
            other => Err(Error::InvalidArgument(format!(
                "expected float64 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if !(2..=3).contains(&dims.len()) {
        return Err(Error::UnsupportedRank(dims.len()));
    }
    if dims.contains(&0) {
        return Err(Error::DimensionMismatch(format!(
            "all dims must be >= 1, got {dims:?}"
        )));
    }
    if dims.iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::DimensionOverflow(dims.to_vec()));
    }
    Ok(())
}

fn element_count(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::DimensionOverflow(dims.to_vec()))
}

pub fn header_len(rank: usize) -> usize {
    4 + 4 + 1 + 1 + 4 * rank
}

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let dims = &tensor.dims;
    let payload = tensor.data.len() * tensor.dtype().size();
    let mut out = Vec::with_capacity(header_len(dims.len()) + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(tensor.dtype() as u8);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match &tensor.data {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let fixed = header_len(0);
    if bytes.len() < fixed {
        return Err(Error::Truncated(format!(
            "header needs {fixed} bytes, file has {}",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("slice of len 4");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("slice of len 4"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = Dtype::from_code(bytes[8])?;
    let rank = bytes[9] as usize;
    if !(2..=3).contains(&rank) {
        return Err(Error::UnsupportedRank(rank));
    }
    let header = header_len(rank);
    if bytes.len() < header {
        return Err(Error::Truncated(format!(
            "header of rank {rank} needs {header} bytes, file has {}",
            bytes.len()
        )));
    }
    let dims: Vec<usize> = bytes[fixed..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")) as usize)
        .collect();
    validate_dims(&dims)?;
    let count = element_count(&dims)?;
    let payload_len = count
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::DimensionOverflow(dims.clone()))?;
    let payload = &bytes[header..];
    if payload.len() < payload_len {
        return Err(Error::Truncated(format!(
            "dims {dims:?} need {payload_len} payload bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > payload_len {
        return Err(Error::DimensionMismatch(format!(
            "dims {dims:?} need {payload_len} payload bytes, found {} (trailing data)",
            payload.len()
        )));
    }
    let data = match dtype {
        Dtype::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect(),
        ),
        Dtype::I32 => TensorData::I32(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect(),
        ),
        Dtype::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        ),
    };
    Ok(Tensor { dims, data })
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensor);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    file.sync_data().map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_map_has_expected_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zeros.oods");
        let t = Tensor::f32(vec![2, 2], vec![0.0; 4]).unwrap();
        write_tensor(&path, &t).unwrap();
        let len = fs::metadata(&path).unwrap().len();
        assert_eq!(len, 4 + 4 + 1 + 1 + 8 + 16);
        assert!(read_tensor(&path).unwrap().bitwise_eq(&t));
    }

    #[test]
    fn logit_map_matches_hand_assembled_bytes() {
        let values: Vec<f32> = (1..=12).map(|v| v as f32).collect();
        let t = Tensor::f32(vec![3, 2, 2], values.clone()).unwrap();

        let mut expected = Vec::new();
        expected.extend_from_slice(b"OODS");
        expected.extend_from_slice(&[1, 0, 0, 0]);
        expected.push(0);
        expected.push(3);
        for d in [3u32, 2, 2] {
            expected.extend_from_slice(&[d as u8, 0, 0, 0]);
        }
        for v in &values {
            expected.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        assert_eq!(encode(&t), expected);
        assert!(decode(&expected).unwrap().bitwise_eq(&t));
    }

    #[test]
    fn rank_four_is_rejected() {
        let err = Tensor::f32(vec![1, 1, 1, 1], vec![0.0]).unwrap_err();
        assert!(matches!(err, Error::UnsupportedRank(4)));
        assert!(err.to_string().contains("unsupported rank"));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = encode(&Tensor::i32(vec![1, 2], vec![3, 4]).unwrap());
        bytes[..4].copy_from_slice(b"XXXX");
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.oods");
        write_tensor(&path, &Tensor::f64(vec![2, 3], vec![1.5; 6]).unwrap()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        let err = read_tensor(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn unknown_dtype_is_rejected() {
        let mut bytes = encode(&Tensor::i32(vec![1, 1], vec![7]).unwrap());
        bytes[8] = 9;
        assert!(matches!(decode(&bytes), Err(Error::UnknownDtype(9))));
    }

    #[test]
    fn payload_length_must_match_dims() {
        assert!(matches!(
            Tensor::f32(vec![2, 2], vec![0.0; 3]),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(Tensor::f32(vec![0, 2], vec![]).is_err());
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        let dims = prop::collection::vec(1usize..5, 2..=3);
        (dims, 0u8..3).prop_flat_map(|(dims, code)| {
            let n: usize = dims.iter().product();
            match code {
                0 => prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n)
                    .prop_map(move |v| Tensor::f32(dims.clone(), v).unwrap())
                    .boxed(),
                1 => prop::collection::vec(any::<i32>(), n)
                    .prop_map(move |v| Tensor::i32(dims.clone(), v).unwrap())
                    .boxed(),
                _ => prop::collection::vec(any::<u64>().prop_map(f64::from_bits), n)
                    .prop_map(move |v| Tensor::f64(dims.clone(), v).unwrap())
                    .boxed(),
            }
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(t in arb_tensor()) {
            let back = decode(&encode(&t)).unwrap();
            prop_assert!(back.bitwise_eq(&t));
        }
    }
}
