//! Dense row-major `f64` tensors and their on-disk snapshot format.
//!
//! Feature maps are laid out height × width × channels; convolution kernels
//! are k × k × in-channels × out-channels. Every constructor rejects
//! non-finite values, so a `Tensor` that exists is a finite tensor.
//!
//! Snapshot layout (all integers and reals little-endian):
//!
//! ```text
//! magic    8 bytes   b"MLTTENSR"
//! version  u64       1
//! rank     u64
//! dims     rank × u64
//! data     prod(dims) × f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"MLTTENSR";
pub const SNAPSHOT_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn first_non_finite(data: &[f64]) -> Option<(usize, f64)> {
    data.iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite())
        .map(|(i, v)| (i, *v))
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                expected: shape,
                actual: vec![data.len()],
            });
        }
        if let Some((index, value)) = first_non_finite(&data) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernels whose output is finite by
    /// construction; still checked in debug builds.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the values. Callers must keep them finite; use
    /// [`Tensor::check_finite`] afterwards when that is not obvious.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert!(
            self.is_scalar(),
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    /// Interprets a rank-3 tensor as (height, width, channels).
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            other => Err(Error::geometry(
                "hwc",
                format!("expected a rank-3 feature map, got shape {other:?}"),
            )),
        }
    }

    pub fn at3(&self, y: usize, x: usize, c: usize) -> f64 {
        let (_, w, ch) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                expected: shape,
                actual: self.shape.clone(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn check_finite(&self) -> Result<()> {
        match first_non_finite(&self.data) {
            Some((index, value)) => Err(Error::NonFinite { index, value }),
            None => Ok(()),
        }
    }

    pub fn ensure_shape(&self, op: &'static str, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                op,
                expected: expected.to_vec(),
                actual: self.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        other.ensure_shape("add_assign", &self.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn write_snapshot<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(SNAPSHOT_MAGIC)?;
        out.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        out.write_all(&(self.shape.len() as u64).to_le_bytes())?;
        for d in &self.shape {
            out.write_all(&(*d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn read_snapshot<R: Read>(mut input: R, origin: &Path) -> Result<Self> {
        let fmt = |detail: String| Error::Format {
            path: origin.to_path_buf(),
            detail,
        };
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(origin, e))?;
        let mut cursor = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = cursor + n;
            if end > bytes.len() {
                return Err(fmt(format!("truncated snapshot at byte {cursor}")));
            }
            let slice = &bytes[cursor..end];
            cursor = end;
            Ok(slice)
        };
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));

        if take(8)? != SNAPSHOT_MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let version = u64_at(take(8)?);
        if version != SNAPSHOT_VERSION {
            return Err(fmt(format!("unsupported snapshot version {version}")));
        }
        let rank = u64_at(take(8)?) as usize;
        if rank > 16 {
            return Err(fmt(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64_at(take(8)?) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if cursor != bytes.len() {
            return Err(fmt("trailing bytes after tensor data".into()));
        }
        Tensor::new(shape, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_snapshot(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_snapshot(std::io::BufReader::new(file), path)
    }
}
