//! Dense and sparse gradient representations and their wire layouts.
//!
//! A model's gradient is always a single flat vector in layer-major,
//! row-major order. The sparse form carries only the nonzero coordinates and
//! is what travels between participants.
//!
//! Wire layouts (little-endian):
//!
//! * sparse: `u32 d, u32 k, k × (u32 index, f32 value)`, i.e. `8 + 8k` bytes
//! * dense: `u32 d, d × f32`, i.e. `4 + 4d` bytes

use thiserror::Error;

pub const SPARSE_HEADER_BYTES: usize = 8;
pub const SPARSE_ENTRY_BYTES: usize = 8;
pub const DENSE_HEADER_BYTES: usize = 4;
pub const DENSE_ENTRY_BYTES: usize = 4;

/// Relative slack allowed above the clip bound before a vector is rescaled.
///
/// Rescaling lands on the bound only up to rounding, so without slack a second
/// clip would rescale again and break idempotence.
const CLIP_RELATIVE_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("non-finite gradient entry {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("clip bound must be positive and finite, got {0}")]
    InvalidClip(f64),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("sparse update has {indices} indices but {entries} entries")]
    LengthMismatch { indices: usize, entries: usize },
    #[error("sparse index {index} at position {position} is out of range for dimension {dim}")]
    IndexOutOfRange { position: usize, index: usize, dim: usize },
    #[error("sparse indices not strictly increasing at position {position} ({previous} then {index})")]
    UnorderedIndex { position: usize, previous: usize, index: usize },
    #[error("dimension {0} does not fit the u32 wire header")]
    TooLarge(usize),
    #[error("wire payload truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("wire payload has {0} trailing bytes")]
    TrailingBytes(usize),
}

pub type Result<T> = std::result::Result<T, GradError>;

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(GradError::NonFinite { index, value: values[index] }),
        None => Ok(()),
    }
}

/// A dense, finite, flattened gradient (or model-sized update).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientVector {
    values: Vec<f64>,
}

impl GradientVector {
    /// Wraps `values`, rejecting NaN and infinities.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    fn check_dim(&self, other: &GradientVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(GradError::DimensionMismatch { expected: self.dim(), found: other.dim() });
        }
        Ok(())
    }

    /// `self + other`; fails on dimension mismatch or overflow.
    pub fn add(&self, other: &GradientVector) -> Result<GradientVector> {
        self.check_dim(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        GradientVector::new(values)
    }

    /// `self - other`; fails on dimension mismatch or overflow.
    pub fn sub(&self, other: &GradientVector) -> Result<GradientVector> {
        self.check_dim(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        GradientVector::new(values)
    }

    pub fn scale(&self, factor: f64) -> Result<GradientVector> {
        GradientVector::new(self.values.iter().map(|v| v * factor).collect())
    }

    /// `a·self + b·other`, computed entry by entry.
    pub fn blend(&self, a: f64, other: &GradientVector, b: f64) -> Result<GradientVector> {
        self.check_dim(other)?;
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        GradientVector::new(values)
    }

    /// Scales `self` onto the L2 ball of radius `bound`.
    ///
    /// Vectors already inside the ball are returned unchanged; others are
    /// multiplied by `bound / ‖self‖₂`.
    pub fn clip_l2(&self, bound: f64) -> Result<GradientVector> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(GradError::InvalidClip(bound));
        }
        let norm = self.l2_norm();
        if norm <= bound * (1.0 + CLIP_RELATIVE_SLACK) {
            return Ok(self.clone());
        }
        let factor = bound / norm;
        Ok(GradientVector { values: self.values.iter().map(|v| v * factor).collect() })
    }

    /// Drops exact zeros.
    pub fn sparsify(&self) -> SparseUpdate {
        let (indices, entries) = self
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .unzip();
        SparseUpdate { dim: self.dim(), indices, entries }
    }

    /// Dense wire encoding: `u32 d` then `d` little-endian `f32` values.
    pub fn encode_dense(&self) -> Result<Vec<u8>> {
        let d = u32::try_from(self.dim()).map_err(|_| GradError::TooLarge(self.dim()))?;
        let mut out = Vec::with_capacity(dense_wire_len(self.dim()));
        out.extend_from_slice(&d.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode_dense(bytes: &[u8]) -> Result<GradientVector> {
        let mut reader = WireReader::new(bytes);
        let d = reader.u32()? as usize;
        reader.require(d * DENSE_ENTRY_BYTES)?;
        let values = (0..d).map(|_| reader.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        reader.finish()?;
        GradientVector::new(values)
    }
}

impl From<GradientVector> for Vec<f64> {
    fn from(g: GradientVector) -> Self {
        g.values
    }
}

/// Wire form of a subsampled update: nonzero coordinates plus the original
/// dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseUpdate {
    dim: usize,
    indices: Vec<usize>,
    entries: Vec<f64>,
}

impl SparseUpdate {
    pub fn new(dim: usize, indices: Vec<usize>, entries: Vec<f64>) -> Result<Self> {
        if indices.len() != entries.len() {
            return Err(GradError::LengthMismatch { indices: indices.len(), entries: entries.len() });
        }
        for (position, &index) in indices.iter().enumerate() {
            if index >= dim {
                return Err(GradError::IndexOutOfRange { position, index, dim });
            }
            if position > 0 && indices[position - 1] >= index {
                return Err(GradError::UnorderedIndex { position, previous: indices[position - 1], index });
            }
        }
        check_finite(&entries)?;
        Ok(Self { dim, indices, entries })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, indices: Vec::new(), entries: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of transmitted coordinates.
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn densify(&self) -> GradientVector {
        let mut values = vec![0.0; self.dim];
        for (&i, &v) in self.indices.iter().zip(&self.entries) {
            values[i] = v;
        }
        GradientVector { values }
    }

    /// Adds this update into a dense accumulator of the same dimension.
    pub fn add_into(&self, acc: &mut [f64]) -> Result<()> {
        if acc.len() != self.dim {
            return Err(GradError::DimensionMismatch { expected: acc.len(), found: self.dim });
        }
        for (&i, &v) in self.indices.iter().zip(&self.entries) {
            acc[i] += v;
        }
        Ok(())
    }

    pub fn wire_len(&self) -> usize {
        sparse_wire_len(self.k())
    }

    /// Sparse wire encoding: `u32 d, u32 k, k × (u32 index, f32 value)`.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let d = u32::try_from(self.dim).map_err(|_| GradError::TooLarge(self.dim))?;
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&d.to_le_bytes());
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        for (&i, &v) in self.indices.iter().zip(&self.entries) {
            out.extend_from_slice(&(i as u32).to_le_bytes());
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(out)
    }

    /// Decodes and validates a sparse payload.
    pub fn decode(bytes: &[u8]) -> Result<SparseUpdate> {
        let mut reader = WireReader::new(bytes);
        let dim = reader.u32()? as usize;
        let k = reader.u32()? as usize;
        reader.require(k * SPARSE_ENTRY_BYTES)?;
        let mut indices = Vec::with_capacity(k);
        let mut entries = Vec::with_capacity(k);
        for _ in 0..k {
            indices.push(reader.u32()? as usize);
            entries.push(f64::from(reader.f32()?));
        }
        reader.finish()?;
        SparseUpdate::new(dim, indices, entries)
    }
}

pub const fn sparse_wire_len(k: usize) -> usize {
    SPARSE_HEADER_BYTES + k * SPARSE_ENTRY_BYTES
}

pub const fn dense_wire_len(d: usize) -> usize {
    DENSE_HEADER_BYTES + d * DENSE_ENTRY_BYTES
}

struct WireReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> WireReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn require(&self, n: usize) -> Result<()> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(GradError::Truncated { needed: self.pos + n, available: self.bytes.len() });
        }
        Ok(())
    }

    fn take4(&mut self) -> Result<[u8; 4]> {
        self.require(4)?;
        let mut buf = [0u8; 4];
        buf.copy_from_slice(&self.bytes[self.pos..self.pos + 4]);
        self.pos += 4;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        self.take4().map(u32::from_le_bytes)
    }

    fn f32(&mut self) -> Result<f32> {
        self.take4().map(f32::from_le_bytes)
    }

    fn finish(self) -> Result<()> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(GradError::TrailingBytes(n)),
        }
    }
}
