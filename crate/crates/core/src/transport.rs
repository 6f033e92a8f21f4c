//! In-process links. Every payload is serialized to its wire layout and parsed
//! back on the receiving side, so recorded byte counts are real lengths.

use std::fmt;

use crate::grad::{dense_wire_len, GradientVector, Result, SparseUpdate};

/// What crosses a link.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Sparse(SparseUpdate),
    Dense(GradientVector),
}

impl Payload {
    pub fn dim(&self) -> usize {
        match self {
            Payload::Sparse(s) => s.dim(),
            Payload::Dense(g) => g.dim(),
        }
    }

    /// Analytic serialized size: `8 + 8k` sparse, `4 + 4d` dense.
    pub fn wire_len(&self) -> usize {
        match self {
            Payload::Sparse(s) => s.wire_len(),
            Payload::Dense(g) => dense_wire_len(g.dim()),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        match self {
            Payload::Sparse(s) => s.encode(),
            Payload::Dense(g) => g.encode_dense(),
        }
    }

    pub fn decode(bytes: &[u8], encoding: Encoding) -> Result<Payload> {
        match encoding {
            Encoding::Sparse => SparseUpdate::decode(bytes).map(Payload::Sparse),
            Encoding::Dense => GradientVector::decode_dense(bytes).map(Payload::Dense),
        }
    }

    pub fn encoding(&self) -> Encoding {
        match self {
            Payload::Sparse(_) => Encoding::Sparse,
            Payload::Dense(_) => Encoding::Dense,
        }
    }

    pub fn to_dense(&self) -> GradientVector {
        match self {
            Payload::Sparse(s) => s.densify(),
            Payload::Dense(g) => g.clone(),
        }
    }

    /// Sparse view; dense payloads are sparsified (exact zeros dropped).
    pub fn to_sparse(&self) -> SparseUpdate {
        match self {
            Payload::Sparse(s) => s.clone(),
            Payload::Dense(g) => g.sparsify(),
        }
    }

    pub fn add_into(&self, acc: &mut [f64]) -> Result<()> {
        match self {
            Payload::Sparse(s) => s.add_into(acc),
            Payload::Dense(g) => {
                if acc.len() != g.dim() {
                    return Err(crate::grad::GradError::DimensionMismatch { expected: acc.len(), found: g.dim() });
                }
                acc.iter_mut().zip(g.values()).for_each(|(a, v)| *a += v);
                Ok(())
            }
        }
    }

    /// Wraps a vector in the requested wire form.
    pub fn from_vector(g: GradientVector, encoding: Encoding) -> Payload {
        match encoding {
            Encoding::Sparse => Payload::Sparse(g.sparsify()),
            Encoding::Dense => Payload::Dense(g),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Sparse,
    Dense,
}

/// The four directed links of the end/edge/cloud hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Link {
    EndToEdge,
    EdgeToCloud,
    CloudToEdge,
    EdgeToEnd,
}

impl Link {
    pub const ALL: [Link; 4] = [Link::EndToEdge, Link::EdgeToCloud, Link::CloudToEdge, Link::EdgeToEnd];

    pub fn is_uplink(self) -> bool {
        matches!(self, Link::EndToEdge | Link::EdgeToCloud)
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Link::EndToEdge => "end->edge",
            Link::EdgeToCloud => "edge->cloud",
            Link::CloudToEdge => "cloud->edge",
            Link::EdgeToEnd => "edge->end",
        })
    }
}

/// One logged send: the payload as sent, how many receivers got a copy, and
/// the byte count the sender actually produced per copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    pub link: Link,
    pub payload: Payload,
    pub copies: usize,
    pub bytes_per_copy: usize,
}

impl Transmission {
    pub fn total_bytes(&self) -> usize {
        self.bytes_per_copy * self.copies
    }
}

/// Serializes `payload`, parses it back as the receiver would, and returns
/// the received payload with the encoded length.
pub fn transmit(payload: &Payload) -> Result<(Payload, usize)> {
    let bytes = payload.encode()?;
    let received = Payload::decode(&bytes, payload.encoding())?;
    Ok((received, bytes.len()))
}
