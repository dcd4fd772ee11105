use std::fmt;
use std::iter::Sum;
use std::ops::Add;

use crate::quantizer::{packed_len, QuantSpec};

/// How a quantized layer is executed at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExecPath {
    /// Low-bit weights only.
    FullyQuantized,
    /// Low-bit base plus a separate 32-bit adapter path.
    Mixed,
}

impl ExecPath {
    pub fn name(&self) -> &'static str {
        match self {
            Self::FullyQuantized => "fully_quantized",
            Self::Mixed => "mixed",
        }
    }
}

impl fmt::Display for ExecPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub in_dim: usize,
    pub out_dim: usize,
    pub tokens: usize,
}

/// Arithmetic and memory traffic of a forward pass.
///
/// `macs` counts multiplies and adds separately (two per multiply-accumulate).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CostModel {
    pub macs: u64,
    pub bytes_read: u64,
}

impl Add for CostModel {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            macs: self.macs + rhs.macs,
            bytes_read: self.bytes_read + rhs.bytes_read,
        }
    }
}

impl Sum for CostModel {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Exact cost of one layer.
///
/// The quantized product costs `2 o i` per token and reads the packed codes
/// plus 32-bit scales and biases. The mixed path adds `2 r (i + o)` per
/// token for `B (A X)` and reads the 32-bit adapter. `rank = 0` means no
/// adapter.
pub fn flops(path: ExecPath, dims: LayerDims, rank: usize, spec: &QuantSpec) -> CostModel {
    let LayerDims {
        in_dim,
        out_dim,
        tokens,
    } = dims;
    let (i, o, t, r) = (in_dim as u64, out_dim as u64, tokens as u64, rank as u64);
    let groups = o * (i / spec.group_size() as u64);
    let base = CostModel {
        macs: 2 * o * i * t,
        bytes_read: packed_len(in_dim * out_dim, spec.n_bits()) as u64 + 8 * groups,
    };
    match path {
        ExecPath::FullyQuantized => base,
        ExecPath::Mixed => {
            base + CostModel {
                macs: 2 * r * (i + o) * t,
                bytes_read: 4 * r * (i + o),
            }
        }
    }
}
