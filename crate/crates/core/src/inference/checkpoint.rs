//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        4 bytes  "L4Q1"
//! version      u32
//! layer_count  u32
//! per layer:
//!   kind        u8       0 = fully quantized, 1 = mixed precision
//!   rows, cols  u32, u32
//!   n_bits      u8
//!   group_size  u32
//!   code_bytes  u32, then that many bytes of packed codes
//!   scales      f32 x groups
//!   biases      f32 x groups
//!   mixed only: rank u32, alpha f32, A f32 x (rank*cols), B f32 x (rows*rank)
//! head:
//!   rows, cols  u32, u32
//!   weights     f32 x (rows*cols)
//!   bias        f32 x rows
//! ```
//!
//! Hidden layers are followed by `tanh`; the head is affine.

use std::io::{Read, Write};
use std::path::Path;

use super::fused::{fused_forward, mixed_forward};
use crate::error::{L4qError, Result};
use crate::layers::LoraAdapter;
use crate::numerics::Matrix;
use crate::quantizer::{GroupParams, PackedQuantTensor, QuantSpec};

pub const MAGIC: &[u8; 4] = b"L4Q1";
pub const VERSION: u32 = 1;

const KIND_QUANTIZED: u8 = 0;
const KIND_MIXED: u8 = 1;

/// One hidden layer as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointLayer {
    /// Low-bit weights only.
    Quantized(PackedQuantTensor),
    /// Low-bit base plus a separate 32-bit adapter path.
    Mixed {
        base: PackedQuantTensor,
        adapter: LoraAdapter<f32>,
    },
}

impl CheckpointLayer {
    pub fn base(&self) -> &PackedQuantTensor {
        match self {
            Self::Quantized(t) | Self::Mixed { base: t, .. } => t,
        }
    }

    pub fn is_mixed(&self) -> bool {
        matches!(self, Self::Mixed { .. })
    }

    /// Pre-activation output of this layer.
    pub fn forward(&self, x: &Matrix<f32>) -> Result<Matrix<f32>> {
        match self {
            Self::Quantized(t) => fused_forward(t, x),
            Self::Mixed { base, adapter } => mixed_forward(base, adapter, x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub layers: Vec<CheckpointLayer>,
    pub head_weight: Matrix<f32>,
    pub head_bias: Vec<f32>,
}

impl Checkpoint {
    pub fn new(layers: Vec<CheckpointLayer>, head_weight: Matrix<f32>, head_bias: Vec<f32>) -> Result<Self> {
        let ckpt = Self {
            layers,
            head_weight,
            head_bias,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    fn validate(&self) -> Result<()> {
        let mut width = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let t = layer.base();
            if let Some(w) = width {
                if t.cols() != w {
                    return Err(L4qError::Format(format!("layer {i} expects {} inputs, previous gives {w}", t.cols())));
                }
            }
            if let CheckpointLayer::Mixed { adapter, .. } = layer {
                if adapter.in_dim() != t.cols() || adapter.out_dim() != t.rows() {
                    return Err(L4qError::Format(format!("layer {i} adapter shape does not match its base")));
                }
            }
            width = Some(t.rows());
        }
        if let Some(w) = width {
            if self.head_weight.cols() != w {
                return Err(L4qError::Format(format!("head expects {} inputs, last layer gives {w}", self.head_weight.cols())));
            }
        }
        if self.head_bias.len() != self.head_weight.rows() {
            return Err(L4qError::Format("head bias length does not match head rows".into()));
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(self.head_weight.cols(), |l| l.base().cols())
    }

    pub fn out_dim(&self) -> usize {
        self.head_weight.rows()
    }

    pub fn is_fully_quantized(&self) -> bool {
        !self.layers.iter().any(CheckpointLayer::is_mixed)
    }

    /// Full model forward: `tanh` after every hidden layer, then the head.
    pub fn forward(&self, x: &Matrix<f32>) -> Result<Matrix<f32>> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?.map(f32::tanh);
        }
        head_forward(&self.head_weight, &self.head_bias, &h)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        put_u32(w, len_u32(self.layers.len())?)?;
        for layer in &self.layers {
            let t = layer.base();
            w.write_all(&[if layer.is_mixed() { KIND_MIXED } else { KIND_QUANTIZED }])?;
            put_u32(w, len_u32(t.rows())?)?;
            put_u32(w, len_u32(t.cols())?)?;
            w.write_all(&[t.spec().n_bits()])?;
            put_u32(w, len_u32(t.spec().group_size())?)?;
            put_u32(w, len_u32(t.bytes().len())?)?;
            w.write_all(t.bytes())?;
            put_f32s(w, t.params().scales())?;
            put_f32s(w, t.params().biases())?;
            if let CheckpointLayer::Mixed { adapter, .. } = layer {
                put_u32(w, len_u32(adapter.rank())?)?;
                put_f32s(w, &[adapter.alpha()])?;
                put_f32s(w, adapter.a().as_slice())?;
                put_f32s(w, adapter.b().as_slice())?;
            }
        }
        put_u32(w, len_u32(self.head_weight.rows())?)?;
        put_u32(w, len_u32(self.head_weight.cols())?)?;
        put_f32s(w, self.head_weight.as_slice())?;
        put_f32s(w, &self.head_bias)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let ckpt = Self::read_from(&mut r)?;
        if !r.is_empty() {
            return Err(L4qError::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(ckpt)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(L4qError::Format(format!("bad magic {magic:?}")));
        }
        let version = get_u32(r, "version")?;
        if version != VERSION {
            return Err(L4qError::Format(format!("unsupported version {version}")));
        }
        let count = get_u32(r, "layer count")? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let kind = get_u8(r, "layer kind")?;
            let rows = get_u32(r, "rows")? as usize;
            let cols = get_u32(r, "cols")? as usize;
            let n_bits = get_u8(r, "n_bits")?;
            let group_size = get_u32(r, "group_size")? as usize;
            let spec = QuantSpec::new(n_bits, group_size)?;
            let gpr = spec.groups_per_row(cols)?;
            let n_bytes = get_u32(r, "code length")? as usize;
            let mut packed = vec![0u8; n_bytes];
            read_exact(r, &mut packed, "codes")?;
            let scales = get_f32s(r, rows * gpr, "scales")?;
            let biases = get_f32s(r, rows * gpr, "biases")?;
            let params = GroupParams::new(rows, gpr, group_size, scales, biases)?;
            let base = PackedQuantTensor::from_parts(rows, cols, spec, params, packed)?;
            let layer = match kind {
                KIND_QUANTIZED => CheckpointLayer::Quantized(base),
                KIND_MIXED => {
                    let rank = get_u32(r, "rank")? as usize;
                    let alpha = get_f32s(r, 1, "alpha")?[0];
                    let a = Matrix::new(rank, cols, get_f32s(r, rank * cols, "adapter A")?)?;
                    let b = Matrix::new(rows, rank, get_f32s(r, rows * rank, "adapter B")?)?;
                    CheckpointLayer::Mixed {
                        base,
                        adapter: LoraAdapter::new(a, b, alpha)?,
                    }
                }
                other => return Err(L4qError::Format(format!("layer {i}: unknown kind {other}"))),
            };
            layers.push(layer);
        }
        let rows = get_u32(r, "head rows")? as usize;
        let cols = get_u32(r, "head cols")? as usize;
        let head_weight = Matrix::new(rows, cols, get_f32s(r, rows * cols, "head weights")?)?;
        let head_bias = get_f32s(r, rows, "head bias")?;
        Self::new(layers, head_weight, head_bias)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// `W h + b`, bias broadcast over columns.
pub(crate) fn head_forward(weight: &Matrix<f32>, bias: &[f32], h: &Matrix<f32>) -> Result<Matrix<f32>> {
    let mut out = weight.matmul(h)?;
    for (r, &b) in bias.iter().enumerate() {
        for v in out.row_mut(r) {
            *v += b;
        }
    }
    Ok(out)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| L4qError::Format(format!("length {n} does not fit in u32")))
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f32s(w: &mut impl Write, values: &[f32]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => L4qError::Format(format!("truncated while reading {what}")),
        _ => L4qError::Io(e),
    })
}

fn get_u8(r: &mut impl Read, what: &str) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b, what)?;
    Ok(b[0])
}

fn get_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f32s(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n.checked_mul(4).ok_or_else(|| L4qError::Format(format!("{what} too large")))?];
    read_exact(r, &mut buf, what)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}
