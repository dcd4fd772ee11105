//! Bit-packing of signed integer codes.
//!
//! Codes are stored as `n_bits`-wide two's-complement fields in one
//! little-endian bitstream: code `k` occupies bits `k*n .. (k+1)*n`, and
//! bit `j` of the stream is bit `j % 8` of byte `j / 8`. For 4-bit codes
//! this puts the first code in the low nibble; for 3-bit codes eight codes
//! fill three bytes.

use super::{CodeMatrix, GroupParams, QuantSpec};
use crate::error::{L4qError, Result};
use crate::numerics::{Matrix, Real};

/// Bytes needed for `count` codes of width `n_bits`.
pub fn packed_len(count: usize, n_bits: u8) -> usize {
    (count * n_bits as usize).div_ceil(8)
}

fn check_width(n_bits: u8) -> Result<()> {
    if !(QuantSpec::MIN_BITS..=QuantSpec::MAX_BITS).contains(&n_bits) {
        return Err(L4qError::InvalidSpec(format!("cannot pack {n_bits}-bit codes")));
    }
    Ok(())
}

pub fn pack(codes: &[i8], n_bits: u8) -> Result<Vec<u8>> {
    check_width(n_bits)?;
    let q_n = -(1i32 << (n_bits - 1));
    let q_p = (1i32 << (n_bits - 1)) - 1;
    let mask = (1u32 << n_bits) - 1;
    let mut out = vec![0u8; packed_len(codes.len(), n_bits)];
    let mut bit = 0usize;
    for &code in codes {
        let c = code as i32;
        if c < q_n || c > q_p {
            return Err(L4qError::CodeOutOfRange { code: c, q_n, q_p });
        }
        let field = (c as u32) & mask;
        let (byte, shift) = (bit / 8, bit % 8);
        let wide = field << shift;
        out[byte] |= wide as u8;
        if shift + n_bits as usize > 8 {
            out[byte + 1] |= (wide >> 8) as u8;
        }
        bit += n_bits as usize;
    }
    Ok(out)
}

/// Reads one code at position `index`; `bytes` must be long enough.
#[inline]
pub(crate) fn read_code(bytes: &[u8], index: usize, n_bits: u8) -> i8 {
    let bit = index * n_bits as usize;
    let (byte, shift) = (bit / 8, bit % 8);
    let mut wide = bytes[byte] as u32;
    if shift + n_bits as usize > 8 {
        wide |= (bytes[byte + 1] as u32) << 8;
    }
    let field = (wide >> shift) & ((1u32 << n_bits) - 1);
    // sign-extend from n_bits
    let unused = 32 - n_bits as u32;
    (((field << unused) as i32) >> unused) as i8
}

pub fn unpack(bytes: &[u8], n_bits: u8, count: usize) -> Result<Vec<i8>> {
    check_width(n_bits)?;
    let need = packed_len(count, n_bits);
    if bytes.len() != need {
        return Err(L4qError::CorruptPacking(format!(
            "{count} {n_bits}-bit codes need {need} bytes, got {}",
            bytes.len()
        )));
    }
    Ok((0..count).map(|k| read_code(bytes, k, n_bits)).collect())
}

/// Bit-packed codes plus their group parameters; the storage and inference
/// form of a quantized weight.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedQuantTensor {
    rows: usize,
    cols: usize,
    spec: QuantSpec,
    params: GroupParams<f32>,
    bytes: Vec<u8>,
}

impl PackedQuantTensor {
    pub fn from_codes<T: Real>(codes: &CodeMatrix, params: &GroupParams<T>, spec: QuantSpec) -> Result<Self> {
        params.check_shape(codes.rows(), codes.cols())?;
        let params = params.cast::<f32>();
        params.check_scales()?;
        Ok(Self {
            rows: codes.rows(),
            cols: codes.cols(),
            spec,
            params,
            bytes: pack(codes.as_slice(), spec.n_bits())?,
        })
    }

    /// Rebuilds from raw parts, validating the packing length and code range.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        spec: QuantSpec,
        params: GroupParams<f32>,
        bytes: Vec<u8>,
    ) -> Result<Self> {
        params.check_shape(rows, cols)?;
        params.check_scales()?;
        if params.group_size() != spec.group_size() {
            return Err(L4qError::InvalidSpec("group size mismatch".into()));
        }
        // validates byte count; every n-bit field decodes into [q_n, q_p]
        unpack(&bytes, spec.n_bits(), rows * cols)?;
        Ok(Self {
            rows,
            cols,
            spec,
            params,
            bytes,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    pub fn params(&self) -> &GroupParams<f32> {
        &self.params
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn codes(&self) -> Result<CodeMatrix> {
        CodeMatrix::new(self.rows, self.cols, unpack(&self.bytes, self.spec.n_bits(), self.rows * self.cols)?)
    }

    /// Decodes row `r` into `out` (length `cols`).
    pub fn unpack_row(&self, r: usize, out: &mut [i8]) {
        let base = r * self.cols;
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = read_code(&self.bytes, base + c, self.spec.n_bits());
        }
    }

    /// Full-precision `W_q` in 32-bit.
    pub fn dequantize(&self) -> Result<Matrix<f32>> {
        super::dequantize(&self.codes()?, &self.params)
    }
}
