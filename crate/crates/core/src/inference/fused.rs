use rayon::prelude::*;

use crate::error::{shape_err, L4qError, Result};
use crate::layers::LoraAdapter;
use crate::numerics::Matrix;
use crate::quantizer::{packed_len, PackedQuantTensor};

const PAR_THRESHOLD: usize = 1 << 16;

/// `W_q X` straight from packed codes.
///
/// Each output row decodes one weight row into a small buffer and
/// accumulates in `f64` over the input index in ascending order, so the
/// result is bit-identical to dequantizing first and calling
/// [`Matrix::matmul`]. The full `W_q` is never materialized.
pub fn fused_forward(t: &PackedQuantTensor, x: &Matrix<f32>) -> Result<Matrix<f32>> {
    if x.rows() != t.cols() {
        return Err(shape_err(
            "fused_forward",
            format!("{} input rows", t.cols()),
            format!("{} rows", x.rows()),
        ));
    }
    let need = packed_len(t.rows() * t.cols(), t.spec().n_bits());
    if t.bytes().len() != need {
        return Err(L4qError::CorruptPacking(format!("expected {need} bytes, found {}", t.bytes().len())));
    }
    let (rows, k, n) = (t.rows(), t.cols(), x.cols());
    let params = t.params();
    let gs = params.group_size();
    let gpr = params.groups_per_row();
    let xs = x.as_slice();
    let mut out = vec![0.0f32; rows * n];
    let kernel = |(r, out_row): (usize, &mut [f32])| {
        let mut codes = vec![0i8; k];
        t.unpack_row(r, &mut codes);
        let mut acc = vec![0.0f64; n];
        for (c, &code) in codes.iter().enumerate() {
            let g = r * gpr + c / gs;
            let w = (code as f32 * params.scales()[g] + params.biases()[g]) as f64;
            for (dst, &xv) in acc.iter_mut().zip(&xs[c * n..(c + 1) * n]) {
                *dst += w * xv as f64;
            }
        }
        for (o, a) in out_row.iter_mut().zip(acc) {
            *o = a as f32;
        }
    };
    if n > 0 {
        if rows * k * n >= PAR_THRESHOLD {
            out.par_chunks_mut(n).enumerate().for_each(kernel);
        } else {
            out.chunks_mut(n).enumerate().for_each(kernel);
        }
    }
    Matrix::new(rows, n, out)
}

/// `W_q X + alpha B (A X)`: the quantized base plus a separate adapter path.
pub fn mixed_forward(base: &PackedQuantTensor, adapter: &LoraAdapter<f32>, x: &Matrix<f32>) -> Result<Matrix<f32>> {
    let mut y = fused_forward(base, x)?;
    let ax = adapter.a().matmul(x)?;
    y.add_assign(&adapter.b().matmul(&ax)?.scale(adapter.alpha()))?;
    Ok(y)
}
