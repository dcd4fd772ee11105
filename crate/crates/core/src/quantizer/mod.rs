//! Uniform group-wise quantization.
//!
//! A weight `W` is mapped to integer codes by
//! `code = round(clamp((W - b) / s, q_n, q_p))` and back by
//! `W_q = code * s + b`, where `(s, b)` are shared by a run of
//! `group_size` consecutive elements along each row.

mod packing;

pub use packing::{pack, packed_len, unpack, PackedQuantTensor};

use crate::error::{shape_err, L4qError, Result};
use crate::numerics::{Matrix, Real};

/// Rounding applied after clamping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Rounding {
    /// Ties go to the even integer.
    #[default]
    HalfToEven,
}

/// Bit-width and grouping of a quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSpec {
    n_bits: u8,
    group_size: usize,
    rounding: Rounding,
}

impl QuantSpec {
    pub const MIN_BITS: u8 = 2;
    pub const MAX_BITS: u8 = 8;

    pub fn new(n_bits: u8, group_size: usize) -> Result<Self> {
        if !(Self::MIN_BITS..=Self::MAX_BITS).contains(&n_bits) {
            return Err(L4qError::InvalidSpec(format!(
                "n_bits must be in {}..={}, got {n_bits}",
                Self::MIN_BITS,
                Self::MAX_BITS
            )));
        }
        if group_size == 0 {
            return Err(L4qError::InvalidSpec("group_size must be positive".into()));
        }
        Ok(Self {
            n_bits,
            group_size,
            rounding: Rounding::HalfToEven,
        })
    }

    #[inline]
    pub fn n_bits(&self) -> u8 {
        self.n_bits
    }

    #[inline]
    pub fn group_size(&self) -> usize {
        self.group_size
    }

    #[inline]
    pub fn rounding(&self) -> Rounding {
        self.rounding
    }

    /// Lowest code, `-2^(n-1)`.
    #[inline]
    pub fn q_n(&self) -> i32 {
        -(1 << (self.n_bits - 1))
    }

    /// Highest code, `2^(n-1) - 1`.
    #[inline]
    pub fn q_p(&self) -> i32 {
        (1 << (self.n_bits - 1)) - 1
    }

    /// Number of groups per row for a matrix with `cols` columns.
    pub fn groups_per_row(&self, cols: usize) -> Result<usize> {
        if cols % self.group_size != 0 {
            return Err(L4qError::InvalidSpec(format!(
                "group_size {} does not divide input dimension {cols}",
                self.group_size
            )));
        }
        Ok(cols / self.group_size)
    }

    #[inline]
    pub fn in_range<T: Real>(&self, scaled: T) -> bool {
        let v = scaled.as_f64();
        v >= self.q_n() as f64 && v <= self.q_p() as f64
    }

    /// `round(clamp(scaled))` as an integer code.
    #[inline]
    pub fn code<T: Real>(&self, scaled: T) -> i8 {
        let lo = T::from_f64(self.q_n() as f64);
        let hi = T::from_f64(self.q_p() as f64);
        let clamped = scaled.max(lo).min(hi);
        let rounded = match self.rounding {
            Rounding::HalfToEven => clamped.round_even(),
        };
        rounded.as_f64() as i8
    }
}

/// Per-group scales and biases for one `rows x cols` weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupParams<T = f64> {
    scales: Vec<T>,
    biases: Vec<T>,
    rows: usize,
    groups_per_row: usize,
    group_size: usize,
}

impl<T: Real> GroupParams<T> {
    pub fn new(
        rows: usize,
        groups_per_row: usize,
        group_size: usize,
        scales: Vec<T>,
        biases: Vec<T>,
    ) -> Result<Self> {
        let n = rows * groups_per_row;
        if scales.len() != n || biases.len() != n {
            return Err(shape_err(
                "GroupParams::new",
                format!("{n} scales and biases"),
                format!("{} scales, {} biases", scales.len(), biases.len()),
            ));
        }
        let params = Self {
            scales,
            biases,
            rows,
            groups_per_row,
            group_size,
        };
        params.check_scales()?;
        Ok(params)
    }

    /// Same `(scale, bias)` for every group of a `rows x cols` matrix.
    pub fn uniform(rows: usize, cols: usize, spec: &QuantSpec, scale: T, bias: T) -> Result<Self> {
        let gpr = spec.groups_per_row(cols)?;
        Self::new(
            rows,
            gpr,
            spec.group_size(),
            vec![scale; rows * gpr],
            vec![bias; rows * gpr],
        )
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.groups_per_row * self.group_size
    }

    #[inline]
    pub fn groups_per_row(&self) -> usize {
        self.groups_per_row
    }

    #[inline]
    pub fn group_size(&self) -> usize {
        self.group_size
    }

    #[inline]
    pub fn num_groups(&self) -> usize {
        self.scales.len()
    }

    /// Index of the group holding element `(r, c)`.
    #[inline]
    pub fn group_of(&self, r: usize, c: usize) -> usize {
        r * self.groups_per_row + c / self.group_size
    }

    pub fn scales(&self) -> &[T] {
        &self.scales
    }

    pub fn biases(&self) -> &[T] {
        &self.biases
    }

    /// Mutable scales; callers must keep them positive (see [`Self::check_scales`]).
    pub fn scales_mut(&mut self) -> &mut [T] {
        &mut self.scales
    }

    pub fn biases_mut(&mut self) -> &mut [T] {
        &mut self.biases
    }

    /// Scales and biases, mutably and at once.
    pub fn split_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.scales, &mut self.biases)
    }

    pub fn check_scales(&self) -> Result<()> {
        match self.scales.iter().position(|&s| !(s > T::zero()) || !s.is_finite()) {
            Some(group) => Err(L4qError::NonPositiveScale {
                group,
                value: self.scales[group].as_f64(),
            }),
            None => Ok(()),
        }
    }

    pub fn check_shape(&self, rows: usize, cols: usize) -> Result<()> {
        if rows != self.rows || cols != self.cols() {
            return Err(shape_err(
                "group params",
                format!("{}x{}", self.rows, self.cols()),
                format!("{rows}x{cols}"),
            ));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> GroupParams<U> {
        GroupParams {
            scales: self.scales.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            biases: self.biases.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            rows: self.rows,
            groups_per_row: self.groups_per_row,
            group_size: self.group_size,
        }
    }

    /// Sums `values` (shaped like the weight) within each group.
    pub fn group_sums(&self, values: &Matrix<T>) -> Result<Vec<T>> {
        self.check_shape(values.rows(), values.cols())?;
        let mut out = vec![0.0f64; self.num_groups()];
        for r in 0..self.rows {
            for (c, v) in values.row(r).iter().enumerate() {
                out[self.group_of(r, c)] += v.as_f64();
            }
        }
        Ok(out.into_iter().map(T::from_f64).collect())
    }
}

/// Integer codes with the shape of the weight they came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMatrix {
    rows: usize,
    cols: usize,
    codes: Vec<i8>,
}

impl CodeMatrix {
    pub fn new(rows: usize, cols: usize, codes: Vec<i8>) -> Result<Self> {
        if codes.len() != rows * cols {
            return Err(shape_err(
                "CodeMatrix::new",
                format!("{} codes", rows * cols),
                format!("{}", codes.len()),
            ));
        }
        Ok(Self { rows, cols, codes })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.codes
    }

    pub fn get(&self, r: usize, c: usize) -> i8 {
        self.codes[r * self.cols + c]
    }

    pub fn check_range(&self, spec: &QuantSpec) -> Result<()> {
        match self
            .codes
            .iter()
            .find(|&&c| (c as i32) < spec.q_n() || (c as i32) > spec.q_p())
        {
            Some(&code) => Err(L4qError::CodeOutOfRange {
                code: code as i32,
                q_n: spec.q_n(),
                q_p: spec.q_p(),
            }),
            None => Ok(()),
        }
    }
}

/// Everything one quantizer evaluation produces.
#[derive(Debug, Clone)]
pub struct Quantized<T: Real> {
    /// `(W - b) / s` before clamping and rounding.
    pub scaled: Matrix<T>,
    pub codes: CodeMatrix,
    /// `code * s + b`.
    pub dequantized: Matrix<T>,
}

fn check_inputs<T: Real>(w: &Matrix<T>, params: &GroupParams<T>, spec: &QuantSpec) -> Result<()> {
    params.check_shape(w.rows(), w.cols())?;
    if params.group_size() != spec.group_size() {
        return Err(L4qError::InvalidSpec(format!(
            "params use group size {}, spec {}",
            params.group_size(),
            spec.group_size()
        )));
    }
    params.check_scales()
}

/// `(W - b) / s` per element.
pub fn scaled_values<T: Real>(w: &Matrix<T>, params: &GroupParams<T>) -> Result<Matrix<T>> {
    params.check_shape(w.rows(), w.cols())?;
    params.check_scales()?;
    Ok(Matrix::from_fn(w.rows(), w.cols(), |r, c| {
        let g = params.group_of(r, c);
        (w.get(r, c) - params.biases[g]) / params.scales[g]
    }))
}

/// Integer codes of `w`.
pub fn quantize<T: Real>(w: &Matrix<T>, params: &GroupParams<T>, spec: &QuantSpec) -> Result<CodeMatrix> {
    Ok(quantize_full(w, params, spec)?.codes)
}

/// Codes plus the intermediate and dequantized values.
pub fn quantize_full<T: Real>(
    w: &Matrix<T>,
    params: &GroupParams<T>,
    spec: &QuantSpec,
) -> Result<Quantized<T>> {
    check_inputs(w, params, spec)?;
    let scaled = scaled_values(w, params)?;
    let codes: Vec<i8> = scaled.as_slice().iter().map(|&v| spec.code(v)).collect();
    let codes = CodeMatrix::new(w.rows(), w.cols(), codes)?;
    let dequantized = dequantize(&codes, params)?;
    Ok(Quantized {
        scaled,
        codes,
        dequantized,
    })
}

/// `code * s + b` per element.
pub fn dequantize<T: Real>(codes: &CodeMatrix, params: &GroupParams<T>) -> Result<Matrix<T>> {
    params.check_shape(codes.rows(), codes.cols())?;
    Ok(Matrix::from_fn(codes.rows(), codes.cols(), |r, c| {
        let g = params.group_of(r, c);
        T::from_f64(codes.get(r, c) as f64) * params.scales[g] + params.biases[g]
    }))
}

/// `sum |W - W_q|`.
pub fn quant_error<T: Real>(w: &Matrix<T>, params: &GroupParams<T>, spec: &QuantSpec) -> Result<f64> {
    let q = quantize_full(w, params, spec)?;
    Ok(w
        .as_slice()
        .iter()
        .zip(q.dequantized.as_slice())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .sum())
}

/// `sum |W - W_q|` restricted to elements whose scaled value falls
/// outside `[q_n, q_p]`.
pub fn clip_error<T: Real>(w: &Matrix<T>, params: &GroupParams<T>, spec: &QuantSpec) -> Result<f64> {
    let q = quantize_full(w, params, spec)?;
    Ok(w
        .as_slice()
        .iter()
        .zip(q.dequantized.as_slice())
        .zip(q.scaled.as_slice())
        .filter(|(_, &scaled)| !spec.in_range(scaled))
        .map(|((a, b), _)| (a.as_f64() - b.as_f64()).abs())
        .sum())
}
