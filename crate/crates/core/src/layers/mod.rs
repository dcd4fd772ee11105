//! Linear layers with closed-form forward and backward passes.
//!
//! All layers take activations as `in_dim x tokens` matrices and return
//! `out_dim x tokens`. `forward` caches what `backward` needs; `backward`
//! consumes the cache, so a second `backward` without a new `forward`
//! fails with [`L4qError::MissingCache`](crate::L4qError::MissingCache).
//!
//! Layers that train quantization parameters materialize `dL/dW_q` in a
//! [`Scratch`] buffer tracked by an [`AllocProbe`]; the buffer is dropped
//! before `backward` returns.

mod adapter;
mod l4q;
mod lora;
mod lsq;
mod qalora;
mod qat_lora;
pub mod ste;

pub use adapter::LoraAdapter;
pub use l4q::L4qLayer;
pub use lora::{lora_backward, lora_forward, LoraLayer};
pub use lsq::LsqLayer;
pub use qalora::{qalora_merge, QaLoraLayer};
pub use qat_lora::QatLoraLayer;

use crate::error::{L4qError, Result};
use crate::numerics::{Matrix, Real};
use crate::probe::{AllocProbe, Scratch};
use crate::quantizer::{CodeMatrix, GroupParams, QuantSpec};

/// Which of the layer kinds a [`Layer`] is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Lora,
    Lsq,
    QatLora,
    L4q,
    QaLora,
}

/// Role of a trainable tensor; the optimizer uses it to pick weight decay
/// and the scale floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    LoraA,
    LoraB,
    Scale,
    Bias,
    Weight,
    HeadWeight,
    HeadBias,
}

impl ParamKind {
    pub fn decays(&self) -> bool {
        matches!(self, Self::LoraA | Self::LoraB | Self::Weight | Self::HeadWeight)
    }
}

/// Gradients of one layer's parameters. Absent entries mean the layer has
/// no such parameter.
#[derive(Debug, Clone, Default)]
pub struct LayerGrads<T: Real> {
    pub d_a: Option<Matrix<T>>,
    pub d_b: Option<Matrix<T>>,
    /// Per group; empty when the layer has no quantizer.
    pub d_scale: Vec<T>,
    pub d_bias: Vec<T>,
    /// Only for QAT layers that train the weight itself.
    pub d_weight: Option<Matrix<T>>,
}

impl<T: Real> LayerGrads<T> {
    pub fn is_finite(&self) -> bool {
        let m = |x: &Option<Matrix<T>>| x.as_ref().map_or(true, Matrix::is_finite);
        m(&self.d_a)
            && m(&self.d_b)
            && m(&self.d_weight)
            && self.d_scale.iter().all(|v| v.is_finite())
            && self.d_bias.iter().all(|v| v.is_finite())
    }
}

/// Output of a layer's backward pass.
#[derive(Debug, Clone)]
pub struct Backward<T: Real> {
    pub grads: LayerGrads<T>,
    /// `dL/dX`, fed to the previous layer.
    pub d_input: Matrix<T>,
}

/// A trainable tensor paired with its gradient.
pub struct ParamSlot<'a, T> {
    pub name: &'static str,
    pub kind: ParamKind,
    pub values: &'a mut [T],
    pub grads: &'a [T],
}

/// Common interface of the quantization-wrapped linear layers.
pub trait Layer<T: Real>: Send {
    fn kind(&self) -> LayerKind;
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;

    /// Forward pass that fills the backward cache.
    fn forward(&mut self, x: &Matrix<T>) -> Result<Matrix<T>>;

    /// Forward pass without touching the cache.
    fn infer(&self, x: &Matrix<T>) -> Result<Matrix<T>>;

    /// Backward pass that hands the `dL/dW_q` scratch buffer (if any) back
    /// to the caller instead of dropping it.
    fn backward_retaining(
        &mut self,
        dy: &Matrix<T>,
        probe: &AllocProbe,
    ) -> Result<(Backward<T>, Option<Scratch<T>>)>;

    /// Backward pass; the weight-gradient scratch is released before return.
    fn backward(&mut self, dy: &Matrix<T>, probe: &AllocProbe) -> Result<Backward<T>> {
        let (out, scratch) = self.backward_retaining(dy, probe)?;
        drop(scratch);
        Ok(out)
    }

    /// Trainable tensors with their gradients, in a fixed order.
    fn params_with_grads<'a>(&'a mut self, grads: &'a LayerGrads<T>) -> Vec<ParamSlot<'a, T>>;

    /// Number of trainable scalars.
    fn trainable_count(&self) -> usize;

    fn has_cache(&self) -> bool;
}

/// Which quantization parameters a layer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantTrainables {
    pub scale: bool,
    pub bias: bool,
}

impl Default for QuantTrainables {
    fn default() -> Self {
        Self {
            scale: true,
            bias: true,
        }
    }
}

impl QuantTrainables {
    pub const FROZEN: Self = Self {
        scale: false,
        bias: false,
    };

    pub fn count(&self, groups: usize) -> usize {
        groups * (self.scale as usize + self.bias as usize)
    }
}

/// Cached quantizer evaluation from the last forward pass.
#[derive(Debug, Clone)]
pub(crate) struct QuantCache<T: Real> {
    pub scaled: Matrix<T>,
    pub codes: CodeMatrix,
    pub wq: Matrix<T>,
}

pub(crate) fn check_input<T: Real>(op: &'static str, in_dim: usize, x: &Matrix<T>) -> Result<()> {
    if x.rows() != in_dim {
        return Err(crate::error::shape_err(
            op,
            format!("{in_dim} input rows"),
            format!("{} rows", x.rows()),
        ));
    }
    Ok(())
}

pub(crate) fn check_dy<T: Real>(op: &'static str, out_dim: usize, tokens: usize, dy: &Matrix<T>) -> Result<()> {
    if dy.shape() != (out_dim, tokens) {
        return Err(crate::error::shape_err(
            op,
            format!("{out_dim}x{tokens}"),
            format!("{}x{}", dy.rows(), dy.cols()),
        ));
    }
    Ok(())
}

/// Group sums of `dWq * dWq/ds` and `dWq * dWq/db`.
pub(crate) fn quant_param_grads<T: Real>(
    dwq: &Matrix<T>,
    cache: &QuantCache<T>,
    params: &GroupParams<T>,
    spec: &QuantSpec,
) -> (Vec<T>, Vec<T>) {
    let mut ds = vec![0.0f64; params.num_groups()];
    let mut db = vec![0.0f64; params.num_groups()];
    for r in 0..dwq.rows() {
        for c in 0..dwq.cols() {
            let g = params.group_of(r, c);
            let grad = dwq.get(r, c).as_f64();
            let w = cache.scaled.get(r, c);
            ds[g] += grad * ste::dwq_ds_elem(w, cache.codes.get(r, c), spec);
            db[g] += grad * ste::dwq_db_elem(w, spec);
        }
    }
    (
        ds.into_iter().map(T::from_f64).collect(),
        db.into_iter().map(T::from_f64).collect(),
    )
}

pub(crate) fn take_cache<C>(cache: &mut Option<C>) -> Result<C> {
    cache.take().ok_or(L4qError::MissingCache)
}

pub(crate) fn quant_slots<'a, T: Real>(
    params: &'a mut GroupParams<T>,
    trainables: QuantTrainables,
    grads: &'a LayerGrads<T>,
    out: &mut Vec<ParamSlot<'a, T>>,
) {
    let (scales, biases) = params.split_mut();
    if trainables.scale {
        out.push(ParamSlot {
            name: "scale",
            kind: ParamKind::Scale,
            values: scales,
            grads: &grads.d_scale,
        });
    }
    if trainables.bias {
        out.push(ParamSlot {
            name: "bias",
            kind: ParamKind::Bias,
            values: biases,
            grads: &grads.d_bias,
        });
    }
}
