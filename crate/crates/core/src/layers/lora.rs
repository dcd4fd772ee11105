use super::{
    check_dy, check_input, take_cache, Backward, Layer, LayerGrads, LayerKind, LoraAdapter, ParamKind, ParamSlot,
};
use crate::error::{shape_err, Result};
use crate::numerics::{Matrix, Real};
use crate::probe::{AllocProbe, Scratch};

/// `Y = W0 X + alpha B (A X)`.
pub fn lora_forward<T: Real>(w0: &Matrix<T>, adapter: &LoraAdapter<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    if w0.shape() != (adapter.out_dim(), adapter.in_dim()) {
        return Err(shape_err(
            "lora_forward",
            format!("W0 {}x{}", adapter.out_dim(), adapter.in_dim()),
            format!("{}x{}", w0.rows(), w0.cols()),
        ));
    }
    let ax = adapter.a().matmul(x)?;
    let mut y = w0.matmul(x)?;
    y.add_assign(&adapter.b().matmul(&ax)?.scale(adapter.alpha()))?;
    Ok(y)
}

/// `(dL/dA, dL/dB)` for the adapter path:
/// `dA = alpha (B^T dY) X^T`, `dB = alpha dY (A X)^T`.
pub fn lora_backward<T: Real>(
    adapter: &LoraAdapter<T>,
    x: &Matrix<T>,
    dy: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let ax = adapter.a().matmul(x)?;
    lora_backward_cached(adapter, x, &ax, dy).map(|(da, db, _)| (da, db))
}

/// Also returns `dL/d(AX)` so callers can finish `dL/dX`.
pub(crate) fn lora_backward_cached<T: Real>(
    adapter: &LoraAdapter<T>,
    x: &Matrix<T>,
    ax: &Matrix<T>,
    dy: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let alpha = adapter.alpha();
    let d_ax = adapter.b().transpose().matmul(dy)?.scale(alpha);
    let d_a = d_ax.matmul(&x.transpose())?;
    let d_b = dy.matmul(&ax.transpose())?.scale(alpha);
    Ok((d_a, d_b, d_ax))
}

#[derive(Debug, Clone)]
struct Cache<T: Real> {
    x: Matrix<T>,
    ax: Matrix<T>,
}

/// Frozen full-precision base plus a trainable adapter.
#[derive(Debug, Clone)]
pub struct LoraLayer<T: Real = f64> {
    w0: Matrix<T>,
    adapter: LoraAdapter<T>,
    cache: Option<Cache<T>>,
}

impl<T: Real> LoraLayer<T> {
    pub fn new(w0: Matrix<T>, adapter: LoraAdapter<T>) -> Result<Self> {
        if w0.shape() != (adapter.out_dim(), adapter.in_dim()) {
            return Err(shape_err(
                "LoraLayer::new",
                format!("{}x{}", adapter.out_dim(), adapter.in_dim()),
                format!("{}x{}", w0.rows(), w0.cols()),
            ));
        }
        Ok(Self {
            w0,
            adapter,
            cache: None,
        })
    }

    pub fn w0(&self) -> &Matrix<T> {
        &self.w0
    }

    pub fn adapter(&self) -> &LoraAdapter<T> {
        &self.adapter
    }

    pub fn adapter_mut(&mut self) -> &mut LoraAdapter<T> {
        &mut self.adapter
    }
}

impl<T: Real> Layer<T> for LoraLayer<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::Lora
    }

    fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    fn out_dim(&self) -> usize {
        self.w0.rows()
    }

    fn forward(&mut self, x: &Matrix<T>) -> Result<Matrix<T>> {
        check_input("LoraLayer::forward", self.in_dim(), x)?;
        let ax = self.adapter.a().matmul(x)?;
        let mut y = self.w0.matmul(x)?;
        y.add_assign(&self.adapter.b().matmul(&ax)?.scale(self.adapter.alpha()))?;
        self.cache = Some(Cache { x: x.clone(), ax });
        Ok(y)
    }

    fn infer(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        check_input("LoraLayer::infer", self.in_dim(), x)?;
        lora_forward(&self.w0, &self.adapter, x)
    }

    fn backward_retaining(
        &mut self,
        dy: &Matrix<T>,
        _probe: &AllocProbe,
    ) -> Result<(Backward<T>, Option<Scratch<T>>)> {
        let cache = take_cache(&mut self.cache)?;
        check_dy("LoraLayer::backward", self.out_dim(), cache.x.cols(), dy)?;
        let (d_a, d_b, d_ax) = lora_backward_cached(&self.adapter, &cache.x, &cache.ax, dy)?;
        let mut d_input = self.w0.transpose().matmul(dy)?;
        d_input.add_assign(&self.adapter.a().transpose().matmul(&d_ax)?)?;
        let grads = LayerGrads {
            d_a: Some(d_a),
            d_b: Some(d_b),
            ..Default::default()
        };
        Ok((Backward { grads, d_input }, None))
    }

    fn params_with_grads<'a>(&'a mut self, grads: &'a LayerGrads<T>) -> Vec<ParamSlot<'a, T>> {
        adapter_slots(&mut self.adapter, grads)
    }

    fn trainable_count(&self) -> usize {
        self.adapter.param_count()
    }

    fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

pub(crate) fn adapter_slots<'a, T: Real>(
    adapter: &'a mut LoraAdapter<T>,
    grads: &'a LayerGrads<T>,
) -> Vec<ParamSlot<'a, T>> {
    let mut out = Vec::with_capacity(4);
    let (a, b) = adapter.parts_mut();
    if let Some(d_a) = &grads.d_a {
        out.push(ParamSlot {
            name: "lora_a",
            kind: ParamKind::LoraA,
            values: a.as_mut_slice(),
            grads: d_a.as_slice(),
        });
    }
    if let Some(d_b) = &grads.d_b {
        out.push(ParamSlot {
            name: "lora_b",
            kind: ParamKind::LoraB,
            values: b.as_mut_slice(),
            grads: d_b.as_slice(),
        });
    }
    out
}
