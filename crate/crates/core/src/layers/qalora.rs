use super::lora::adapter_slots;
use super::{check_dy, check_input, take_cache, Backward, Layer, LayerGrads, LayerKind, LoraAdapter, ParamSlot};
use crate::error::{shape_err, Result};
use crate::numerics::{Matrix, Real};
use crate::probe::{AllocProbe, Scratch};
use crate::quantizer::{dequantize, quantize, CodeMatrix, GroupParams, QuantSpec};

/// Folds a group-constrained adapter into the quantization biases:
/// `b'[o, g] = b[o, g] - alpha (B A)[o, g]`. Scales are unchanged.
pub fn qalora_merge<T: Real>(adapter: &LoraAdapter<T>, params: &GroupParams<T>) -> Result<GroupParams<T>> {
    if adapter.in_dim() != params.groups_per_row() || adapter.out_dim() != params.rows() {
        return Err(shape_err(
            "qalora_merge",
            format!("adapter {}x{} (rows x groups)", params.rows(), params.groups_per_row()),
            format!("{}x{}", adapter.out_dim(), adapter.in_dim()),
        ));
    }
    let delta = adapter.delta()?;
    let mut merged = params.clone();
    for (b, d) in merged.biases_mut().iter_mut().zip(delta.as_slice()) {
        *b = *b - *d;
    }
    Ok(merged)
}

/// Sums each run of `group_size` input rows: `G x tokens`.
fn pool<T: Real>(x: &Matrix<T>, group_size: usize) -> Matrix<T> {
    let groups = x.rows() / group_size;
    let mut out = vec![0.0f64; groups * x.cols()];
    for r in 0..x.rows() {
        let g = r / group_size;
        for (t, v) in x.row(r).iter().enumerate() {
            out[g * x.cols() + t] += v.as_f64();
        }
    }
    Matrix::new(groups, x.cols(), out.into_iter().map(T::from_f64).collect()).expect("pool shape")
}

/// Adjoint of [`pool`]: broadcasts each group row back over its members.
fn unpool<T: Real>(pooled: &Matrix<T>, group_size: usize) -> Matrix<T> {
    Matrix::from_fn(pooled.rows() * group_size, pooled.cols(), |r, t| pooled.get(r / group_size, t))
}

#[derive(Debug, Clone)]
struct Cache<T: Real> {
    pooled: Matrix<T>,
    apx: Matrix<T>,
    tokens: usize,
}

/// Frozen quantized base plus a group-constrained adapter acting on
/// group-summed inputs:
///
/// ```text
/// Y = W_q X - alpha B A P X,   P: G x in sums each quantization group
/// ```
///
/// Every element of group `g` in row `o` sees the same adapter term
/// `-alpha (B A)[o, g]`, so after training the adapter folds exactly into
/// the biases via [`qalora_merge`].
#[derive(Debug, Clone)]
pub struct QaLoraLayer<T: Real = f64> {
    codes: CodeMatrix,
    params: GroupParams<T>,
    spec: QuantSpec,
    wq: Matrix<T>,
    adapter: LoraAdapter<T>,
    cache: Option<Cache<T>>,
}

impl<T: Real> QaLoraLayer<T> {
    /// Quantizes `w0` once with `params`; only the adapter trains afterwards.
    pub fn new(w0: &Matrix<T>, params: GroupParams<T>, spec: QuantSpec, adapter: LoraAdapter<T>) -> Result<Self> {
        let codes = quantize(w0, &params, &spec)?;
        if adapter.in_dim() != params.groups_per_row() || adapter.out_dim() != params.rows() {
            return Err(shape_err(
                "QaLoraLayer::new",
                format!("adapter {}x{}", params.rows(), params.groups_per_row()),
                format!("{}x{}", adapter.out_dim(), adapter.in_dim()),
            ));
        }
        let wq = dequantize(&codes, &params)?;
        Ok(Self {
            codes,
            params,
            spec,
            wq,
            adapter,
            cache: None,
        })
    }

    pub fn adapter(&self) -> &LoraAdapter<T> {
        &self.adapter
    }

    pub fn adapter_mut(&mut self) -> &mut LoraAdapter<T> {
        &mut self.adapter
    }

    pub fn params(&self) -> &GroupParams<T> {
        &self.params
    }

    pub fn codes(&self) -> &CodeMatrix {
        &self.codes
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    /// Biases with the adapter folded in.
    pub fn merged_params(&self) -> Result<GroupParams<T>> {
        qalora_merge(&self.adapter, &self.params)
    }

    fn adapter_term(&self, x: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
        let pooled = pool(x, self.spec.group_size());
        let apx = self.adapter.a().matmul(&pooled)?;
        let term = self.adapter.b().matmul(&apx)?.scale(-self.adapter.alpha());
        Ok((pooled, apx, term))
    }
}

impl<T: Real> Layer<T> for QaLoraLayer<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::QaLora
    }

    fn in_dim(&self) -> usize {
        self.wq.cols()
    }

    fn out_dim(&self) -> usize {
        self.wq.rows()
    }

    fn forward(&mut self, x: &Matrix<T>) -> Result<Matrix<T>> {
        check_input("QaLoraLayer::forward", self.in_dim(), x)?;
        let (pooled, apx, term) = self.adapter_term(x)?;
        let mut y = self.wq.matmul(x)?;
        y.add_assign(&term)?;
        self.cache = Some(Cache {
            pooled,
            apx,
            tokens: x.cols(),
        });
        Ok(y)
    }

    fn infer(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        check_input("QaLoraLayer::infer", self.in_dim(), x)?;
        let (_, _, term) = self.adapter_term(x)?;
        let mut y = self.wq.matmul(x)?;
        y.add_assign(&term)?;
        Ok(y)
    }

    fn backward_retaining(
        &mut self,
        dy: &Matrix<T>,
        _probe: &AllocProbe,
    ) -> Result<(Backward<T>, Option<Scratch<T>>)> {
        let cache = take_cache(&mut self.cache)?;
        check_dy("QaLoraLayer::backward", self.out_dim(), cache.tokens, dy)?;
        let neg_alpha = -self.adapter.alpha();
        let d_apx = self.adapter.b().transpose().matmul(dy)?.scale(neg_alpha);
        let d_a = d_apx.matmul(&cache.pooled.transpose())?;
        let d_b = dy.matmul(&cache.apx.transpose())?.scale(neg_alpha);
        let d_pooled = self.adapter.a().transpose().matmul(&d_apx)?;
        let mut d_input = self.wq.transpose().matmul(dy)?;
        d_input.add_assign(&unpool(&d_pooled, self.spec.group_size()))?;
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
