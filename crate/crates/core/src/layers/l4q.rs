use super::lora::adapter_slots;
use super::{
    check_dy, check_input, quant_param_grads, quant_slots, take_cache, Backward, Layer, LayerGrads, LayerKind,
    LoraAdapter, ParamSlot, QuantCache, QuantTrainables,
};
use crate::error::{shape_err, Result};
use crate::numerics::{Matrix, Real};
use crate::probe::{AllocProbe, Scratch};
use crate::quantizer::{quantize_full, CodeMatrix, GroupParams, QuantSpec, Quantized};

#[derive(Debug, Clone)]
struct Cache<T: Real> {
    x: Matrix<T>,
    quant: QuantCache<T>,
}

/// Add-then-quantize layer.
///
/// Forward:
///
/// ```text
/// W_comb = W0 + alpha B A
/// code   = round(clamp((W_comb - b) / s, q_n, q_p))
/// W_q    = code * s + b
/// Y      = W_q X
/// ```
///
/// Backward reuses one `dL/dW_q = dY X^T` buffer for everything: the
/// quantizer gradients are group sums over it, it is then gated in place by
/// the range mask `M`, and the adapter gradients are
/// `dA = alpha B^T (dW_q . M)` and `dB = alpha (dW_q . M) A^T`.
#[derive(Debug, Clone)]
pub struct L4qLayer<T: Real = f64> {
    w0: Matrix<T>,
    adapter: LoraAdapter<T>,
    params: GroupParams<T>,
    spec: QuantSpec,
    trainables: QuantTrainables,
    cache: Option<Cache<T>>,
}

impl<T: Real> L4qLayer<T> {
    pub fn new(w0: Matrix<T>, adapter: LoraAdapter<T>, params: GroupParams<T>, spec: QuantSpec) -> Result<Self> {
        if w0.shape() != (adapter.out_dim(), adapter.in_dim()) {
            return Err(shape_err(
                "L4qLayer::new",
                format!("{}x{}", adapter.out_dim(), adapter.in_dim()),
                format!("{}x{}", w0.rows(), w0.cols()),
            ));
        }
        params.check_shape(w0.rows(), w0.cols())?;
        Ok(Self {
            w0,
            adapter,
            params,
            spec,
            trainables: QuantTrainables::default(),
            cache: None,
        })
    }

    pub fn with_trainables(mut self, trainables: QuantTrainables) -> Self {
        self.trainables = trainables;
        self
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

    pub fn params(&self) -> &GroupParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut GroupParams<T> {
        &mut self.params
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    /// `W0 + alpha B A`.
    pub fn combined_weight(&self) -> Result<Matrix<T>> {
        self.w0.add(&self.adapter.delta()?)
    }

    /// Quantizer evaluation of the combined weight.
    pub fn quantized(&self) -> Result<Quantized<T>> {
        quantize_full(&self.combined_weight()?, &self.params, &self.spec)
    }

    /// Integer codes for export.
    pub fn codes(&self) -> Result<CodeMatrix> {
        Ok(self.quantized()?.codes)
    }
}

impl<T: Real> Layer<T> for L4qLayer<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::L4q
    }

    fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    fn out_dim(&self) -> usize {
        self.w0.rows()
    }

    fn forward(&mut self, x: &Matrix<T>) -> Result<Matrix<T>> {
        check_input("L4qLayer::forward", self.in_dim(), x)?;
        let q = self.quantized()?;
        let y = q.dequantized.matmul(x)?;
        self.cache = Some(Cache {
            x: x.clone(),
            quant: QuantCache {
                scaled: q.scaled,
                codes: q.codes,
                wq: q.dequantized,
            },
        });
        Ok(y)
    }

    fn infer(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        check_input("L4qLayer::infer", self.in_dim(), x)?;
        self.quantized()?.dequantized.matmul(x)
    }

    fn backward_retaining(
        &mut self,
        dy: &Matrix<T>,
        probe: &AllocProbe,
    ) -> Result<(Backward<T>, Option<Scratch<T>>)> {
        let cache = take_cache(&mut self.cache)?;
        check_dy("L4qLayer::backward", self.out_dim(), cache.x.cols(), dy)?;
        let mut dwq = probe.track(dy.matmul(&cache.x.transpose())?);
        let (d_scale, d_bias) = quant_param_grads(&dwq, &cache.quant, &self.params, &self.spec);

        // gate in place: clipped elements pass no gradient to A or B
        for (g, &w) in dwq.as_mut_slice().iter_mut().zip(cache.quant.scaled.as_slice()) {
            if !self.spec.in_range(w) {
                *g = T::zero();
            }
        }
        let alpha = self.adapter.alpha();
        let d_a = self.adapter.b().transpose().matmul(&dwq)?.scale(alpha);
        let d_b = dwq.matmul(&self.adapter.a().transpose())?.scale(alpha);
        let d_input = cache.quant.wq.transpose().matmul(dy)?;

        let grads = LayerGrads {
            d_a: Some(d_a),
            d_b: Some(d_b),
            d_scale,
            d_bias,
            d_weight: None,
        };
        Ok((Backward { grads, d_input }, Some(dwq)))
    }

    fn params_with_grads<'a>(&'a mut self, grads: &'a LayerGrads<T>) -> Vec<ParamSlot<'a, T>> {
        let mut out = adapter_slots(&mut self.adapter, grads);
        quant_slots(&mut self.params, self.trainables, grads, &mut out);
        out
    }

    fn trainable_count(&self) -> usize {
        self.adapter.param_count() + self.trainables.count(self.params.num_groups())
    }

    fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}
