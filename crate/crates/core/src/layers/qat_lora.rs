use super::lora::{adapter_slots, lora_backward_cached};
use super::{
    check_dy, check_input, quant_param_grads, quant_slots, take_cache, Backward, Layer, LayerGrads, LayerKind,
    LoraAdapter, ParamSlot, QuantCache, QuantTrainables,
};
use crate::error::{shape_err, Result};
use crate::numerics::{Matrix, Real};
use crate::probe::{AllocProbe, Scratch};
use crate::quantizer::{quantize_full, GroupParams, QuantSpec};

#[derive(Debug, Clone)]
struct Cache<T: Real> {
    x: Matrix<T>,
    ax: Matrix<T>,
    quant: QuantCache<T>,
}

/// Quantize-then-add: `Y = W_q(W0) X + alpha B A X`.
///
/// The quantizer sees only the frozen base, so the adapter stays a separate
/// full-precision path and the result is a mixed-precision layer.
#[derive(Debug, Clone)]
pub struct QatLoraLayer<T: Real = f64> {
    w0: Matrix<T>,
    adapter: LoraAdapter<T>,
    params: GroupParams<T>,
    spec: QuantSpec,
    trainables: QuantTrainables,
    cache: Option<Cache<T>>,
}

impl<T: Real> QatLoraLayer<T> {
    pub fn new(w0: Matrix<T>, adapter: LoraAdapter<T>, params: GroupParams<T>, spec: QuantSpec) -> Result<Self> {
        if w0.shape() != (adapter.out_dim(), adapter.in_dim()) {
            return Err(shape_err(
                "QatLoraLayer::new",
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

    /// `W_q(W0)`; the adapter is not part of it.
    pub fn dequantized_base(&self) -> Result<Matrix<T>> {
        Ok(quantize_full(&self.w0, &self.params, &self.spec)?.dequantized)
    }
}

impl<T: Real> Layer<T> for QatLoraLayer<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::QatLora
    }

    fn in_dim(&self) -> usize {
        self.w0.cols()
    }

    fn out_dim(&self) -> usize {
        self.w0.rows()
    }

    fn forward(&mut self, x: &Matrix<T>) -> Result<Matrix<T>> {
        check_input("QatLoraLayer::forward", self.in_dim(), x)?;
        let q = quantize_full(&self.w0, &self.params, &self.spec)?;
        let ax = self.adapter.a().matmul(x)?;
        let mut y = q.dequantized.matmul(x)?;
        y.add_assign(&self.adapter.b().matmul(&ax)?.scale(self.adapter.alpha()))?;
        self.cache = Some(Cache {
            x: x.clone(),
            ax,
            quant: QuantCache {
                scaled: q.scaled,
                codes: q.codes,
                wq: q.dequantized,
            },
        });
        Ok(y)
    }

    fn infer(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        check_input("QatLoraLayer::infer", self.in_dim(), x)?;
        let mut y = self.dequantized_base()?.matmul(x)?;
        let ax = self.adapter.a().matmul(x)?;
        y.add_assign(&self.adapter.b().matmul(&ax)?.scale(self.adapter.alpha()))?;
        Ok(y)
    }

    fn backward_retaining(
        &mut self,
        dy: &Matrix<T>,
        probe: &AllocProbe,
    ) -> Result<(Backward<T>, Option<Scratch<T>>)> {
        let cache = take_cache(&mut self.cache)?;
        check_dy("QatLoraLayer::backward", self.out_dim(), cache.x.cols(), dy)?;
        let dwq = probe.track(dy.matmul(&cache.x.transpose())?);
        let (d_scale, d_bias) = quant_param_grads(&dwq, &cache.quant, &self.params, &self.spec);
        let (d_a, d_b, d_ax) = lora_backward_cached(&self.adapter, &cache.x, &cache.ax, dy)?;
        let mut d_input = cache.quant.wq.transpose().matmul(dy)?;
        d_input.add_assign(&self.adapter.a().transpose().matmul(&d_ax)?)?;
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
