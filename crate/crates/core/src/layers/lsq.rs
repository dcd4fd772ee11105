use super::{
    check_dy, check_input, quant_param_grads, quant_slots, take_cache, Backward, Layer, LayerGrads, LayerKind,
    ParamKind, ParamSlot, QuantCache, QuantTrainables,
};
use crate::error::Result;
use crate::numerics::{Matrix, Real};
use crate::probe::{AllocProbe, Scratch};
use crate::quantizer::{quantize_full, GroupParams, QuantSpec};

#[derive(Debug, Clone)]
struct Cache<T: Real> {
    x: Matrix<T>,
    quant: QuantCache<T>,
}

/// Learned-step-size QAT layer: `Y = W_q(W) X` with trainable `s`, `b`
/// and, optionally, a trainable weight.
///
/// With everything frozen this is the round-to-nearest PTQ layer.
#[derive(Debug, Clone)]
pub struct LsqLayer<T: Real = f64> {
    weight: Matrix<T>,
    params: GroupParams<T>,
    spec: QuantSpec,
    trainables: QuantTrainables,
    train_weight: bool,
    cache: Option<Cache<T>>,
}

impl<T: Real> LsqLayer<T> {
    pub fn new(weight: Matrix<T>, params: GroupParams<T>, spec: QuantSpec) -> Result<Self> {
        params.check_shape(weight.rows(), weight.cols())?;
        spec.groups_per_row(weight.cols())?;
        Ok(Self {
            weight,
            params,
            spec,
            trainables: QuantTrainables::default(),
            train_weight: false,
            cache: None,
        })
    }

    pub fn with_trainables(mut self, trainables: QuantTrainables) -> Self {
        self.trainables = trainables;
        self
    }

    /// Full QAT: the weight itself is updated through the straight-through mask.
    pub fn with_trainable_weight(mut self, on: bool) -> Self {
        self.train_weight = on;
        self
    }

    pub fn weight(&self) -> &Matrix<T> {
        &self.weight
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

    pub fn dequantized(&self) -> Result<Matrix<T>> {
        Ok(quantize_full(&self.weight, &self.params, &self.spec)?.dequantized)
    }
}

impl<T: Real> Layer<T> for LsqLayer<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::Lsq
    }

    fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn forward(&mut self, x: &Matrix<T>) -> Result<Matrix<T>> {
        check_input("LsqLayer::forward", self.in_dim(), x)?;
        let q = quantize_full(&self.weight, &self.params, &self.spec)?;
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
        check_input("LsqLayer::infer", self.in_dim(), x)?;
        self.dequantized()?.matmul(x)
    }

    fn backward_retaining(
        &mut self,
        dy: &Matrix<T>,
        probe: &AllocProbe,
    ) -> Result<(Backward<T>, Option<Scratch<T>>)> {
        let cache = take_cache(&mut self.cache)?;
        check_dy("LsqLayer::backward", self.out_dim(), cache.x.cols(), dy)?;
        let d_input = cache.quant.wq.transpose().matmul(dy)?;
        if self.trainables == QuantTrainables::FROZEN && !self.train_weight {
            return Ok((
                Backward {
                    grads: LayerGrads::default(),
                    d_input,
                },
                None,
            ));
        }
        let mut dwq = probe.track(dy.matmul(&cache.x.transpose())?);
        let (d_scale, d_bias) = quant_param_grads(&dwq, &cache.quant, &self.params, &self.spec);
        let d_weight = if self.train_weight {
            for (g, &w) in dwq.as_mut_slice().iter_mut().zip(cache.quant.scaled.as_slice()) {
                if !self.spec.in_range(w) {
                    *g = T::zero();
                }
            }
            Some(Matrix::clone(&dwq))
        } else {
            None
        };
        let grads = LayerGrads {
            d_scale,
            d_bias,
            d_weight,
            ..Default::default()
        };
        Ok((Backward { grads, d_input }, Some(dwq)))
    }

    fn params_with_grads<'a>(&'a mut self, grads: &'a LayerGrads<T>) -> Vec<ParamSlot<'a, T>> {
        let mut out = Vec::new();
        if self.train_weight {
            if let Some(dw) = &grads.d_weight {
                out.push(ParamSlot {
                    name: "weight",
                    kind: ParamKind::Weight,
                    values: self.weight.as_mut_slice(),
                    grads: dw.as_slice(),
                });
            }
        }
        quant_slots(&mut self.params, self.trainables, grads, &mut out);
        out
    }

    fn trainable_count(&self) -> usize {
        self.trainables.count(self.params.num_groups()) + if self.train_weight { self.weight.len() } else { 0 }
    }

    fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}
