use super::config::{Method, TrainConfig};
use super::task::Task;
use crate::error::{L4qError, Result};
use crate::layers::{
    L4qLayer, Layer, LayerGrads, LoraAdapter, LoraLayer, LsqLayer, ParamKind, ParamSlot, QaLoraLayer, QatLoraLayer,
    QuantTrainables,
};
use crate::numerics::{Matrix, Real, Rng};
use crate::optim::AdamW;
use crate::probe::AllocProbe;
use crate::qinit::init_matrix;
use crate::quantizer::{clip_error, quant_error, GroupParams, QuantSpec};

/// One hidden layer of a [`ToyModel`].
#[derive(Debug, Clone)]
pub enum Hidden<T: Real> {
    Lora(LoraLayer<T>),
    /// LSQ-QAT and PTQ-frozen.
    Lsq(LsqLayer<T>),
    QatLora(QatLoraLayer<T>),
    L4q(L4qLayer<T>),
    /// The layer plus the base weight it was quantized from.
    QaLora(QaLoraLayer<T>, Matrix<T>),
}

impl<T: Real> Hidden<T> {
    pub fn layer(&self) -> &dyn Layer<T> {
        match self {
            Self::Lora(l) => l,
            Self::Lsq(l) => l,
            Self::QatLora(l) => l,
            Self::L4q(l) => l,
            Self::QaLora(l, _) => l,
        }
    }

    pub fn layer_mut(&mut self) -> &mut dyn Layer<T> {
        match self {
            Self::Lora(l) => l,
            Self::Lsq(l) => l,
            Self::QatLora(l) => l,
            Self::L4q(l) => l,
            Self::QaLora(l, _) => l,
        }
    }

    /// The weight the quantizer sees, with its parameters.
    pub fn quantizer_view(&self) -> Result<Option<(Matrix<T>, &GroupParams<T>, &QuantSpec)>> {
        Ok(match self {
            Self::Lora(_) => None,
            Self::Lsq(l) => Some((l.weight().clone(), l.params(), l.spec())),
            Self::QatLora(l) => Some((l.w0().clone(), l.params(), l.spec())),
            Self::L4q(l) => Some((l.combined_weight()?, l.params(), l.spec())),
            Self::QaLora(l, w0) => Some((w0.clone(), l.params(), l.spec())),
        })
    }
}

/// Summed L1 errors of every hidden layer's quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QuantMetrics {
    pub clip_error: f64,
    pub quant_error: f64,
}

/// Gradients for a whole [`ToyModel`].
#[derive(Debug, Clone)]
pub struct ModelGrads<T: Real> {
    pub layers: Vec<LayerGrads<T>>,
    pub head_weight: Matrix<T>,
    pub head_bias: Vec<T>,
}

/// What happens to each layer's weight-gradient scratch during backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScratchPolicy {
    /// Released inside each layer's backward.
    Flush,
    /// Held until the whole backward pass is done. Only useful as a
    /// negative control for the allocation probe.
    Retain,
}

/// Stack of hidden layers with `tanh` between them and an affine,
/// unquantized head:
///
/// ```text
/// h_0 = x,  h_l = tanh(layer_l(h_{l-1})),  out = W_head h_L + b_head
/// ```
#[derive(Debug, Clone)]
pub struct ToyModel<T: Real> {
    method: Method,
    hidden: Vec<Hidden<T>>,
    head_weight: Matrix<T>,
    head_bias: Vec<T>,
    acts: Vec<Matrix<T>>,
    degenerate_groups: usize,
}

/// Trainable scalar counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainableCounts {
    pub hidden: usize,
    pub head: usize,
    /// Scalars in the frozen base weights, for scale.
    pub base_weights: usize,
}

impl<T: Real> ToyModel<T> {
    /// Student for `task` in the configured method, starting from the task's
    /// base weights.
    pub fn build(config: &TrainConfig, task: &Task) -> Result<Self> {
        config.validate()?;
        if task.shape.width != config.shape.width || task.base.len() != config.shape.depth {
            return Err(L4qError::Config("task shape does not match the config".into()));
        }
        let spec = config.spec()?;
        let trainables = QuantTrainables {
            scale: true,
            bias: !config.freeze_bias,
        };
        let root = Rng::new(config.seed).fork(3);
        let mut degenerate_groups = 0;
        let mut hidden = Vec::with_capacity(task.base.len());
        for (l, w) in task.base.iter().enumerate() {
            let w0: Matrix<T> = w.cast();
            let (out_dim, in_dim) = w0.shape();
            let mut rng = root.fork(l as u64);
            let params = if config.method.is_quantized() {
                let outcome = init_matrix(&w0, config.init, &spec)?;
                degenerate_groups += outcome.degenerate_groups.len();
                Some(outcome.params)
            } else {
                None
            };
            let adapter = |rng: &mut Rng, in_dim: usize| LoraAdapter::<T>::init(rng, config.rank, in_dim, out_dim, config.alpha);
            let layer = match (config.method, params) {
                (Method::Lora, _) => Hidden::Lora(LoraLayer::new(w0, adapter(&mut rng, in_dim)?)?),
                (Method::LsqQat, Some(p)) => Hidden::Lsq(
                    LsqLayer::new(w0, p, spec)?
                        .with_trainables(trainables)
                        .with_trainable_weight(true),
                ),
                (Method::PtqFrozen, Some(p)) => {
                    Hidden::Lsq(LsqLayer::new(w0, p, spec)?.with_trainables(QuantTrainables::FROZEN))
                }
                (Method::QatLora, Some(p)) => Hidden::QatLora(
                    QatLoraLayer::new(w0, adapter(&mut rng, in_dim)?, p, spec)?.with_trainables(trainables),
                ),
                (Method::L4q, Some(p)) => {
                    Hidden::L4q(L4qLayer::new(w0, adapter(&mut rng, in_dim)?, p, spec)?.with_trainables(trainables))
                }
                (Method::QaLora, Some(p)) => {
                    let groups = p.groups_per_row();
                    Hidden::QaLora(QaLoraLayer::new(&w0, p, spec, adapter(&mut rng, groups)?)?, w0)
                }
                _ => unreachable!("quantized methods always get params"),
            };
            hidden.push(layer);
        }
        Ok(Self {
            method: config.method,
            hidden,
            head_weight: task.head_weight.cast(),
            head_bias: task.head_bias.iter().map(|&b| T::from_f64(b)).collect(),
            acts: Vec::new(),
            degenerate_groups,
        })
    }

    /// Assembles a model from parts; used by tests that need custom layers.
    pub fn from_parts(method: Method, hidden: Vec<Hidden<T>>, head_weight: Matrix<T>, head_bias: Vec<T>) -> Result<Self> {
        let mut width = None;
        for h in &hidden {
            let l = h.layer();
            if width.is_some_and(|w| w != l.in_dim()) {
                return Err(L4qError::Config("hidden layer widths do not chain".into()));
            }
            width = Some(l.out_dim());
        }
        if width.is_some_and(|w| w != head_weight.cols()) || head_bias.len() != head_weight.rows() {
            return Err(L4qError::Config("head does not match the hidden stack".into()));
        }
        Ok(Self {
            method,
            hidden,
            head_weight,
            head_bias,
            acts: Vec::new(),
            degenerate_groups: 0,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn hidden(&self) -> &[Hidden<T>] {
        &self.hidden
    }

    pub fn hidden_mut(&mut self) -> &mut [Hidden<T>] {
        &mut self.hidden
    }

    pub fn head_weight(&self) -> &Matrix<T> {
        &self.head_weight
    }

    pub fn head_bias(&self) -> &[T] {
        &self.head_bias
    }

    /// Groups whose initial scale hit the floor because all values were equal.
    pub fn degenerate_groups(&self) -> usize {
        self.degenerate_groups
    }

    fn head(&self, h: &Matrix<T>) -> Result<Matrix<T>> {
        let mut out = self.head_weight.matmul(h)?;
        for (r, &b) in self.head_bias.iter().enumerate() {
            for v in out.row_mut(r) {
                *v = *v + b;
            }
        }
        Ok(out)
    }

    /// Forward pass that caches activations for [`backward`](Self::backward).
    pub fn forward(&mut self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.acts.clear();
        let mut h = x.clone();
        for layer in &mut self.hidden {
            h = layer.layer_mut().forward(&h)?.map(|v| v.tanh());
            self.acts.push(h.clone());
        }
        let out = self.head(&h)?;
        if self.hidden.is_empty() {
            self.acts.push(h);
        }
        Ok(out)
    }

    /// Forward pass without caching.
    pub fn infer(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut h = x.clone();
        for layer in &self.hidden {
            h = layer.layer().infer(&h)?.map(|v| v.tanh());
        }
        self.head(&h)
    }

    /// Backward pass from `dL/d(out)`. Layers run last to first.
    pub fn backward(&mut self, d_out: &Matrix<T>, probe: &AllocProbe, policy: ScratchPolicy) -> Result<ModelGrads<T>> {
        if self.acts.is_empty() {
            return Err(L4qError::MissingCache);
        }
        let acts = std::mem::take(&mut self.acts);
        let last = acts.last().expect("nonempty");
        let head_weight = d_out.matmul(&last.transpose())?;
        let head_bias: Vec<T> = (0..d_out.rows())
            .map(|r| T::from_f64(d_out.row(r).iter().map(|v| v.as_f64()).sum()))
            .collect();
        let mut dh = self.head_weight.transpose().matmul(d_out)?;

        let mut held = Vec::new();
        let mut layers = vec![LayerGrads::default(); self.hidden.len()];
        for l in (0..self.hidden.len()).rev() {
            let dz = dh.zip_map(&acts[l], "tanh backward", |g, h| g * (T::one() - h * h))?;
            let layer = self.hidden[l].layer_mut();
            let back = match policy {
                ScratchPolicy::Flush => layer.backward(&dz, probe)?,
                ScratchPolicy::Retain => {
                    let (back, scratch) = layer.backward_retaining(&dz, probe)?;
                    held.push(scratch);
                    back
                }
            };
            layers[l] = back.grads;
            dh = back.d_input;
        }
        drop(held);
        Ok(ModelGrads {
            layers,
            head_weight,
            head_bias,
        })
    }

    /// One optimizer step over every trainable tensor, head included.
    pub fn apply(&mut self, grads: &ModelGrads<T>, opt: &mut AdamW, lr: f64, quant_lr: f64) -> Result<()> {
        if grads.layers.len() != self.hidden.len() {
            return Err(L4qError::Config("gradient count does not match the model".into()));
        }
        let mut slots: Vec<ParamSlot<'_, T>> = Vec::new();
        for (layer, g) in self.hidden.iter_mut().zip(&grads.layers) {
            slots.extend(layer.layer_mut().params_with_grads(g));
        }
        slots.push(ParamSlot {
            name: "head_weight",
            kind: ParamKind::HeadWeight,
            values: self.head_weight.as_mut_slice(),
            grads: grads.head_weight.as_slice(),
        });
        slots.push(ParamSlot {
            name: "head_bias",
            kind: ParamKind::HeadBias,
            values: &mut self.head_bias,
            grads: &grads.head_bias,
        });
        opt.step_split(&mut slots, lr, quant_lr)
    }

    pub fn trainable_counts(&self) -> TrainableCounts {
        TrainableCounts {
            hidden: self.hidden.iter().map(|h| h.layer().trainable_count()).sum(),
            head: self.head_weight.len() + self.head_bias.len(),
            base_weights: self.hidden.iter().map(|h| h.layer().in_dim() * h.layer().out_dim()).sum(),
        }
    }

    /// `None` for the unquantized LoRA model.
    pub fn quant_metrics(&self) -> Result<Option<QuantMetrics>> {
        let mut total = QuantMetrics::default();
        let mut any = false;
        for h in &self.hidden {
            if let Some((w, params, spec)) = h.quantizer_view()? {
                total.clip_error += clip_error(&w, params, spec)?;
                total.quant_error += quant_error(&w, params, spec)?;
                any = true;
            }
        }
        Ok(any.then_some(total))
    }

    /// Per-layer `(clip_error, quant_error)`.
    pub fn layer_quant_metrics(&self) -> Result<Vec<QuantMetrics>> {
        let mut out = Vec::new();
        for h in &self.hidden {
            if let Some((w, params, spec)) = h.quantizer_view()? {
                out.push(QuantMetrics {
                    clip_error: clip_error(&w, params, spec)?,
                    quant_error: quant_error(&w, params, spec)?,
                });
            }
        }
        Ok(out)
    }
}
