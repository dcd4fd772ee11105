use super::checkpoint::{Checkpoint, CheckpointLayer};
use crate::error::{L4qError, Result};
use crate::numerics::Real;
use crate::quantizer::{quantize, PackedQuantTensor};
use crate::trainer::{Hidden, ToyModel};

/// Materializes integer codes, scales and biases for every hidden layer.
///
/// * L4Q quantizes `W0 + alpha B A` with the learned parameters.
/// * QA-LoRA folds its adapter into the biases first.
/// * LSQ-QAT and PTQ-frozen quantize their weight as is.
/// * QAT-LoRA keeps its adapter as a separate 32-bit path, so it is
///   refused when `fully_quantized` is set and exported in mixed form
///   otherwise.
/// * Plain LoRA has no quantized base and is always refused.
pub fn export<T: Real>(model: &ToyModel<T>, fully_quantized: bool) -> Result<Checkpoint> {
    let method = model.method().name().to_string();
    let mut layers = Vec::with_capacity(model.hidden().len());
    for h in model.hidden() {
        let layer = match h {
            Hidden::L4q(l) => CheckpointLayer::Quantized(PackedQuantTensor::from_codes(&l.codes()?, l.params(), *l.spec())?),
            Hidden::Lsq(l) => {
                let codes = quantize(l.weight(), l.params(), l.spec())?;
                CheckpointLayer::Quantized(PackedQuantTensor::from_codes(&codes, l.params(), *l.spec())?)
            }
            Hidden::QaLora(l, _) => {
                CheckpointLayer::Quantized(PackedQuantTensor::from_codes(l.codes(), &l.merged_params()?, *l.spec())?)
            }
            Hidden::QatLora(l) => {
                if fully_quantized {
                    return Err(L4qError::MixedPrecisionExport { method });
                }
                let codes = quantize(l.w0(), l.params(), l.spec())?;
                CheckpointLayer::Mixed {
                    base: PackedQuantTensor::from_codes(&codes, l.params(), *l.spec())?,
                    adapter: l.adapter().cast(),
                }
            }
            Hidden::Lora(_) => {
                return Err(L4qError::Unexportable {
                    method,
                    reason: "the base weight is not quantized".into(),
                })
            }
        };
        layers.push(layer);
    }
    Checkpoint::new(
        layers,
        model.head_weight().cast(),
        model.head_bias().iter().map(|v| v.as_f64() as f32).collect(),
    )
}
