use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use super::config::TrainConfig;
use super::model::{QuantMetrics, TrainableCounts};
use crate::error::Result;
use crate::inference::Checkpoint;

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    /// Minibatch loss before the update.
    pub loss: f64,
    pub lr: f64,
    /// Most weight-gradient scratch buffers alive at once during backward.
    pub scratch_peak: usize,
    pub scratch_peak_bytes: usize,
    /// Held-out loss after the update, on evaluation steps.
    pub eval_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: TrainConfig,
    pub records: Vec<StepRecord>,
    /// `(steps done, held-out loss)`, starting with `(0, initial loss)`.
    pub eval_curve: Vec<(usize, f64)>,
    pub init_eval_loss: f64,
    pub final_eval_loss: f64,
    /// `None` for methods without a quantizer.
    pub init_quant: Option<QuantMetrics>,
    pub post_quant: Option<QuantMetrics>,
    pub degenerate_groups: usize,
    pub trainable: TrainableCounts,
    /// Exported final model; `None` when the method cannot be exported.
    pub checkpoint: Option<Checkpoint>,
    pub export_note: Option<String>,
}

impl RunReport {
    /// Largest per-step scratch peak over the run.
    pub fn peak_scratch(&self) -> usize {
        self.records.iter().map(|r| r.scratch_peak).max().unwrap_or(0)
    }

    pub fn peak_scratch_bytes(&self) -> usize {
        self.records.iter().map(|r| r.scratch_peak_bytes).max().unwrap_or(0)
    }

    /// First evaluated step count at which the held-out loss is at or below `target`.
    pub fn steps_to_reach(&self, target: f64) -> Option<usize> {
        self.eval_curve.iter().find(|&&(_, l)| l <= target).map(|&(s, _)| s)
    }

    pub fn write_steps_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.records.is_empty() {
            w.write_record(["step", "loss", "lr", "scratch_peak", "scratch_peak_bytes", "eval_loss"])?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let quant = |q: Option<QuantMetrics>| match q {
            Some(q) => format!("clip_error={:.6e} quant_error={:.6e}", q.clip_error, q.quant_error),
            None => "n/a".to_string(),
        };
        let _ = writeln!(s, "method: {}", c.method);
        let _ = writeln!(s, "task: {}", c.task.name());
        let _ = writeln!(s, "precision: {}", c.precision.name());
        let _ = writeln!(s, "bits: {} group_size: {} rank: {} alpha: {}", c.n_bits, c.group_size, c.rank, c.alpha);
        let _ = writeln!(s, "init: {}", c.init);
        let _ = writeln!(s, "steps: {} batch_size: {} lr: {} seed: {}", c.steps, c.batch_size, c.lr, c.seed);
        let _ = writeln!(s, "init_eval_loss: {:.9e}", self.init_eval_loss);
        let _ = writeln!(s, "final_eval_loss: {:.9e}", self.final_eval_loss);
        let _ = writeln!(s, "init_quant: {}", quant(self.init_quant));
        let _ = writeln!(s, "post_quant: {}", quant(self.post_quant));
        let _ = writeln!(s, "degenerate_groups: {}", self.degenerate_groups);
        let _ = writeln!(
            s,
            "trainable: hidden={} head={} base_weights={}",
            self.trainable.hidden, self.trainable.head, self.trainable.base_weights
        );
        let _ = writeln!(
            s,
            "peak_scratch: {} buffers, {} bytes",
            self.peak_scratch(),
            self.peak_scratch_bytes()
        );
        match (&self.checkpoint, &self.export_note) {
            (Some(ck), _) => {
                let form = if ck.is_fully_quantized() { "fully quantized" } else { "mixed precision" };
                let _ = writeln!(s, "checkpoint: {form}");
            }
            (None, Some(note)) => {
                let _ = writeln!(s, "checkpoint: none ({note})");
            }
            (None, None) => {
                let _ = writeln!(s, "checkpoint: none");
            }
        }
        s
    }
}
