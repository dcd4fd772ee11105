//! Desk-scale fine-tuning: synthetic tasks, a small stacked model, the
//! training loop and its report.

mod config;
mod loss;
mod model;
mod report;
mod task;

pub use config::{Method, Precision, TaskKind, TaskShape, TrainConfig, CONFIG_KEYS};
pub use loss::{cross_entropy, mse};
pub use model::{Hidden, ModelGrads, QuantMetrics, ScratchPolicy, ToyModel, TrainableCounts};
pub use report::{RunReport, StepRecord};
pub use task::{group_peak_ratios, make_task, Split, Targets, Task};

use crate::error::{L4qError, Result};
use crate::inference::{export, Checkpoint};
use crate::numerics::{Matrix, Real, Rng};
use crate::optim::{AdamW, LrSchedule};
use crate::probe::AllocProbe;

/// Loss of `out` against the targets of the selected columns.
fn loss_of<T: Real>(out: &Matrix<T>, targets: &Targets, cols: Option<&[usize]>) -> Result<(f64, Matrix<T>)> {
    match targets {
        Targets::Values(y) => {
            let y: Matrix<T> = match cols {
                Some(c) => y.select_cols(c).cast(),
                None => y.cast(),
            };
            mse(out, &y)
        }
        Targets::Classes(labels) => match cols {
            Some(c) => cross_entropy(out, &c.iter().map(|&i| labels[i]).collect::<Vec<_>>()),
            None => cross_entropy(out, labels),
        },
    }
}

/// Loss of the model on a whole split.
pub fn evaluate<T: Real>(model: &ToyModel<T>, split: &Split) -> Result<f64> {
    let out = model.infer(&split.x.cast())?;
    Ok(loss_of(&out, &split.targets, None)?.0)
}

/// Loss of an exported checkpoint on a whole split.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, split: &Split) -> Result<f64> {
    let out = ckpt.forward(&split.x.cast())?;
    Ok(loss_of(&out, &split.targets, None)?.0)
}

/// Epoch-wise shuffled minibatches.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Rng,
}

impl Batches {
    fn new(n: usize, batch: usize, rng: Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            batch,
            rng,
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Trains a model for `config` on `task` and returns it with the report.
pub fn train_model<T: Real>(config: &TrainConfig, task: &Task) -> Result<(ToyModel<T>, RunReport)> {
    let mut model = ToyModel::<T>::build(config, task)?;
    let init_quant = model.quant_metrics()?;
    let init_eval = evaluate(&model, &task.eval)?;
    let schedule = LrSchedule::with_warmup_frac(config.lr, config.steps, config.warmup_frac)?;
    let mut opt = AdamW::new(config.optim)?;
    let probe = AllocProbe::new();
    let train_x: Matrix<T> = task.train.x.cast();
    let mut batches = Batches::new(task.train.x.cols(), config.batch_size, Rng::new(config.seed).fork(4));

    let mut records = Vec::with_capacity(config.steps);
    let mut eval_curve = vec![(0, init_eval)];
    for step in 0..config.steps {
        let lr = schedule.lr_at(step)?;
        let idx = batches.next();
        let out = model.forward(&train_x.select_cols(&idx))?;
        let (loss, d_out) = loss_of(&out, &task.train.targets, Some(&idx))?;
        if !loss.is_finite() {
            return Err(L4qError::Diverged { step, loss });
        }
        probe.reset_peak();
        let grads = model.backward(&d_out, &probe, ScratchPolicy::Flush)?;
        let stats = probe.stats();
        model.apply(&grads, &mut opt, lr, lr * config.quant_lr_scale)?;

        let done = step + 1;
        let eval_loss = if done % config.eval_every == 0 || done == config.steps {
            let e = evaluate(&model, &task.eval)?;
            if !e.is_finite() {
                return Err(L4qError::Diverged { step, loss: e });
            }
            eval_curve.push((done, e));
            Some(e)
        } else {
            None
        };
        records.push(StepRecord {
            step,
            loss,
            lr,
            scratch_peak: stats.peak,
            scratch_peak_bytes: stats.peak_bytes,
            eval_loss,
        });
    }

    let (checkpoint, export_note) = match export(&model, false) {
        Ok(c) => (Some(c), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let report = RunReport {
        config: config.clone(),
        final_eval_loss: eval_curve.last().map_or(init_eval, |&(_, e)| e),
        init_eval_loss: init_eval,
        records,
        eval_curve,
        init_quant,
        post_quant: model.quant_metrics()?,
        degenerate_groups: model.degenerate_groups(),
        trainable: model.trainable_counts(),
        checkpoint,
        export_note,
    };
    Ok((model, report))
}

/// Builds the task from the config's seed and trains in the configured precision.
pub fn train(config: &TrainConfig) -> Result<RunReport> {
    config.validate()?;
    let task = make_task(config.task, config.shape, config.seed)?;
    match config.precision {
        Precision::F32 => train_model::<f32>(config, &task).map(|(_, r)| r),
        Precision::F64 => train_model::<f64>(config, &task).map(|(_, r)| r),
    }
}
