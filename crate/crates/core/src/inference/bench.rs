use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use super::checkpoint::{head_forward, Checkpoint, CheckpointLayer};
use super::cost::{flops, CostModel, ExecPath, LayerDims};
use super::fused::{fused_forward, mixed_forward};
use crate::error::{L4qError, Result};
use crate::layers::LoraAdapter;
use crate::numerics::{randn, Matrix, Rng};

pub const DEFAULT_BATCHES: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub batch_sizes: Vec<usize>,
    /// Timed repetitions per (path, batch); one untimed warmup precedes them.
    pub reps: usize,
    /// Adapter rank for the mixed path when the checkpoint has no adapters.
    pub rank: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_sizes: DEFAULT_BATCHES.to_vec(),
            reps: 7,
            rank: 4,
            seed: 0,
        }
    }
}

/// Wall times in seconds per forward pass.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub path: &'static str,
    pub batch: usize,
    pub tokens_per_sec: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    #[serde(skip)]
    pub cost: CostModel,
}

struct Runner {
    fused: Vec<CheckpointLayer>,
    mixed: Vec<CheckpointLayer>,
}

impl Runner {
    fn new(ckpt: &Checkpoint, rank: usize, rng: &mut Rng) -> Result<Self> {
        let fused = ckpt
            .layers
            .iter()
            .map(|l| CheckpointLayer::Quantized(l.base().clone()))
            .collect();
        let mut mixed = Vec::with_capacity(ckpt.layers.len());
        for l in &ckpt.layers {
            mixed.push(match l {
                CheckpointLayer::Mixed { .. } => l.clone(),
                CheckpointLayer::Quantized(t) => {
                    let adapter = LoraAdapter::new(
                        randn(rng, rank, t.cols(), 0.02),
                        randn(rng, t.rows(), rank, 0.02),
                        1.0f32,
                    )?;
                    CheckpointLayer::Mixed {
                        base: t.clone(),
                        adapter,
                    }
                }
            });
        }
        Ok(Self { fused, mixed })
    }

    fn run(&self, path: ExecPath, ckpt: &Checkpoint, x: &Matrix<f32>) -> Result<Matrix<f32>> {
        let layers = match path {
            ExecPath::FullyQuantized => &self.fused,
            ExecPath::Mixed => &self.mixed,
        };
        let mut h = x.clone();
        for layer in layers {
            h = match layer {
                CheckpointLayer::Quantized(t) => fused_forward(t, &h)?,
                CheckpointLayer::Mixed { base, adapter } => mixed_forward(base, adapter, &h)?,
            }
            .map(f32::tanh);
        }
        head_forward(&ckpt.head_weight, &ckpt.head_bias, &h)
    }

    fn cost(&self, path: ExecPath, tokens: usize) -> CostModel {
        let layers = match path {
            ExecPath::FullyQuantized => &self.fused,
            ExecPath::Mixed => &self.mixed,
        };
        layers
            .iter()
            .map(|l| {
                let t = l.base();
                let rank = match l {
                    CheckpointLayer::Mixed { adapter, .. } => adapter.rank(),
                    CheckpointLayer::Quantized(_) => 0,
                };
                let dims = LayerDims {
                    in_dim: t.cols(),
                    out_dim: t.rows(),
                    tokens,
                };
                flops(path, dims, rank, t.spec())
            })
            .sum()
    }
}

/// Times the fully-quantized and mixed forward paths at each batch size.
///
/// Paths run one after the other, never concurrently.
pub fn bench(ckpt: &Checkpoint, config: &BenchConfig) -> Result<Vec<BenchRow>> {
    if config.reps == 0 || config.rank == 0 {
        return Err(L4qError::Config("bench needs reps >= 1 and rank >= 1".into()));
    }
    let mut rng = Rng::new(config.seed);
    let runner = Runner::new(ckpt, config.rank, &mut rng)?;
    let mut rows = Vec::new();
    for &batch in &config.batch_sizes {
        if batch == 0 {
            return Err(L4qError::Config("batch sizes must be positive".into()));
        }
        let x: Matrix<f32> = randn(&mut rng, ckpt.in_dim(), batch, 1.0);
        for path in [ExecPath::FullyQuantized, ExecPath::Mixed] {
            runner.run(path, ckpt, &x)?;
            let mut times = Vec::with_capacity(config.reps);
            for _ in 0..config.reps {
                let start = Instant::now();
                let y = runner.run(path, ckpt, &x)?;
                times.push(start.elapsed().as_secs_f64());
                std::hint::black_box(y);
            }
            times.sort_by(f64::total_cmp);
            let median = times[times.len() / 2];
            rows.push(BenchRow {
                path: path.name(),
                batch,
                tokens_per_sec: batch as f64 / median.max(1e-12),
                min: times[0],
                median,
                max: times[times.len() - 1],
                cost: runner.cost(path, batch),
            });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(rows: &[BenchRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
