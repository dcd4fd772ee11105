//! Exported checkpoints, the packed-weight forward path, cost accounting
//! and a wall-clock benchmark.

mod bench;
mod checkpoint;
mod cost;
mod export;
mod fused;

pub use bench::{bench, write_bench_csv, BenchConfig, BenchRow, DEFAULT_BATCHES};
pub use checkpoint::{Checkpoint, CheckpointLayer, MAGIC, VERSION};
pub use cost::{flops, CostModel, ExecPath, LayerDims};
pub use export::export;
pub use fused::{fused_forward, mixed_forward};
