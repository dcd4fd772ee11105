//! Synthetic fine-tuning tasks.
//!
//! A random "pretrained" base network is perturbed by a low-rank change in
//! every hidden layer to give a teacher; targets are teacher outputs. A
//! student starting from the base weights has to learn the change. Some
//! base-weight input columns are scaled up into outliers so that group
//! quantization has to trade clipping against resolution, and some input
//! features are heavy-tailed.

use super::config::{TaskKind, TaskShape};
use crate::error::{L4qError, Result};
use crate::numerics::{randn, Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// `out_dim x n` regression targets.
    Values(Matrix),
    /// Class index per sample.
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Self::Values(m) => m.cols(),
            Self::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Inputs are `width x n`, one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Matrix,
    pub targets: Targets,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub kind: TaskKind,
    pub shape: TaskShape,
    /// Starting weights of the hidden layers.
    pub base: Vec<Matrix>,
    /// Weights that produced the targets.
    pub teacher: Vec<Matrix>,
    pub head_weight: Matrix,
    pub head_bias: Vec<f64>,
    /// Per hidden layer, the input columns scaled into outliers.
    pub outlier_cols: Vec<Vec<usize>>,
    pub heavy_features: Vec<usize>,
    pub train: Split,
    pub eval: Split,
}

fn pick(rng: &mut Rng, n: usize, frac: f64) -> Vec<usize> {
    let k = (frac * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let mut chosen = idx[..k.min(n)].to_vec();
    chosen.sort_unstable();
    chosen
}

fn teacher_forward(layers: &[Matrix], head_w: &Matrix, head_b: &[f64], x: &Matrix) -> Result<Matrix> {
    let mut h = x.clone();
    for w in layers {
        h = w.matmul(&h)?.map(f64::tanh);
    }
    let mut out = head_w.matmul(&h)?;
    for (r, &b) in head_b.iter().enumerate() {
        for v in out.row_mut(r) {
            *v += b;
        }
    }
    Ok(out)
}

fn inputs(rng: &mut Rng, width: usize, n: usize, heavy: &[usize]) -> Matrix {
    let mut x: Matrix = randn(rng, width, n, 1.0);
    // z^3 / sqrt(15): unit variance, kurtosis far above the Gaussian's
    let norm = 15f64.sqrt();
    for &f in heavy {
        for v in x.row_mut(f) {
            *v = v.powi(3) / norm;
        }
    }
    x
}

fn split(
    kind: TaskKind,
    rng: &mut Rng,
    n: usize,
    shape: &TaskShape,
    heavy: &[usize],
    teacher: &[Matrix],
    head_w: &Matrix,
    head_b: &[f64],
) -> Result<Split> {
    let x = inputs(rng, shape.width, n, heavy);
    let out = teacher_forward(teacher, head_w, head_b, &x)?;
    let targets = match kind {
        TaskKind::Regression => Targets::Values(out),
        TaskKind::Classification => Targets::Classes(
            (0..n)
                .map(|c| {
                    (0..out.rows())
                        .max_by(|&a, &b| out.get(a, c).total_cmp(&out.get(b, c)))
                        .unwrap_or(0)
                })
                .collect(),
        ),
    };
    Ok(Split { x, targets })
}

/// Deterministic task for `seed`.
pub fn make_task(kind: TaskKind, shape: TaskShape, seed: u64) -> Result<Task> {
    if shape.depth == 0 || shape.width == 0 || shape.out_dim == 0 || shape.teacher_rank == 0 {
        return Err(L4qError::Config("task needs positive depth, width, out_dim and teacher_rank".into()));
    }
    let root = Rng::new(seed);
    let mut wrng = root.fork(1);
    let w = shape.width;
    let std = 1.0 / (w as f64).sqrt();
    let shift = shape.teacher_shift * std / (shape.teacher_rank as f64).sqrt();

    let mut base = Vec::with_capacity(shape.depth);
    let mut teacher = Vec::with_capacity(shape.depth);
    let mut outlier_cols = Vec::with_capacity(shape.depth);
    for _ in 0..shape.depth {
        let mut w0 = randn(&mut wrng, w, w, std);
        let cols = pick(&mut wrng, w, shape.outlier_frac);
        for r in 0..w {
            for &c in &cols {
                w0.set(r, c, w0.get(r, c) * shape.outlier_gain);
            }
        }
        let u = randn(&mut wrng, w, shape.teacher_rank, 1.0);
        let v = randn(&mut wrng, shape.teacher_rank, w, shift);
        teacher.push(w0.add(&u.matmul(&v)?)?);
        base.push(w0);
        outlier_cols.push(cols);
    }
    let head_weight = randn(&mut wrng, shape.out_dim, w, std);
    let head_bias: Vec<f64> = (0..shape.out_dim).map(|_| 0.1 * wrng.normal()).collect();
    let heavy_features = pick(&mut wrng, w, shape.heavy_feature_frac);

    let mut drng = root.fork(2);
    let train = split(kind, &mut drng, shape.n_train, &shape, &heavy_features, &teacher, &head_weight, &head_bias)?;
    let eval = split(kind, &mut drng, shape.n_eval, &shape, &heavy_features, &teacher, &head_weight, &head_bias)?;
    Ok(Task {
        kind,
        shape,
        base,
        teacher,
        head_weight,
        head_bias,
        outlier_cols,
        heavy_features,
        train,
        eval,
    })
}

/// `max |w| / std(w)` (population std) for every group of `group_size`
/// consecutive elements along each row.
pub fn group_peak_ratios(w: &Matrix, group_size: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for r in 0..w.rows() {
        for g in w.row(r).chunks(group_size) {
            let n = g.len() as f64;
            let mean = g.iter().sum::<f64>() / n;
            let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let peak = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            out.push(if var > 0.0 { peak / var.sqrt() } else { 0.0 });
        }
    }
    out
}
