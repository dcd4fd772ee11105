use crate::error::{shape_err, L4qError, Result};
use crate::numerics::{randn, Matrix, Real, Rng};

/// Standard deviation of the `A` initialization.
pub const LORA_A_INIT_STD: f64 = 0.02;

/// Low-rank adapter `alpha * B * A` with `A: rank x in`, `B: out x rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T: Real = f64> {
    a: Matrix<T>,
    b: Matrix<T>,
    alpha: T,
}

impl<T: Real> LoraAdapter<T> {
    pub fn new(a: Matrix<T>, b: Matrix<T>, alpha: T) -> Result<Self> {
        if a.rows() == 0 {
            return Err(L4qError::Config("LoRA rank must be at least 1".into()));
        }
        if b.cols() != a.rows() {
            return Err(shape_err(
                "LoraAdapter::new",
                format!("B with {} columns", a.rows()),
                format!("{}x{}", b.rows(), b.cols()),
            ));
        }
        Ok(Self { a, b, alpha })
    }

    /// `A ~ N(0, 0.02^2)`, `B = 0`, so the adapter starts as an exact zero.
    pub fn init(rng: &mut Rng, rank: usize, in_dim: usize, out_dim: usize, alpha: f64) -> Result<Self> {
        Self::new(
            randn(rng, rank, in_dim, LORA_A_INIT_STD),
            Matrix::zeros(out_dim, rank),
            T::from_f64(alpha),
        )
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn b(&self) -> &Matrix<T> {
        &self.b
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn set_alpha(&mut self, alpha: T) {
        self.alpha = alpha;
    }

    pub fn a_mut(&mut self) -> &mut Matrix<T> {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Matrix<T> {
        &mut self.b
    }

    pub fn parts_mut(&mut self) -> (&mut Matrix<T>, &mut Matrix<T>) {
        (&mut self.a, &mut self.b)
    }

    /// `alpha * B * A`.
    pub fn delta(&self) -> Result<Matrix<T>> {
        Ok(self.b.matmul(&self.a)?.scale(self.alpha))
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn cast<U: Real>(&self) -> LoraAdapter<U> {
        LoraAdapter {
            a: self.a.cast(),
            b: self.b.cast(),
            alpha: U::from_f64(self.alpha.as_f64()),
        }
    }
}
