//! Initial quantization parameters from a weight matrix.
//!
//! Four schemes, each evaluated independently per quantization group:
//!
//! | scheme  | scale                                   | bias                |
//! |---------|-----------------------------------------|---------------------|
//! | `LsqPlus` | `max(|mu - 3 sigma|, |mu + 3 sigma|) / 2^(n-1)` | 0             |
//! | `Symm`  | `max|W| / 2^(n-1)`                      | 0                   |
//! | `Asymm` | `(max - min) / (q_p - q_n)`             | `max - s * q_p`     |
//! | `L4q`   | `max(|min / q_n|, |max / q_p|)`         | 0                   |
//!
//! `sigma` is the population standard deviation of the group. `Asymm` and
//! `L4q` cover the whole group, so nothing is clipped at initialization;
//! when floating-point rounding would push an extreme element a hair
//! outside `[q_n, q_p]`, the scale is widened by a few ulps.

use std::fmt;
use std::str::FromStr;

use crate::error::{L4qError, Result};
use crate::numerics::{Matrix, Real};
use crate::quantizer::{GroupParams, QuantSpec};

/// Scale used for groups where the scheme would give zero.
pub const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InitScheme {
    LsqPlus,
    Symm,
    Asymm,
    L4q,
}

impl InitScheme {
    pub const ALL: [InitScheme; 4] = [Self::LsqPlus, Self::Symm, Self::Asymm, Self::L4q];

    pub fn name(&self) -> &'static str {
        match self {
            Self::LsqPlus => "lsq+",
            Self::Symm => "symm",
            Self::Asymm => "asymm",
            Self::L4q => "l4q",
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitScheme {
    type Err = L4qError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lsq+" | "lsqplus" | "lsq_plus" => Ok(Self::LsqPlus),
            "symm" | "symmetric" => Ok(Self::Symm),
            "asymm" | "asymmetric" => Ok(Self::Asymm),
            "l4q" => Ok(Self::L4q),
            other => Err(L4qError::Config(format!("unknown init scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupInit<T> {
    pub scale: T,
    pub bias: T,
    /// The formula gave a nonpositive scale and [`SCALE_FLOOR`] was used.
    pub degenerate: bool,
}

fn fits<T: Real>(values: &[T], scale: T, bias: T, spec: &QuantSpec) -> bool {
    values.iter().all(|&v| spec.in_range((v - bias) / scale))
}

/// Parameters for one group of weights.
pub fn init_group<T: Real>(values: &[T], scheme: InitScheme, spec: &QuantSpec) -> Result<GroupInit<T>> {
    if values.is_empty() {
        return Err(L4qError::InvalidSpec("cannot initialize an empty group".into()));
    }
    let q_n = spec.q_n() as f64;
    let q_p = spec.q_p() as f64;
    let half_range = (1u32 << (spec.n_bits() - 1)) as f64;
    let vals: Vec<f64> = values.iter().map(|v| v.as_f64()).collect();
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let (mut scale, bias_rule): (f64, fn(f64, f64, f64) -> f64) = match scheme {
        InitScheme::LsqPlus => {
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            let s = (mean - 3.0 * sd).abs().max((mean + 3.0 * sd).abs()) / half_range;
            (s, |_, _, _| 0.0)
        }
        InitScheme::Symm => {
            let s = min.abs().max(max.abs()) / half_range;
            (s, |_, _, _| 0.0)
        }
        InitScheme::Asymm => ((max - min) / (q_p - q_n), |max, s, q_p| max - s * q_p),
        InitScheme::L4q => ((min / q_n).abs().max((max / q_p).abs()), |_, _, _| 0.0),
    };

    let degenerate = !(scale > 0.0) || !scale.is_finite();
    if degenerate {
        scale = SCALE_FLOOR;
    }
    let mut s = T::from_f64(scale);
    let mut b = if degenerate && scheme == InitScheme::Asymm {
        // constant group: code 0 represents it exactly
        T::from_f64(max)
    } else {
        T::from_f64(bias_rule(max, scale, q_p))
    };

    if matches!(scheme, InitScheme::Asymm | InitScheme::L4q) && !fits(values, s, b, spec) {
        // Widen by a geometrically growing number of ulps. Asymm switches to
        // the centered bias, which agrees with `max - s*q_p` up to the widening.
        let mut widen = 4.0 * T::epsilon().as_f64();
        for _ in 0..64 {
            let wide = scale * (1.0 + widen);
            s = T::from_f64(wide);
            if scheme == InitScheme::Asymm {
                b = T::from_f64(0.5 * (max + min) - wide * 0.5 * (q_p + q_n));
            }
            if fits(values, s, b, spec) {
                break;
            }
            widen *= 2.0;
        }
    }

    Ok(GroupInit {
        scale: s,
        bias: b,
        degenerate,
    })
}

/// Result of initializing a whole matrix.
#[derive(Debug, Clone)]
pub struct InitOutcome<T> {
    pub params: GroupParams<T>,
    /// Groups that fell back to [`SCALE_FLOOR`].
    pub degenerate_groups: Vec<usize>,
}

/// Applies [`init_group`] to every group of `w`.
pub fn init_matrix<T: Real>(w: &Matrix<T>, scheme: InitScheme, spec: &QuantSpec) -> Result<InitOutcome<T>> {
    let gpr = spec.groups_per_row(w.cols())?;
    let gs = spec.group_size();
    let mut scales = Vec::with_capacity(w.rows() * gpr);
    let mut biases = Vec::with_capacity(w.rows() * gpr);
    let mut degenerate_groups = Vec::new();
    for r in 0..w.rows() {
        for (g, chunk) in w.row(r).chunks(gs).enumerate() {
            let init = init_group(chunk, scheme, spec)?;
            if init.degenerate {
                degenerate_groups.push(r * gpr + g);
            }
            scales.push(init.scale);
            biases.push(init.bias);
        }
    }
    Ok(InitOutcome {
        params: GroupParams::new(w.rows(), gpr, gs, scales, biases)?,
        degenerate_groups,
    })
}
