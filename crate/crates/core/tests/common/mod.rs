//! Reference oracles shared by the integration tests.
//!
//! Everything here is written against plain `Vec<f64>` so that it does not
//! lean on the library's matmul, quantizer or layer code.

#![allow(dead_code)]

use l4q::layers::{L4qLayer, Layer, LayerGrads, LoraAdapter, LoraLayer, LsqLayer, QaLoraLayer, QatLoraLayer};
use l4q::numerics::{Matrix, Rng};
use l4q::probe::AllocProbe;
use l4q::quantizer::{GroupParams, QuantSpec};

pub const GROUP: usize = 4;
pub const RANK: usize = 2;
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;
/// Denominator floor for the relative error of near-zero gradient entries.
pub const FD_FLOOR: f64 = 1e-3;
/// Minimum distance of every scaled weight from a rounding or clamp boundary.
pub const NUDGE: f64 = 1e-3;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct D {
    pub r: usize,
    pub c: usize,
    pub v: Vec<f64>,
}

impl D {
    pub fn zeros(r: usize, c: usize) -> Self {
        Self { r, c, v: vec![0.0; r * c] }
    }

    pub fn randn(rng: &mut Rng, r: usize, c: usize, std: f64) -> Self {
        Self {
            r,
            c,
            v: (0..r * c).map(|_| std * rng.normal()).collect(),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.c + j]
    }

    pub fn mul(&self, o: &D) -> D {
        assert_eq!(self.c, o.r);
        let mut out = D::zeros(self.r, o.c);
        for i in 0..self.r {
            for j in 0..o.c {
                let mut acc = 0.0;
                for k in 0..self.c {
                    acc += self.at(i, k) * o.at(k, j);
                }
                out.v[i * o.c + j] = acc;
            }
        }
        out
    }

    pub fn plus(&self, o: &D) -> D {
        assert_eq!((self.r, self.c), (o.r, o.c));
        D {
            r: self.r,
            c: self.c,
            v: self.v.iter().zip(&o.v).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn times(&self, k: f64) -> D {
        D {
            r: self.r,
            c: self.c,
            v: self.v.iter().map(|a| a * k).collect(),
        }
    }

    /// `sum(self .* o)`
    pub fn dot(&self, o: &D) -> f64 {
        self.v.iter().zip(&o.v).map(|(a, b)| a * b).sum()
    }

    pub fn m(&self) -> Matrix<f64> {
        Matrix::new(self.r, self.c, self.v.clone()).unwrap()
    }

    pub fn from_m(m: &Matrix<f64>) -> D {
        D {
            r: m.rows(),
            c: m.cols(),
            v: m.as_slice().to_vec(),
        }
    }
}

pub fn bounds(bits: u8) -> (f64, f64) {
    (-(1i64 << (bits - 1)) as f64, ((1i64 << (bits - 1)) - 1) as f64)
}

/// Clamp side of one element at the reference point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Side {
    /// In range, with frozen rounding residual `round(v) - v`.
    In(f64),
    Low,
    High,
}

/// Quantizer with the rounding residual and clamp side of every element
/// frozen at a reference point. It agrees with the real quantizer there, is
/// affine in `(w, s, b)` elsewhere, and its exact derivatives are the
/// straight-through ones.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub sides: Vec<Side>,
    pub cols: usize,
    pub qn: f64,
    pub qp: f64,
}

impl Surrogate {
    pub fn freeze(w: &D, s: &[f64], b: &[f64], bits: u8) -> Self {
        let (qn, qp) = bounds(bits);
        let gpr = w.c / GROUP;
        let sides = (0..w.r * w.c)
            .map(|i| {
                let g = (i / w.c) * gpr + (i % w.c) / GROUP;
                let v = (w.v[i] - b[g]) / s[g];
                if v < qn {
                    Side::Low
                } else if v > qp {
                    Side::High
                } else {
                    Side::In(v.round_ties_even() - v)
                }
            })
            .collect();
        Self {
            sides,
            cols: w.c,
            qn,
            qp,
        }
    }

    pub fn apply(&self, w: &D, s: &[f64], b: &[f64]) -> D {
        let gpr = self.cols / GROUP;
        let v = (0..w.v.len())
            .map(|i| {
                let g = (i / w.c) * gpr + (i % w.c) / GROUP;
                match self.sides[i] {
                    Side::In(delta) => w.v[i] + s[g] * delta,
                    Side::Low => s[g] * self.qn + b[g],
                    Side::High => s[g] * self.qp + b[g],
                }
            })
            .collect();
        D { r: w.r, c: w.c, v }
    }

    pub fn mask(&self) -> Vec<bool> {
        self.sides.iter().map(|s| matches!(s, Side::In(_))).collect()
    }
}

/// Plain round-to-nearest-even quantize then dequantize.
pub fn fake_quant(w: &D, s: &[f64], b: &[f64], bits: u8) -> D {
    Surrogate::freeze(w, s, b, bits).apply(w, s, b)
}

/// Shifts weights until every scaled value of `w + extra` sits at least
/// [`NUDGE`] from a half-integer and from both clamp bounds.
pub fn nudge(w: &mut D, extra: &D, s: &[f64], b: &[f64], bits: u8) {
    let (qn, qp) = bounds(bits);
    let gpr = w.c / GROUP;
    for i in 0..w.v.len() {
        let g = (i / w.c) * gpr + (i % w.c) / GROUP;
        loop {
            let v = (w.v[i] + extra.v[i] - b[g]) / s[g];
            let half = (v - v.floor() - 0.5).abs();
            if half >= NUDGE && (v - qn).abs() >= NUDGE && (v - qp).abs() >= NUDGE {
                break;
            }
            w.v[i] += 0.0123 * s[g];
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Central difference of `f` along every entry of `x`.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            buf[i] = x[i] + FD_STEP;
            let up = f(&buf);
            buf[i] = x[i] - FD_STEP;
            let down = f(&buf);
            buf[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Which of the five layer kinds an instance exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Lora,
    Lsq,
    QatLora,
    L4q,
    QaLora,
}

impl Kind {
    pub const ALL: [Kind; 5] = [Kind::Lora, Kind::Lsq, Kind::QatLora, Kind::L4q, Kind::QaLora];
}

/// A small random layer problem with loss `sum(G .* Y)`.
#[derive(Debug, Clone)]
pub struct Instance {
    pub kind: Kind,
    pub bits: u8,
    pub w0: D,
    pub a: D,
    pub b: D,
    pub alpha: f64,
    pub s: Vec<f64>,
    pub bias: Vec<f64>,
    pub x: D,
    pub g: D,
}

impl Instance {
    /// Dims at most 16, group 4, rank 2. Scales are shrunk below the
    /// no-clip range so that both mask branches occur.
    pub fn random(kind: Kind, seed: u64) -> Self {
        let mut rng = Rng::new(seed).fork(kind as u64 + 100);
        let bits = if seed % 2 == 0 { 4 } else { 3 };
        let (qn, qp) = bounds(bits);
        let out = 2 + rng.below(15);
        let inp = GROUP * (1 + rng.below(4));
        let tokens = 1 + rng.below(6);
        let w0 = D::randn(&mut rng, out, inp, 1.0);
        let adapter_in = if kind == Kind::QaLora { inp / GROUP } else { inp };
        let a = D::randn(&mut rng, RANK, adapter_in, 0.5);
        let b = D::randn(&mut rng, out, RANK, 0.5);
        let alpha = rng.uniform_range(0.5, 2.0);
        let w = if kind == Kind::L4q {
            w0.plus(&b.mul(&a).times(alpha))
        } else {
            w0.clone()
        };
        let groups = out * inp / GROUP;
        let mut s = Vec::with_capacity(groups);
        let mut bias = Vec::with_capacity(groups);
        for gi in 0..groups {
            let (r, g) = (gi / (inp / GROUP), gi % (inp / GROUP));
            let vals = &w.v[r * inp + g * GROUP..r * inp + (g + 1) * GROUP];
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let center = 0.5 * (lo + hi) * rng.uniform_range(0.0, 1.0);
            let fit = ((hi - center) / qp).max((lo - center) / qn).max(1e-3);
            s.push(fit * rng.uniform_range(0.6, 1.1));
            bias.push(center);
        }
        let mut inst = Self {
            kind,
            bits,
            w0,
            a,
            b,
            alpha,
            s,
            bias,
            x: D::randn(&mut rng, inp, tokens, 1.0),
            g: D::randn(&mut rng, out, tokens, 1.0),
        };
        let extra = if kind == Kind::L4q {
            inst.b.mul(&inst.a).times(alpha)
        } else {
            D::zeros(out, inp)
        };
        let (s, bias) = (inst.s.clone(), inst.bias.clone());
        nudge(&mut inst.w0, &extra, &s, &bias, bits);
        inst
    }

    pub fn spec(&self) -> QuantSpec {
        QuantSpec::new(self.bits, GROUP).unwrap()
    }

    pub fn params(&self) -> GroupParams<f64> {
        GroupParams::new(
            self.w0.r,
            self.w0.c / GROUP,
            GROUP,
            self.s.clone(),
            self.bias.clone(),
        )
        .unwrap()
    }

    pub fn adapter(&self) -> LoraAdapter<f64> {
        LoraAdapter::new(self.a.m(), self.b.m(), self.alpha).unwrap()
    }

    pub fn quantized_input(&self) -> D {
        if self.kind == Kind::L4q {
            self.w0.plus(&self.b.mul(&self.a).times(self.alpha))
        } else {
            self.w0.clone()
        }
    }

    pub fn surrogate(&self) -> Surrogate {
        Surrogate::freeze(&self.quantized_input(), &self.s, &self.bias, self.bits)
    }

    pub fn layer(&self) -> Box<dyn Layer<f64>> {
        let w0 = self.w0.m();
        match self.kind {
            Kind::Lora => Box::new(LoraLayer::new(w0, self.adapter()).unwrap()),
            Kind::Lsq => Box::new(LsqLayer::new(w0, self.params(), self.spec()).unwrap().with_trainable_weight(true)),
            Kind::QatLora => Box::new(QatLoraLayer::new(w0, self.adapter(), self.params(), self.spec()).unwrap()),
            Kind::L4q => Box::new(L4qLayer::new(w0, self.adapter(), self.params(), self.spec()).unwrap()),
            Kind::QaLora => Box::new(QaLoraLayer::new(&w0, self.params(), self.spec(), self.adapter()).unwrap()),
        }
    }

    /// Reference forward with the quantizer frozen by `sur`.
    pub fn oracle_forward(&self, sur: &Surrogate, w0: &D, a: &D, b: &D, s: &[f64], bias: &[f64], x: &D) -> D {
        match self.kind {
            Kind::Lora => w0.mul(x).plus(&b.mul(&a.mul(x)).times(self.alpha)),
            Kind::Lsq => sur.apply(w0, s, bias).mul(x),
            Kind::QatLora => sur
                .apply(w0, s, bias)
                .mul(x)
                .plus(&b.mul(&a.mul(x)).times(self.alpha)),
            Kind::L4q => sur.apply(&w0.plus(&b.mul(a).times(self.alpha)), s, bias).mul(x),
            Kind::QaLora => {
                let groups = x.r / GROUP;
                let mut px = D::zeros(groups, x.c);
                for r in 0..x.r {
                    for t in 0..x.c {
                        px.v[(r / GROUP) * x.c + t] += x.at(r, t);
                    }
                }
                sur.apply(w0, s, bias).mul(x).plus(&b.mul(&a.mul(&px)).times(-self.alpha))
            }
        }
    }

    /// Analytic gradients and `dL/dX` from the library.
    pub fn analytic(&self) -> (LayerGrads<f64>, D, D) {
        let mut layer = self.layer();
        let y = layer.forward(&self.x.m()).unwrap();
        let probe = AllocProbe::new();
        let back = layer.backward(&self.g.m(), &probe).unwrap();
        (back.grads, D::from_m(&back.d_input), D::from_m(&y))
    }
}

/// Worst relative error of one instance over every gradient the layer
/// reports, plus `dL/dX`; also checks that the oracle forward reproduces
/// the layer at the reference point.
pub fn check_instance(inst: &Instance) -> Result<f64, String> {
    let sur = inst.surrogate();
    let (grads, dx, y) = inst.analytic();
    let reference = inst.oracle_forward(&sur, &inst.w0, &inst.a, &inst.b, &inst.s, &inst.bias, &inst.x);
    let fwd_gap = y
        .v
        .iter()
        .zip(&reference.v)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if fwd_gap > 1e-10 {
        return Err(format!("{:?}: oracle forward differs by {fwd_gap:e}", inst.kind));
    }

    let loss = |w0: &D, a: &D, b: &D, s: &[f64], bias: &[f64], x: &D| {
        inst.oracle_forward(&sur, w0, a, b, s, bias, x).dot(&inst.g)
    };
    let mut worst = 0.0f64;
    let mut compare = |name: &str, analytic: &[f64], numeric: Vec<f64>| -> Result<(), String> {
        if analytic.len() != numeric.len() {
            return Err(format!("{:?}: {name} has {} entries, expected {}", inst.kind, analytic.len(), numeric.len()));
        }
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let e = rel_err(*a, *n);
            if e >= FD_TOL {
                return Err(format!("{:?}: {name}[{i}] analytic {a:e} numeric {n:e} rel {e:e}", inst.kind));
            }
            worst = worst.max(e);
        }
        Ok(())
    };

    if let Some(da) = &grads.d_a {
        let num = central_diff(&inst.a.v, |v| {
            let a = D { v: v.to_vec(), ..inst.a.clone() };
            loss(&inst.w0, &a, &inst.b, &inst.s, &inst.bias, &inst.x)
        });
        compare("dA", da.as_slice(), num)?;
    }
    if let Some(db) = &grads.d_b {
        let num = central_diff(&inst.b.v, |v| {
            let b = D { v: v.to_vec(), ..inst.b.clone() };
            loss(&inst.w0, &inst.a, &b, &inst.s, &inst.bias, &inst.x)
        });
        compare("dB", db.as_slice(), num)?;
    }
    if !grads.d_scale.is_empty() {
        let num = central_diff(&inst.s, |v| loss(&inst.w0, &inst.a, &inst.b, v, &inst.bias, &inst.x));
        compare("ds", &grads.d_scale, num)?;
    }
    if !grads.d_bias.is_empty() {
        let num = central_diff(&inst.bias, |v| loss(&inst.w0, &inst.a, &inst.b, &inst.s, v, &inst.x));
        compare("db", &grads.d_bias, num)?;
    }
    if let Some(dw) = &grads.d_weight {
        let num = central_diff(&inst.w0.v, |v| {
            let w0 = D { v: v.to_vec(), ..inst.w0.clone() };
            loss(&w0, &inst.a, &inst.b, &inst.s, &inst.bias, &inst.x)
        });
        compare("dW", dw.as_slice(), num)?;
    }
    let num = central_diff(&inst.x.v, |v| {
        let x = D { v: v.to_vec(), ..inst.x.clone() };
        loss(&inst.w0, &inst.a, &inst.b, &inst.s, &inst.bias, &x)
    });
    compare("dX", &dx.v, num)?;

    let expected: &[&str] = match inst.kind {
        Kind::Lora | Kind::QaLora => &["dA", "dB"],
        Kind::Lsq => &["ds", "db", "dW"],
        Kind::QatLora | Kind::L4q => &["dA", "dB", "ds", "db"],
    };
    let present = [
        ("dA", grads.d_a.is_some()),
        ("dB", grads.d_b.is_some()),
        ("ds", !grads.d_scale.is_empty()),
        ("db", !grads.d_bias.is_empty()),
        ("dW", grads.d_weight.is_some()),
    ];
    for (name, has) in present {
        if has != expected.contains(&name) {
            return Err(format!("{:?}: unexpected presence of {name}: {has}", inst.kind));
        }
    }
    Ok(worst)
}
