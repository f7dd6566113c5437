//! Feed-forward block as a key/value memory.
//!
//! Neuron `i` owns key row `w_in[i]`, input bias `b_in[i]` and value row
//! `w_out[i]`; the block computes `inner = f(x · W_inᵀ + b_in)` and
//! `out = inner · W_out + b_out`.

use std::fmt::Debug;
use std::str::FromStr;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point scalar used by the forward passes.
pub trait Real: Float + std::iter::Sum + Debug + Send + Sync + 'static {
    fn erf(self) -> Self;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Exact `x Φ(x)` via the error function.
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Gelu => {
                let half = T::from_f64(0.5);
                half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
            }
            Activation::Relu => x.max(T::zero()),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Gelu => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Gelu),
            1 => Ok(Activation::Relu),
            other => Err(Error::Format(format!("unknown activation code {other}"))),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Weights of one feed-forward block, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights<T = f32> {
    pub m: usize,
    pub d: usize,
    /// `m x d`, row `i` is key `k_i`.
    pub w_in: Vec<T>,
    pub b_in: Vec<T>,
    /// `m x d`, row `i` is value `v_i`.
    pub w_out: Vec<T>,
    pub b_out: Vec<T>,
    pub activation: Activation,
}

impl<T: Real> FfnWeights<T> {
    pub fn new(
        m: usize,
        d: usize,
        w_in: Vec<T>,
        b_in: Vec<T>,
        w_out: Vec<T>,
        b_out: Vec<T>,
        activation: Activation,
    ) -> Result<Self> {
        let w = FfnWeights { m, d, w_in, b_in, w_out, b_out, activation };
        w.validate()?;
        Ok(w)
    }

    pub fn zeros(m: usize, d: usize, activation: Activation) -> Self {
        FfnWeights {
            m,
            d,
            w_in: vec![T::zero(); m * d],
            b_in: vec![T::zero(); m],
            w_out: vec![T::zero(); m * d],
            b_out: vec![T::zero(); d],
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (m, d) = (self.m, self.d);
        let checks = [
            ("w_in", self.w_in.len(), m * d),
            ("b_in", self.b_in.len(), m),
            ("w_out", self.w_out.len(), m * d),
            ("b_out", self.b_out.len(), d),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Dimension(format!(
                    "{name} has {got} entries, expected {want} for m = {m}, d = {d}"
                )));
            }
        }
        Ok(())
    }

    pub fn key(&self, i: usize) -> &[T] {
        &self.w_in[i * self.d..(i + 1) * self.d]
    }

    pub fn value(&self, i: usize) -> &[T] {
        &self.w_out[i * self.d..(i + 1) * self.d]
    }

    /// Pre-activation `x · k_i + b_in[i]` of neuron `i`.
    pub fn pre_activation(&self, x: &[T], i: usize) -> T {
        self.key(i).iter().zip(x).map(|(&k, &v)| k * v).sum::<T>() + self.b_in[i]
    }

    pub fn cast<U: Real>(&self) -> FfnWeights<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64(Real::as_f64(*x))).collect::<Vec<U>>();
        FfnWeights {
            m: self.m,
            d: self.d,
            w_in: c(&self.w_in),
            b_in: c(&self.b_in),
            w_out: c(&self.w_out),
            b_out: c(&self.b_out),
            activation: self.activation,
        }
    }
}

/// Returns `(output, inner)`; `inner` is the post-nonlinearity vector before any magnitude.
pub fn ffn_forward<T: Real>(w: &FfnWeights<T>, x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    if x.len() != w.d {
        return Err(Error::Dimension(format!("input width {} but d = {}", x.len(), w.d)));
    }
    let inner: Vec<T> = (0..w.m).map(|i| w.activation.apply(w.pre_activation(x, i))).collect();
    let mut out = w.b_out.clone();
    for (i, &a) in inner.iter().enumerate() {
        if a == T::zero() {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(w.value(i)) {
            *o = *o + a * v;
        }
    }
    Ok((out, inner))
}
