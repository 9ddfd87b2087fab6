//! Boundary probabilities and hard boundary decisions.
//!
//! `b_t = 1` marks byte `t` as the last byte of its segment. Training draws
//! `b_t = [sigmoid((logit_t + g_t) / tau) > 0.5]` with logistic noise `g_t`;
//! evaluation thresholds `p_t > 0.5`. In both modes the backward pass treats
//! `b_t` as its soft value (straight-through).

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::{gelu, gelu_backward, linear_backward, linear_forward};
use crate::model::params::{mat, vector, Init, LayoutBuilder, Slot};

/// Logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]` before noise is added.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Stochastic,
    Deterministic,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln().clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// Difference of two standard Gumbel draws.
fn logistic_noise<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // open interval (0, 1)
    let u: f64 = (rng.random::<f64>() + f64::EPSILON).min(1.0 - f64::EPSILON);
    u.ln() - (1.0 - u).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryProbs {
    pub p: Vec<f64>,
}

/// Hard boundary decisions plus what the backward pass needs.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryMask {
    /// One entry per position; padding positions are `false`.
    pub hard: Vec<bool>,
    /// Soft relaxation `sigmoid((logit + noise) / tau)` per position.
    pub soft: Vec<f64>,
    pub valid_len: usize,
    pub temperature: f64,
    saturated: Vec<bool>,
    forced: Option<usize>,
}

impl BoundaryMask {
    /// Builds a mask from explicit decisions; soft values equal the hard ones.
    pub fn from_hard(hard: Vec<bool>, valid_len: usize) -> Self {
        let soft = hard.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let saturated = vec![true; hard.len()];
        Self {
            hard,
            soft,
            valid_len,
            temperature: 1.0,
            saturated,
            forced: None,
        }
    }

    /// Number of boundaries among valid positions.
    pub fn k(&self) -> usize {
        self.hard[..self.valid_len].iter().filter(|&&b| b).count()
    }

    /// Soft relaxation of `k`; the forced final boundary counts as exactly 1.
    pub fn k_soft(&self) -> f64 {
        (0..self.valid_len).map(|t| self.value(t, true)).sum()
    }

    /// Value of `b_t` used in the forward computation.
    pub fn value(&self, t: usize, soft: bool) -> f64 {
        if Some(t) == self.forced || !soft {
            if self.hard[t] {
                1.0
            } else {
                0.0
            }
        } else {
            self.soft[t]
        }
    }

    pub fn forced(&self) -> Option<usize> {
        self.forced
    }

    /// Marks the last valid position as a boundary so every byte belongs to
    /// a closed segment. The forced boundary counts toward `k` but carries no
    /// gradient.
    pub fn force_final(&mut self) {
        if self.valid_len > 0 {
            let last = self.valid_len - 1;
            self.hard[last] = true;
            self.forced = Some(last);
        }
    }

    /// Straight-through backward: maps `dL/db_t` to `dL/dlogit_t` using the
    /// soft value's derivative.
    pub fn backward(&self, d_b: &[f64]) -> Vec<f64> {
        (0..self.hard.len())
            .map(|t| {
                if t >= self.valid_len || self.saturated[t] || Some(t) == self.forced {
                    0.0
                } else {
                    let s = self.soft[t];
                    d_b[t] * s * (1.0 - s) / self.temperature
                }
            })
            .collect()
    }
}

/// Samples hard decisions from boundary logits. Positions at or past
/// `valid_len` are padding and never boundaries.
pub fn sample_from_logits<R: Rng + ?Sized>(
    logits: &[f64],
    valid_len: usize,
    temperature: f64,
    mode: SampleMode,
    rng: &mut R,
) -> BoundaryMask {
    let n = logits.len();
    let mut hard = vec![false; n];
    let mut soft = vec![0.0; n];
    let mut saturated = vec![false; n];
    for t in 0..valid_len.min(n) {
        let z = logits[t].clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        saturated[t] = z != logits[t];
        let noisy = match mode {
            SampleMode::Stochastic => z + logistic_noise(rng),
            SampleMode::Deterministic => z,
        };
        soft[t] = sigmoid(noisy / temperature);
        hard[t] = noisy > 0.0;
    }
    BoundaryMask {
        hard,
        soft,
        valid_len: valid_len.min(n),
        temperature,
        saturated,
        forced: None,
    }
}

/// Hard sampling from probabilities, with an independent noise stream per seed.
pub fn sample_hard(
    probs: &BoundaryProbs,
    valid_len: usize,
    temperature: f64,
    mode: SampleMode,
    seed: u64,
) -> Result<BoundaryMask> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let logits: Vec<f64> = probs.p.iter().map(|&p| logit(p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_from_logits(
        &logits,
        valid_len,
        temperature,
        mode,
        &mut rng,
    ))
}

/// Boundary rate `k / valid_len`.
pub fn rate(mask: &BoundaryMask, valid_len: usize) -> Result<f64> {
    if valid_len == 0 {
        return Err(Error::Empty("rate over zero valid positions"));
    }
    let k = mask.hard[..valid_len.min(mask.hard.len())]
        .iter()
        .filter(|&&b| b)
        .count();
    Ok(k as f64 / valid_len as f64)
}

/// Slots of the shared two-layer boundary MLP.
#[derive(Clone, Copy, Debug)]
pub struct BoundarySlots {
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
}

impl BoundarySlots {
    pub fn register(b: &mut LayoutBuilder, d: usize, std: f64, bias_init: f64) -> Self {
        Self {
            w1: b.matrix("boundary.w1", d, d, Init::Normal(std)),
            b1: b.vector("boundary.b1", d, Init::Zeros),
            w2: b.matrix("boundary.w2", d, 1, Init::Normal(std)),
            b2: b.vector("boundary.b2", 1, Init::Constant(bias_init)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    pre: Array2<f64>,
    act: Array2<f64>,
}

/// `logit_t = gelu(h_t W1 + b1) w2 + b2`.
pub fn boundary_logits(
    hidden: ArrayView2<f64>,
    params: &[f64],
    s: &BoundarySlots,
) -> Result<(Vec<f64>, MlpCache)> {
    if hidden.ncols() != s.w1.rows {
        return Err(Error::Shape(format!(
            "hidden width {} does not match boundary predictor width {}",
            hidden.ncols(),
            s.w1.rows
        )));
    }
    let pre = linear_forward(hidden, mat(params, s.w1), vector(params, s.b1));
    let act = pre.mapv(gelu);
    let out = linear_forward(act.view(), mat(params, s.w2), vector(params, s.b2));
    Ok((out.column(0).to_vec(), MlpCache { pre, act }))
}

pub fn boundary_backward(
    hidden: ArrayView2<f64>,
    cache: &MlpCache,
    d_logits: &[f64],
    params: &[f64],
    s: &BoundarySlots,
    grads: &mut [f64],
) -> Array2<f64> {
    let d_out = Array1::from(d_logits.to_vec()).insert_axis(ndarray::Axis(1));
    let d_act = linear_backward(cache.act.view(), params, s.w2, s.b2, d_out.view(), grads);
    let d_pre = gelu_backward(&cache.pre, d_act.view());
    linear_backward(hidden, params, s.w1, s.b1, d_pre.view(), grads)
}

pub fn predict_probs(
    hidden: ArrayView2<f64>,
    params: &[f64],
    s: &BoundarySlots,
) -> Result<BoundaryProbs> {
    let (logits, _) = boundary_logits(hidden, params, s)?;
    Ok(BoundaryProbs {
        p: logits.into_iter().map(sigmoid).collect(),
    })
}
