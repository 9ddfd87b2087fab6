//! Boundary losses and language-modeling cross-entropy.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::bytes_data::{TokenId, PAD};
use crate::calibration::RateSpec;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryLossKind {
    /// `-log Binomial(alpha; N, k)`: pulls every sequence toward `k = alpha N`.
    Binomial,
    /// `max(k/N - alpha, 0) + max(beta - k/N, 0)`: zero inside the band.
    Flexitokens,
    /// Plain `k/N` with no lower edge. Only useful to show rate collapse.
    MinimizeRate,
}

impl std::str::FromStr for BoundaryLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binomial" => Ok(Self::Binomial),
            "flexitokens" => Ok(Self::Flexitokens),
            "minimize_rate" => Ok(Self::MinimizeRate),
            other => Err(Error::Config(format!("unknown boundary loss `{other}`"))),
        }
    }
}

fn check_binomial_args(k: f64, n: usize, alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!(
            "binomial prior needs 0 < alpha < 1, got {alpha}"
        )));
    }
    if n == 0 || !(0.0..=n as f64).contains(&k) {
        return Err(Error::Config(format!(
            "binomial prior needs 0 <= k <= N, got k={k}, N={n}"
        )));
    }
    Ok(())
}

/// Negative log binomial probability of `k` boundaries in `n` positions,
/// through log-gamma so that `k` may be fractional.
pub fn binomial_regularizer(k: f64, n: usize, alpha: f64) -> Result<f64> {
    check_binomial_args(k, n, alpha)?;
    let nf = n as f64;
    let log_p = ln_gamma(nf + 1.0) - ln_gamma(k + 1.0) - ln_gamma(nf - k + 1.0)
        + k * alpha.ln()
        + (nf - k) * (1.0 - alpha).ln();
    Ok(-log_p)
}

/// `d/dk` of [`binomial_regularizer`].
pub fn binomial_grad_k(k: f64, n: usize, alpha: f64) -> Result<f64> {
    check_binomial_args(k, n, alpha)?;
    let nf = n as f64;
    Ok(digamma(k + 1.0) - digamma(nf - k + 1.0) - alpha.ln() + (1.0 - alpha).ln())
}

pub fn flexitokens_loss(k: f64, n: usize, spec: &RateSpec) -> f64 {
    let r = k / n as f64;
    (r - spec.alpha).max(0.0) + (spec.beta - r).max(0.0)
}

/// Subgradient in `k`: `+1/N` above the band, `-1/N` below, 0 inside and at
/// the edges.
pub fn flexitokens_grad_k(k: f64, n: usize, spec: &RateSpec) -> f64 {
    let r = k / n as f64;
    if r > spec.alpha {
        1.0 / n as f64
    } else if r < spec.beta {
        -1.0 / n as f64
    } else {
        0.0
    }
}

/// `(loss, dloss/dk)` for one sequence.
pub fn boundary_loss(
    kind: BoundaryLossKind,
    k: f64,
    n: usize,
    spec: &RateSpec,
) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::Empty("boundary loss over zero positions"));
    }
    match kind {
        BoundaryLossKind::Binomial => Ok((
            binomial_regularizer(k, n, spec.alpha)?,
            binomial_grad_k(k, n, spec.alpha)?,
        )),
        BoundaryLossKind::Flexitokens => {
            Ok((flexitokens_loss(k, n, spec), flexitokens_grad_k(k, n, spec)))
        }
        BoundaryLossKind::MinimizeRate => Ok((k / n as f64, 1.0 / n as f64)),
    }
}

#[derive(Clone, Debug)]
pub struct CrossEntropy {
    /// Mean NLL in nats over counted targets.
    pub mean: f64,
    pub nll_sum: f64,
    pub count: usize,
    /// Gradient of `mean` w.r.t. the logits.
    pub d_logits: Array2<f64>,
}

/// Mean next-token NLL. Row `t` of `logits` is scored against `targets[t]`;
/// rows at or past `valid_len` and `PAD` targets are skipped.
pub fn lm_cross_entropy(
    logits: ArrayView2<f64>,
    targets: &[TokenId],
    valid_len: usize,
) -> Result<CrossEntropy> {
    let rows = valid_len.min(targets.len()).min(logits.nrows());
    let mut d_logits = Array2::zeros(logits.dim());
    let mut nll_sum = 0.0;
    let mut count = 0;
    for (t, &target) in targets.iter().enumerate().take(rows) {
        if target == PAD {
            continue;
        }
        if target as usize >= logits.ncols() {
            return Err(Error::TokenOutOfRange {
                id: target,
                vocab: logits.ncols(),
            });
        }
        let row = logits.row(t);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        nll_sum += lse - row[target as usize];
        let mut g = d_logits.row_mut(t);
        g.assign(&row.mapv(|v| (v - lse).exp()));
        g[target as usize] -= 1.0;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("no valid targets for cross-entropy"));
    }
    d_logits /= count as f64;
    Ok(CrossEntropy {
        mean: nll_sum / count as f64,
        nll_sum,
        count,
        d_logits,
    })
}

/// Mean softmax cross-entropy of `logits` rows against class indices.
pub fn class_cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<CrossEntropy> {
    if labels.len() != logits.nrows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            logits.nrows()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Empty("no labels for cross-entropy"));
    }
    let mut d_logits = Array2::zeros(logits.dim());
    let mut nll_sum = 0.0;
    for (t, &label) in labels.iter().enumerate() {
        if label >= logits.ncols() {
            return Err(Error::Data(format!(
                "label {label} out of range for {} classes",
                logits.ncols()
            )));
        }
        let row = logits.row(t);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        nll_sum += lse - row[label];
        let mut g = d_logits.row_mut(t);
        g.assign(&row.mapv(|v| (v - lse).exp()));
        g[label] -= 1.0;
    }
    let count = labels.len();
    d_logits /= count as f64;
    Ok(CrossEntropy {
        mean: nll_sum / count as f64,
        nll_sum,
        count,
        d_logits,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub lm_loss: f64,
    pub boundary_loss: f64,
    pub total: f64,
}

/// Per-sequence inputs to [`total_objective`].
#[derive(Clone, Copy, Debug)]
pub struct SequenceTerms<'a> {
    pub lm_loss: f64,
    pub k: f64,
    pub n: usize,
    pub language: &'a str,
}

/// Batch mean of the LM term plus the batch mean of each sequence's boundary
/// loss, scored against its own language's band. Returns the batch loss and
/// `d total / d k_i` for every sequence.
pub fn total_objective(
    seqs: &[SequenceTerms<'_>],
    specs: &BTreeMap<String, RateSpec>,
    kind: BoundaryLossKind,
) -> Result<(BatchLoss, Vec<f64>)> {
    if seqs.is_empty() {
        return Err(Error::Empty("empty batch"));
    }
    let b = seqs.len() as f64;
    let mut lm = 0.0;
    let mut bl = 0.0;
    let mut d_k = Vec::with_capacity(seqs.len());
    for s in seqs {
        let spec = specs
            .get(s.language)
            .ok_or_else(|| Error::MissingRateSpec(s.language.to_string()))?;
        let (loss, grad) = boundary_loss(kind, s.k, s.n, spec)?;
        lm += s.lm_loss;
        bl += loss;
        d_k.push(grad / b);
    }
    let out = BatchLoss {
        lm_loss: lm / b,
        boundary_loss: bl / b,
        total: (lm + bl) / b,
    };
    Ok((out, d_k))
}
