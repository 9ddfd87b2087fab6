//! Per-language boundary-rate targets.
//!
//! An anchor language `A` gets a hand-picked boundary rate `alpha_A`. Every
//! other language `L` derives `alpha_L = alpha_A * mu_A / mu_L` from mean
//! byte lengths over an n-way parallel corpus, and the lower edge of its band
//! is `beta_L = max(alpha_L - lambda * sigma_L, beta_floor)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 3.0;
pub const DEFAULT_BETA_FLOOR: f64 = 0.005;

/// Boundary-rate band for one language: `beta <= k/N <= alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSpec {
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
    pub lambda: f64,
}

impl RateSpec {
    pub fn new(alpha: f64, sigma: f64, lambda: f64, beta_floor: f64) -> Result<Self> {
        let spec = Self {
            alpha,
            beta: derive_beta(alpha, sigma, lambda, beta_floor),
            sigma,
            lambda,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A degenerate band (`beta == alpha`), e.g. for the binomial baseline.
    pub fn fixed(alpha: f64) -> Result<Self> {
        Self::new(alpha, 0.0, 0.0, DEFAULT_BETA_FLOOR.min(alpha))
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.beta > 0.0
            && self.beta <= self.alpha
            && self.alpha <= 1.0
            && self.sigma >= 0.0
            && self.lambda >= 0.0
            && [self.alpha, self.beta, self.sigma, self.lambda]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid rate spec {self:?}")))
        }
    }

    pub fn contains(&self, rate: f64) -> bool {
        self.beta <= rate && rate <= self.alpha
    }
}

/// `alpha_A * mu_A / mu_L` without clamping.
pub fn derive_alpha_unclamped(alpha_anchor: f64, mu_anchor: f64, mu_lang: f64) -> f64 {
    alpha_anchor * mu_anchor / mu_lang
}

pub fn derive_alpha(alpha_anchor: f64, mu_anchor: f64, mu_lang: f64) -> Result<f64> {
    if !(mu_anchor > 0.0 && mu_lang > 0.0) {
        return Err(Error::Config(format!(
            "mean lengths must be positive ({mu_anchor}, {mu_lang})"
        )));
    }
    if !(alpha_anchor > 0.0 && alpha_anchor <= 1.0) {
        return Err(Error::Config(format!(
            "anchor rate {alpha_anchor} outside (0, 1]"
        )));
    }
    let alpha = derive_alpha_unclamped(alpha_anchor, mu_anchor, mu_lang);
    if alpha > 1.0 {
        log::warn!("derived rate {alpha:.4} exceeds 1, clamping");
        return Ok(1.0);
    }
    Ok(alpha)
}

/// Population standard deviation of the per-sample implied rates
/// `alpha_A * mu_A / len_i`.
pub fn derive_sigma(alpha_anchor: f64, mu_anchor: f64, lengths: &[usize]) -> Result<f64> {
    if lengths.is_empty() {
        return Err(Error::Empty("no sentence lengths"));
    }
    if lengths.contains(&0) {
        return Err(Error::Data(
            "zero-length sentence in parallel corpus".into(),
        ));
    }
    if lengths.len() == 1 {
        log::warn!("single-sample corpus: sigma is 0 and the rate band collapses");
        return Ok(0.0);
    }
    let rates: Vec<f64> = lengths
        .iter()
        .map(|&l| alpha_anchor * mu_anchor / l as f64)
        .collect();
    Ok(population_std(&rates))
}

pub fn derive_beta(alpha: f64, sigma: f64, lambda: f64, beta_floor: f64) -> f64 {
    (alpha - lambda * sigma).max(beta_floor).min(alpha)
}

/// Rates for a language without training data: the most compressive known spec.
pub fn unseen_language_rates(known: &[RateSpec]) -> Result<RateSpec> {
    known
        .iter()
        .copied()
        .min_by(|a, b| a.alpha.total_cmp(&b.alpha))
        .ok_or(Error::Empty("no known rate specs"))
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub(crate) fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageCalibration {
    pub lang: String,
    /// Mean sentence length in bytes.
    pub mu: f64,
    /// Standard deviation of sentence lengths in bytes.
    pub sigma_len: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub anchor: String,
    pub alpha_anchor: f64,
    pub lambda: f64,
    pub beta_floor: f64,
    pub languages: Vec<LanguageCalibration>,
}

impl CalibrationReport {
    pub fn specs(&self) -> BTreeMap<String, RateSpec> {
        self.languages
            .iter()
            .map(|l| {
                let spec = RateSpec {
                    alpha: l.alpha,
                    beta: l.beta,
                    sigma: l.sigma,
                    lambda: self.lambda,
                };
                (l.lang.clone(), spec)
            })
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Fixed-width text table of the derived rates.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "lang", "mu", "alpha", "1/alpha", "sigma", "beta"
        );
        for l in &self.languages {
            let _ = writeln!(
                s,
                "{:<8} {:>8.2} {:>8.4} {:>8.2} {:>8.4} {:>8.4}",
                l.lang,
                l.mu,
                l.alpha,
                1.0 / l.alpha,
                l.sigma,
                l.beta
            );
        }
        s
    }
}

/// Derives rate specs for every language in `lengths` against `anchor`.
pub fn calibrate(
    lengths: &BTreeMap<String, Vec<usize>>,
    anchor: &str,
    alpha_anchor: f64,
    lambda: f64,
    beta_floor: f64,
) -> Result<CalibrationReport> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda {lambda} < 0")));
    }
    let anchor_lengths = lengths
        .get(anchor)
        .ok_or_else(|| Error::UnknownLanguage(anchor.to_string()))?;
    let as_f64 = |ls: &[usize]| ls.iter().map(|&l| l as f64).collect::<Vec<_>>();
    if anchor_lengths.is_empty() {
        return Err(Error::Empty("anchor language has no sentences"));
    }
    let mu_anchor = mean(&as_f64(anchor_lengths));
    let mut languages = Vec::with_capacity(lengths.len());
    for (lang, ls) in lengths {
        if ls.is_empty() {
            return Err(Error::Empty("language has no sentences"));
        }
        let xs = as_f64(ls);
        let mu = mean(&xs);
        let alpha = if lang == anchor {
            alpha_anchor
        } else {
            derive_alpha(alpha_anchor, mu_anchor, mu)?
        };
        let sigma = derive_sigma(alpha_anchor, mu_anchor, ls)?;
        let beta = derive_beta(alpha, sigma, lambda, beta_floor);
        languages.push(LanguageCalibration {
            lang: lang.clone(),
            mu,
            sigma_len: population_std(&xs),
            alpha,
            sigma,
            beta,
        });
    }
    Ok(CalibrationReport {
        anchor: anchor.to_string(),
        alpha_anchor,
        lambda,
        beta_floor,
        languages,
    })
}
