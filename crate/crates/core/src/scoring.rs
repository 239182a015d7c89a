//! Per-slot OOD scores and their aggregation into one decision per image.
//!
//! Every score is oriented so that higher means "more known".

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ans::min_max_normalize;
use crate::error::{Error, Result};
use crate::tensor::{logsumexp_slice, softmax_slice, Tensor};

pub const ENERGY_T: f64 = 1.0;
pub const ODIN_T: f64 = 1000.0;
pub const MAHALANOBIS_DELTA: f64 = 1e-4;

pub fn score_msp(logits: &[f64]) -> f64 {
    softmax_slice(logits).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

pub fn score_maxlogit(logits: &[f64]) -> f64 {
    logits.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `T * logsumexp(logits / T)`.
pub fn score_energy(logits: &[f64], t: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
    t * logsumexp_slice(&scaled)
}

/// Max softmax probability at temperature `t` (no input perturbation).
pub fn score_odin(logits: &[f64], t: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
    score_msp(&scaled)
}

/// Class-conditional Gaussians with a shared covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct MahalanobisModel {
    /// Class id and mean.
    pub means: Vec<(usize, Vec<f64>)>,
    /// Regularized shared covariance, `D x D` row-major.
    pub covariance: Vec<f64>,
    precision: DMatrix<f64>,
}

impl MahalanobisModel {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, |m| m.1.len())
    }
}

/// Fits per-class means and the pooled covariance (`+ delta * I`).
pub fn fit_mahalanobis(features: &[Vec<f64>], labels: &[usize], delta: f64) -> Result<MahalanobisModel> {
    if features.len() != labels.len() {
        return Err(Error::Shape(format!(
            "fit_mahalanobis: {} features vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    let d = features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Empty("Mahalanobis fit population".into()))?;
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("fit_mahalanobis: ragged features".into()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut means = Vec::with_capacity(classes.len());
    for &c in &classes {
        let members: Vec<&Vec<f64>> = features
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(f, _)| f)
            .collect();
        if members.len() < 2 {
            return Err(Error::Invalid(format!(
                "fit_mahalanobis: class {c} has {} sample(s), need at least 2",
                members.len()
            )));
        }
        let mut mu = vec![0.0; d];
        for f in &members {
            for (m, v) in mu.iter_mut().zip(f.iter()) {
                *m += v;
            }
        }
        mu.iter_mut().for_each(|m| *m /= members.len() as f64);
        means.push((c, mu));
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for (f, l) in features.iter().zip(labels) {
        let mu = &means.iter().find(|(c, _)| c == l).expect("class fitted").1;
        let x = DVector::from_iterator(d, f.iter().zip(mu).map(|(a, b)| a - b));
        cov += &x * x.transpose();
    }
    cov /= features.len() as f64;
    for i in 0..d {
        cov[(i, i)] += delta;
    }
    let chol = cov.clone().cholesky().ok_or_else(|| {
        Error::Invalid(format!(
            "fit_mahalanobis: covariance is not positive definite after adding {delta} * I"
        ))
    })?;
    let precision = chol.inverse();
    let covariance = (0..d * d).map(|k| cov[(k / d, k % d)]).collect();
    Ok(MahalanobisModel {
        means,
        covariance,
        precision,
    })
}

/// `-min_k (x - mu_k)^T Sigma^-1 (x - mu_k)`.
pub fn score_mahalanobis(model: &MahalanobisModel, x: &[f64]) -> Result<f64> {
    let d = model.dim();
    if x.len() != d {
        return Err(Error::Shape(format!(
            "score_mahalanobis: feature of {} vs model dim {d}",
            x.len()
        )));
    }
    let mut best = f64::INFINITY;
    for (_, mu) in &model.means {
        let v = DVector::from_iterator(d, x.iter().zip(mu).map(|(a, b)| a - b));
        let dist = v.dot(&(&model.precision * &v));
        best = best.min(dist);
    }
    Ok(-best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMetric {
    Msp,
    MaxLogit,
    Energy,
    Odin,
    Mahalanobis,
}

impl ScoreMetric {
    pub const ALL: [ScoreMetric; 5] = [
        ScoreMetric::Msp,
        ScoreMetric::MaxLogit,
        ScoreMetric::Energy,
        ScoreMetric::Odin,
        ScoreMetric::Mahalanobis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreMetric::Msp => "msp",
            ScoreMetric::MaxLogit => "maxlogit",
            ScoreMetric::Energy => "energy",
            ScoreMetric::Odin => "odin",
            ScoreMetric::Mahalanobis => "mahalanobis",
        }
    }
}

impl std::str::FromStr for ScoreMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreMetric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown score metric `{s}`")))
    }
}

impl std::fmt::Display for ScoreMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-slot scores for one image. `slots` is only read by Mahalanobis.
pub fn slot_scores(
    metric: ScoreMetric,
    fg_logits: &Tensor,
    slots: &Tensor,
    maha: Option<&MahalanobisModel>,
) -> Result<Vec<f64>> {
    let n = fg_logits.rows();
    if fg_logits.cols() < 2 {
        return Err(Error::Invalid("scoring needs at least 2 logits per slot".into()));
    }
    (0..n)
        .map(|i| {
            let l = fg_logits.row(i);
            Ok(match metric {
                ScoreMetric::Msp => score_msp(l),
                ScoreMetric::MaxLogit => score_maxlogit(l),
                ScoreMetric::Energy => score_energy(l, ENERGY_T),
                ScoreMetric::Odin => score_odin(l, ODIN_T),
                ScoreMetric::Mahalanobis => {
                    let m = maha.ok_or_else(|| {
                        Error::Config("mahalanobis scoring needs a fitted model".into())
                    })?;
                    score_mahalanobis(m, slots.row(i))?
                }
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Scheme {
    All,
    Selective { gamma: f64 },
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scheme::All => f.write_str("all"),
            Scheme::Selective { gamma } => write!(f, "selective@{gamma}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_slot: Vec<f64>,
    pub scheme: Scheme,
    /// Slots kept by the selective scheme.
    pub fg_mask: Option<Vec<bool>>,
    /// `-inf` when the selective scheme keeps no slot.
    pub decision: f64,
}

/// Slots whose normalized noise logit is below `gamma`. All-equal logits
/// mark every slot as foreground.
pub fn selective_mask(nz_logits: &[f64], gamma: f64) -> Vec<bool> {
    match min_max_normalize(nz_logits) {
        Some(m) => m.into_iter().map(|v| v < gamma).collect(),
        None => vec![true; nz_logits.len()],
    }
}

pub fn aggregate(per_slot: &[f64], scheme: Scheme, nz_logits: Option<&[f64]>) -> Result<ScoreReport> {
    match scheme {
        Scheme::All => Ok(ScoreReport {
            per_slot: per_slot.to_vec(),
            scheme,
            fg_mask: None,
            decision: per_slot.iter().sum(),
        }),
        Scheme::Selective { gamma } => {
            let nz = nz_logits.ok_or_else(|| {
                Error::Config("selective aggregation needs noise logits".into())
            })?;
            if nz.len() != per_slot.len() {
                return Err(Error::Shape(format!(
                    "aggregate: {} noise logits for {} slots",
                    nz.len(),
                    per_slot.len()
                )));
            }
            let mask = selective_mask(nz, gamma);
            let decision = if mask.iter().any(|&m| m) {
                per_slot.iter().zip(&mask).filter(|(_, &m)| m).map(|(s, _)| s).sum()
            } else {
                log::warn!("selective aggregation kept no slot; decision set to -inf");
                f64::NEG_INFINITY
            };
            Ok(ScoreReport {
                per_slot: per_slot.to_vec(),
                scheme,
                fg_mask: Some(mask),
                decision,
            })
        }
    }
}
