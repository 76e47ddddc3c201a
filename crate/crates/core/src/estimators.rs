//! Group positive-rate estimators: the empirical rate (labels known), the
//! proxy-weighted estimator, and the Bayes estimator for contextual proxies.

use serde::{Deserialize, Serialize};

use crate::domain::{Context, ContextualProxy, RaceDistribution, RaceSet};
use crate::error::{Error, Result};
use crate::tables::SupplementalDataset;

/// How the per-context mean proxy output ω̄_y is averaged.
///
/// `WithinContext` averages ω(x_i, y) over the records observed at context
/// `y`; with it, an exactly calibrated contextual proxy yields an exact
/// estimate. `AllRecords` averages ω(x_i, y) over every record, querying the
/// proxy counterfactually for records observed at the other context.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextAveraging {
    #[default]
    WithinContext,
    AllRecords,
}

impl std::str::FromStr for ContextAveraging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "within-context" => Ok(Self::WithinContext),
            "all-records" => Ok(Self::AllRecords),
            other => Err(Error::InvalidConfig(format!("unknown context averaging {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    True,
    Weighted,
    Bayes,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::True => "true",
            EstimatorKind::Weighted => "weighted",
            EstimatorKind::Bayes => "bayes",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "true" => Ok(Self::True),
            "weighted" => Ok(Self::Weighted),
            "bayes" => Ok(Self::Bayes),
            other => Err(Error::InvalidConfig(format!("unknown estimator {other:?}"))),
        }
    }
}

/// Proxy outputs for every record at both contexts, plus observed contexts.
#[derive(Debug, Clone)]
pub struct ContextualPredictions {
    pub contexts: Vec<Context>,
    /// `by_context[y][i]` is ω(x_i, y).
    pub by_context: [Vec<RaceDistribution>; 2],
    /// Per-record probability mass; `None` weighs every record equally.
    /// Population-level evaluation over an exact joint table uses cell masses.
    pub weights: Option<Vec<f64>>,
}

impl ContextualPredictions {
    pub fn evaluate<P: ContextualProxy + ?Sized>(proxy: &P, dataset: &SupplementalDataset) -> Result<Self> {
        let mut by_context = [Vec::with_capacity(dataset.len()), Vec::with_capacity(dataset.len())];
        for record in &dataset.records {
            for y in Context::BOTH {
                by_context[y.index()].push(proxy.evaluate(record, y)?);
            }
        }
        Ok(Self {
            contexts: dataset.records.iter().map(|r| r.context).collect(),
            by_context,
            weights: None,
        })
    }

    /// Like [`evaluate`](Self::evaluate) with an explicit mass per record.
    pub fn evaluate_weighted<P: ContextualProxy + ?Sized>(
        proxy: &P,
        records: &[crate::domain::AttributedRecord],
        weights: Vec<f64>,
    ) -> Result<Self> {
        if weights.len() != records.len() {
            return Err(Error::LengthMismatch {
                expected: records.len(),
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidDistribution("record weights must be finite and nonnegative".into()));
        }
        let mut by_context = [Vec::with_capacity(records.len()), Vec::with_capacity(records.len())];
        for record in records {
            for y in Context::BOTH {
                by_context[y.index()].push(proxy.evaluate(record, y)?);
            }
        }
        Ok(Self {
            contexts: records.iter().map(|r| r.context).collect(),
            by_context,
            weights: Some(weights),
        })
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    pub fn num_races(&self) -> usize {
        self.by_context[0].first().map_or(0, RaceDistribution::len)
    }

    /// ω(x_i, y_i) at each record's observed context.
    pub fn observed(&self) -> impl Iterator<Item = &RaceDistribution> {
        self.contexts
            .iter()
            .enumerate()
            .map(move |(i, y)| &self.by_context[y.index()][i])
    }

    /// n_y = #{i : y_i = y}.
    pub fn context_counts(&self) -> [usize; 2] {
        let mut n = [0, 0];
        for y in &self.contexts {
            n[y.index()] += 1;
        }
        n
    }

    /// Total weight at each context (n_y when unweighted).
    pub fn context_mass(&self) -> [f64; 2] {
        let mut m = [0.0, 0.0];
        for (i, y) in self.contexts.iter().enumerate() {
            m[y.index()] += self.weight(i);
        }
        m
    }

    /// Weighted Σ_i ω_r(x_i, y) over the records selected by `averaging`,
    /// and the total weight of those records.
    pub fn proxy_sum(&self, race: usize, context: Context, averaging: ContextAveraging) -> (f64, f64) {
        let outputs = &self.by_context[context.index()];
        let mut sum = 0.0;
        let mut mass = 0.0;
        for (i, (d, y)) in outputs.iter().zip(&self.contexts).enumerate() {
            if averaging == ContextAveraging::WithinContext && *y != context {
                continue;
            }
            let w = self.weight(i);
            sum += w * d[race];
            mass += w;
        }
        (sum, mass)
    }

    /// ω̄_r at context `y`; `None` when no record is averaged.
    pub fn mean_output(&self, race: usize, context: Context, averaging: ContextAveraging) -> Option<f64> {
        let (sum, mass) = self.proxy_sum(race, context, averaging);
        (mass > 0.0).then(|| sum / mass)
    }
}

/// Empirical Pr[y = 1 | R = race] on a labeled dataset.
pub fn true_positive_rate(dataset: &SupplementalDataset, race: usize) -> Result<f64> {
    dataset.require_labels()?;
    let (members, positives) = dataset
        .records
        .iter()
        .filter(|r| r.race == Some(race))
        .fold((0usize, 0usize), |(m, p), r| (m + 1, p + usize::from(r.context == Context::Positive)));
    if members == 0 {
        return Err(Error::EmptyGroup(dataset.race_set.label(race).to_string()));
    }
    Ok(positives as f64 / members as f64)
}

/// Σ_i ρ_r(x_i) f(x_i) / Σ_i ρ_r(x_i).
pub fn weighted_estimate(weights: &[f64], outcomes: &[Context]) -> Result<f64> {
    if weights.len() != outcomes.len() {
        return Err(Error::LengthMismatch {
            expected: weights.len(),
            found: outcomes.len(),
        });
    }
    let (num, den) = weights
        .iter()
        .zip(outcomes)
        .fold((0.0, 0.0), |(num, den), (w, y)| (num + w * y.as_f64(), den + w));
    if den <= 0.0 {
        return Err(Error::ZeroMass(String::new()));
    }
    Ok((num / den).clamp(0.0, 1.0))
}

/// Weighted estimator for `race`, evaluating the proxy at observed contexts.
pub fn weighted_estimate_for(predictions: &ContextualPredictions, race: usize) -> Result<f64> {
    let weights: Vec<f64> = predictions
        .observed()
        .enumerate()
        .map(|(i, d)| predictions.weight(i) * d[race])
        .collect();
    weighted_estimate(&weights, &predictions.contexts)
}

/// Bayes estimator for `race`:
///
/// ```text
///            ω̄(1) · n₁
/// μ̂ᴮ = ───────────────────────
///       ω̄(0) · n₀ + ω̄(1) · n₁
/// ```
///
/// where ω̄(y) averages ω_r(x_i, y) according to `averaging`. With
/// [`ContextAveraging::AllRecords`] this is exactly
/// `Σ_i ω(x_i,1)·n₁ / Σ_y Σ_i ω(x_i,y)·n_y`.
pub fn bayes_estimate(predictions: &ContextualPredictions, race: usize, averaging: ContextAveraging) -> Result<f64> {
    let n = predictions.context_mass();
    let term = |y: Context| -> f64 {
        let count = n[y.index()];
        match averaging {
            ContextAveraging::AllRecords => predictions.proxy_sum(race, y, averaging).0 * count,
            // ω̄(y)·n_y reduces to the within-context sum.
            ContextAveraging::WithinContext => predictions.proxy_sum(race, y, averaging).0,
        }
    };
    let positive = term(Context::Positive);
    let denominator = term(Context::Negative) + positive;
    if denominator <= 0.0 {
        return Err(Error::ZeroDenominator(race.to_string()));
    }
    Ok((positive / denominator).clamp(0.0, 1.0))
}

/// Convenience wrapper evaluating `proxy` on `dataset` first.
pub fn bayes_estimate_with<P: ContextualProxy + ?Sized>(
    proxy: &P,
    dataset: &SupplementalDataset,
    race: usize,
    averaging: ContextAveraging,
) -> Result<f64> {
    let predictions = ContextualPredictions::evaluate(proxy, dataset)?;
    bayes_estimate(&predictions, race, averaging)
}

/// Per-race positive-rate estimates and their pairwise disparities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityReport {
    pub method: EstimatorKind,
    pub races: Vec<String>,
    pub estimates: Vec<f64>,
    /// Number of labeled records per race, when labels were available.
    pub group_sizes: Option<Vec<usize>>,
    /// `disparity[a][b] = |μ̂(a) − μ̂(b)|`.
    pub disparity: Vec<Vec<f64>>,
    pub n: usize,
    pub n_positive: usize,
    pub n_negative: usize,
}

impl DisparityReport {
    pub fn new(race_set: &RaceSet, estimates: Vec<f64>, method: EstimatorKind, contexts: [usize; 2]) -> Result<Self> {
        if estimates.len() != race_set.len() {
            return Err(Error::LengthMismatch {
                expected: race_set.len(),
                found: estimates.len(),
            });
        }
        let disparity = estimates
            .iter()
            .map(|a| estimates.iter().map(|b| (a - b).abs()).collect())
            .collect();
        Ok(Self {
            method,
            races: race_set.labels().to_vec(),
            estimates,
            group_sizes: None,
            disparity,
            n: contexts[0] + contexts[1],
            n_positive: contexts[1],
            n_negative: contexts[0],
        })
    }

    /// Largest pairwise disparity and the pair attaining it.
    pub fn max_disparity(&self) -> (f64, usize, usize) {
        let mut best = (0.0, 0, 0);
        for (a, row) in self.disparity.iter().enumerate() {
            for (b, d) in row.iter().enumerate().skip(a + 1) {
                if *d > best.0 {
                    best = (*d, a, b);
                }
            }
        }
        best
    }
}

/// Estimates every race's positive rate with the chosen estimator.
///
/// `predictions` is ignored for [`EstimatorKind::True`]; races with no mass
/// (or no members) are reported as NaN.
pub fn estimate_all(
    dataset: &SupplementalDataset,
    predictions: Option<&ContextualPredictions>,
    method: EstimatorKind,
    averaging: ContextAveraging,
) -> Result<DisparityReport> {
    let k = dataset.race_set.len();
    let mut estimates = Vec::with_capacity(k);
    for race in 0..k {
        let estimate = match method {
            EstimatorKind::True => true_positive_rate(dataset, race),
            EstimatorKind::Weighted => weighted_estimate_for(require(predictions)?, race),
            EstimatorKind::Bayes => bayes_estimate(require(predictions)?, race, averaging),
        };
        estimates.push(match estimate {
            Ok(v) => v,
            Err(Error::EmptyGroup(_) | Error::ZeroMass(_) | Error::ZeroDenominator(_)) => f64::NAN,
            Err(e) => return Err(e),
        });
    }
    let mut report = DisparityReport::new(&dataset.race_set, estimates, method, dataset.context_counts())?;
    if dataset.race_labels_present() {
        let mut sizes = vec![0; k];
        for record in &dataset.records {
            sizes[record.race.expect("labels present")] += 1;
        }
        report.group_sizes = Some(sizes);
    }
    Ok(report)
}

fn require(predictions: Option<&ContextualPredictions>) -> Result<&ContextualPredictions> {
    predictions.ok_or_else(|| Error::InvalidConfig("estimator requires proxy predictions".into()))
}
