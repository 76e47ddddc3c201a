//! Shared value types: race categories, probability vectors over them, the
//! attributed record, and the contextual proxy contract every predictor
//! implements.

use std::fmt;
use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for the sum-to-one check on probability vectors.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

/// Ordered set of race labels. Every probability vector in a session is
/// index-aligned with this order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaceSet {
    labels: Vec<String>,
}

impl RaceSet {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(Error::InvalidRaceSet(format!(
                "need at least 2 categories, got {}",
                labels.len()
            )));
        }
        for (i, label) in labels.iter().enumerate() {
            if label.trim().is_empty() {
                return Err(Error::InvalidRaceSet("empty label".into()));
            }
            if labels[..i].contains(label) {
                return Err(Error::InvalidRaceSet(format!("duplicate label {label:?}")));
            }
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    /// Case-sensitive lookup of a label's position.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Probability vector over the categories of a [`RaceSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceDistribution(Vec<f64>);

impl RaceDistribution {
    /// Wraps `probs` after checking entries lie in [0,1] and sum to one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty vector".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(Error::InvalidDistribution(format!("entry {p} outside [0,1]")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("entries sum to {total}")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    /// Point mass on category `index`.
    pub fn one_hot(k: usize, index: usize) -> Self {
        let mut probs = vec![0.0; k];
        probs[index] = 1.0;
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Convex combination `(1 - weight) * self + weight * other`.
    pub fn mix(&self, other: &RaceDistribution, weight: f64) -> Result<RaceDistribution> {
        check_len(self.len(), other.len())?;
        let probs = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| ((1.0 - weight) * a + weight * b).clamp(0.0, 1.0))
            .collect();
        Ok(Self(probs))
    }
}

impl Index<usize> for RaceDistribution {
    type Output = f64;

    fn index(&self, index: usize) -> &f64 {
        &self.0[index]
    }
}

/// Rescales nonnegative weights to a probability vector.
///
/// Returns [`Error::AllZero`] when no entry is positive; callers treat that
/// as an impossible combination and apply their own fallback.
pub fn normalize(weights: &[f64]) -> Result<RaceDistribution> {
    if weights.is_empty() {
        return Err(Error::InvalidDistribution("empty vector".into()));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidDistribution(format!("weight {w} is negative or non-finite")));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::AllZero);
    }
    Ok(RaceDistribution(weights.iter().map(|w| (w / total).min(1.0)).collect()))
}

/// Σ_r |a_r − b_r|, in [0, 2].
pub fn l1_distance(a: &RaceDistribution, b: &RaceDistribution) -> Result<f64> {
    check_len(a.len(), b.len())?;
    Ok(a.0.iter().zip(&b.0).map(|(x, y)| (x - y).abs()).sum())
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::LengthMismatch { expected, found });
    }
    Ok(())
}

/// The binary outcome of the decision function (loan approval, party
/// membership, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Context {
    Negative,
    Positive,
}

impl Context {
    pub const BOTH: [Context; 2] = [Context::Negative, Context::Positive];

    pub fn index(self) -> usize {
        match self {
            Context::Negative => 0,
            Context::Positive => 1,
        }
    }

    pub fn flip(self) -> Context {
        match self {
            Context::Negative => Context::Positive,
            Context::Positive => Context::Negative,
        }
    }

    pub fn as_u8(self) -> u8 {
        self.index() as u8
    }

    pub fn as_f64(self) -> f64 {
        self.index() as f64
    }

    pub fn from_u8(value: u8) -> Result<Self> {
        match value {
            0 => Ok(Context::Negative),
            1 => Ok(Context::Positive),
            other => Err(Error::InvalidContext(other.to_string())),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text.trim() {
            "0" => Ok(Context::Negative),
            "1" => Ok(Context::Positive),
            other => Err(Error::InvalidContext(other.to_string())),
        }
    }
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

/// One row of a supplemental (or unattributed) dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributedRecord {
    pub id: String,
    /// Normalized (uppercase, trimmed) surname; empty means unavailable.
    pub surname: String,
    pub geo: String,
    pub context: Context,
    pub covariates: Vec<f64>,
    /// Index into the session [`RaceSet`], when the label is known.
    pub race: Option<usize>,
}

impl AttributedRecord {
    pub fn new(id: impl Into<String>, surname: &str, geo: impl Into<String>, context: Context) -> Self {
        Self {
            id: id.into(),
            surname: normalize_surname(surname),
            geo: geo.into(),
            context,
            covariates: Vec::new(),
            race: None,
        }
    }

    pub fn with_race(mut self, race: usize) -> Self {
        self.race = Some(race);
        self
    }

    pub fn with_covariates(mut self, covariates: Vec<f64>) -> Self {
        self.covariates = covariates;
        self
    }
}

/// Uppercases and trims a surname for table lookup.
pub fn normalize_surname(surname: &str) -> String {
    surname.trim().to_uppercase()
}

/// A proxy model that predicts a race distribution for a record under a
/// given context.
///
/// Implementations must answer at both contexts for every record, including
/// the context the record was not observed in, and must be deterministic.
/// Non-contextual proxies (BISG) ignore `context`.
pub trait ContextualProxy: Send + Sync {
    fn num_races(&self) -> usize;

    fn evaluate(&self, record: &AttributedRecord, context: Context) -> Result<RaceDistribution>;

    /// Evaluates at the record's observed context.
    fn evaluate_observed(&self, record: &AttributedRecord) -> Result<RaceDistribution> {
        self.evaluate(record, record.context)
    }
}

impl<P: ContextualProxy + ?Sized> ContextualProxy for &P {
    fn num_races(&self) -> usize {
        (**self).num_races()
    }

    fn evaluate(&self, record: &AttributedRecord, context: Context) -> Result<RaceDistribution> {
        (**self).evaluate(record, context)
    }
}

impl<P: ContextualProxy + ?Sized> ContextualProxy for Box<P> {
    fn num_races(&self) -> usize {
        (**self).num_races()
    }

    fn evaluate(&self, record: &AttributedRecord, context: Context) -> Result<RaceDistribution> {
        (**self).evaluate(record, context)
    }
}

impl<P: ContextualProxy + ?Sized> ContextualProxy for std::sync::Arc<P> {
    fn num_races(&self) -> usize {
        (**self).num_races()
    }

    fn evaluate(&self, record: &AttributedRecord, context: Context) -> Result<RaceDistribution> {
        (**self).evaluate(record, context)
    }
}

/// Proxy that returns a fixed distribution per context regardless of the
/// record. Useful as a population-level reference and in tests.
#[derive(Debug, Clone)]
pub struct ConstantProxy {
    per_context: [RaceDistribution; 2],
}

impl ConstantProxy {
    pub fn new(negative: RaceDistribution, positive: RaceDistribution) -> Result<Self> {
        check_len(negative.len(), positive.len())?;
        Ok(Self {
            per_context: [negative, positive],
        })
    }
}

impl ContextualProxy for ConstantProxy {
    fn num_races(&self) -> usize {
        self.per_context[0].len()
    }

    fn evaluate(&self, _record: &AttributedRecord, context: Context) -> Result<RaceDistribution> {
        Ok(self.per_context[context.index()].clone())
    }
}
