//! Learned contextual proxy on top of any base proxy: a softmax regression
//! over `[base-proxy probabilities, standardized covariates, context]`.
//!
//! The base proxy is only queried through [`ContextualProxy::evaluate`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::{AttributedRecord, Context, ContextualProxy, RaceDistribution};
use crate::error::{Error, Result};
use crate::learner::{fit, Features, LearnerConfig, SoftmaxModel};
use crate::tables::{standardize_covariates, CovariateEncoding, CovariateTransform, SupplementalDataset};

/// Column order of the learner's input, fixed at fit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub races: Vec<String>,
    pub covariates: Vec<String>,
}

impl FeatureLayout {
    pub fn width(&self) -> usize {
        self.races.len() + self.covariates.len() + 1
    }

    /// Human-readable column names: `p_<race>`, covariates, then `y`.
    pub fn column_names(&self) -> Vec<String> {
        self.races
            .iter()
            .map(|r| format!("p_{r}"))
            .chain(self.covariates.iter().cloned())
            .chain(std::iter::once("y".to_string()))
            .collect()
    }
}

/// How base-proxy probabilities enter the learner.
///
/// A softmax over a linear function of raw probabilities cannot reproduce
/// its input distribution, so even a perfectly calibrated base proxy is
/// distorted under `Probability`. `LogProbability` makes the identity map
/// representable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseEncoding {
    #[default]
    Probability,
    /// `ln(max(p, LOG_FLOOR))`.
    LogProbability,
}

pub const LOG_FLOOR: f64 = 1e-6;

impl std::str::FromStr for BaseEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probability" => Ok(Self::Probability),
            "log-probability" => Ok(Self::LogProbability),
            other => Err(Error::InvalidConfig(format!("unknown base encoding {other:?}"))),
        }
    }
}

/// Everything besides the base proxy and weights needed to rebuild a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicsgMetadata {
    pub layout: FeatureLayout,
    pub encoding: CovariateEncoding,
    pub transform: CovariateTransform,
    #[serde(default)]
    pub base_encoding: BaseEncoding,
}

#[derive(Clone)]
pub struct MicsgModel {
    base: Arc<dyn ContextualProxy>,
    learner: SoftmaxModel,
    metadata: MicsgMetadata,
}

impl std::fmt::Debug for MicsgModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MicsgModel")
            .field("learner", &self.learner)
            .field("metadata", &self.metadata)
            .finish_non_exhaustive()
    }
}

/// `[ω(x, y), covariates, y]` before any covariate transform.
pub fn raw_features<P: ContextualProxy + ?Sized>(
    base: &P,
    record: &AttributedRecord,
    context_override: Option<Context>,
    encoding: BaseEncoding,
) -> Result<Vec<f64>> {
    let y = context_override.unwrap_or(record.context);
    let mut row = base.evaluate(record, y)?.into_vec();
    if encoding == BaseEncoding::LogProbability {
        for p in &mut row {
            *p = p.max(LOG_FLOOR).ln();
        }
    }
    row.extend_from_slice(&record.covariates);
    row.push(y.as_f64());
    Ok(row)
}

impl MicsgModel {
    pub fn from_parts(base: Arc<dyn ContextualProxy>, learner: SoftmaxModel, metadata: MicsgMetadata) -> Result<Self> {
        let layout = &metadata.layout;
        if base.num_races() != layout.races.len() || learner.classes() != layout.races.len() {
            return Err(Error::InvalidModel("race count differs between base proxy, learner and layout".into()));
        }
        if learner.inputs() != layout.width()
            || metadata.transform.width() != layout.covariates.len()
            || metadata.encoding.width() != layout.covariates.len()
        {
            return Err(Error::InvalidModel(format!(
                "feature width mismatch: learner {} vs layout {}",
                learner.inputs(),
                layout.width()
            )));
        }
        Ok(Self { base, learner, metadata })
    }

    pub fn learner(&self) -> &SoftmaxModel {
        &self.learner
    }

    pub fn metadata(&self) -> &MicsgMetadata {
        &self.metadata
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.metadata.layout
    }

    /// Learner input for `record`, answering at `context_override` when given.
    pub fn assemble_features(&self, record: &AttributedRecord, context_override: Option<Context>) -> Result<Vec<f64>> {
        let expected = self.layout().covariates.len();
        if record.covariates.len() != expected {
            return Err(Error::InconsistentCovariateArity {
                id: record.id.clone(),
                expected,
                found: record.covariates.len(),
            });
        }
        let mut row = raw_features(self.base.as_ref(), record, context_override, self.metadata.base_encoding)?;
        let k = self.layout().races.len();
        let standardized = self.metadata.transform.apply_row(&row[k..k + expected])?;
        row[k..k + expected].copy_from_slice(&standardized);
        Ok(row)
    }

    pub fn predict(&self, record: &AttributedRecord, context: Context) -> Result<RaceDistribution> {
        self.learner.predict_proba(&self.assemble_features(record, Some(context))?)
    }
}

impl ContextualProxy for MicsgModel {
    fn num_races(&self) -> usize {
        self.layout().races.len()
    }

    fn evaluate(&self, record: &AttributedRecord, context: Context) -> Result<RaceDistribution> {
        self.predict(record, context)
    }
}

/// Fits the learner on labeled `train` records at their observed contexts,
/// feeding base probabilities as-is. The covariate transform is fitted on
/// `train` only.
pub fn fit_micsg(base: Arc<dyn ContextualProxy>, train: &SupplementalDataset, config: &LearnerConfig) -> Result<MicsgModel> {
    fit_micsg_with(base, train, config, BaseEncoding::Probability)
}

pub fn fit_micsg_with(
    base: Arc<dyn ContextualProxy>,
    train: &SupplementalDataset,
    config: &LearnerConfig,
    base_encoding: BaseEncoding,
) -> Result<MicsgModel> {
    train.require_labels()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if base.num_races() != train.race_set.len() {
        return Err(Error::InvalidModel(format!(
            "base proxy predicts {} races, dataset has {}",
            base.num_races(),
            train.race_set.len()
        )));
    }
    let (standardized, transform) = standardize_covariates(train)?;
    let mut rows = Vec::with_capacity(train.len());
    let mut labels = Vec::with_capacity(train.len());
    for record in &standardized.records {
        rows.push(raw_features(base.as_ref(), record, None, base_encoding)?);
        labels.push(record.race.expect("labels checked"));
    }
    let features = Features::from_rows(&rows)?;
    let learner = fit(&features, &labels, train.race_set.len(), config)?;
    let metadata = MicsgMetadata {
        layout: FeatureLayout {
            races: train.race_set.labels().to_vec(),
            covariates: train.encoding.feature_names(),
        },
        encoding: train.encoding.clone(),
        transform,
        base_encoding,
    };
    MicsgModel::from_parts(base, learner, metadata)
}
