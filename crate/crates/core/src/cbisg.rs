//! Contextual BISG.
//!
//! For every geography `g` and context `y` the race composition p^(g,y) gets
//! a Dirichlet prior `Dir(η_g · C^(g))` built from census counts. Updating it
//! with the supplemental counts n^(g,y) gives the conjugate posterior
//! `Dir(η_g · C^(g) + n^(g,y))`. A point estimate of Pr[R | g, y] is then
//! combined with Pr[S | R] exactly as in BISG:
//!
//! ```text
//! Pr[R | g, s, y] ∝ Pr[R | g, y] · Pr[S = s | R]
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::AtomicU64;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::bisg::combine_with_surname;
use crate::domain::{normalize, AttributedRecord, Context, ContextualProxy, RaceDistribution, RaceSet};
use crate::error::{Error, Result};
use crate::estimators::{bayes_estimate, weighted_estimate_for, ContextAveraging, ContextualPredictions};
use crate::tables::{all_group_counts, format_significant, GeoTable, SupplementalDataset, SurnameTable};

/// Pseudo-count every concentration is floored at, so that η = 0 with an
/// empty cell still gives a proper posterior.
pub const ALPHA_FLOOR: f64 = 1e-3;

/// η grid searched when tuning: {0, 0.1, ..., 1}.
pub fn default_eta_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Dirichlet concentration for one (geography, context) cell.
///
/// The raw parameters `η·C + n` are kept so that sequential updates stay
/// exact; [`concentration`](Self::concentration) applies the floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    raw: Vec<f64>,
}

impl DirichletParams {
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() || raw.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::InvalidConfig(format!("invalid Dirichlet parameters {raw:?}")));
        }
        Ok(Self { raw })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    /// Unfloored `η·C + n`.
    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    /// Floored concentration vector, every entry ≥ [`ALPHA_FLOOR`].
    pub fn concentration(&self) -> Vec<f64> {
        self.raw.iter().map(|a| a.max(ALPHA_FLOOR)).collect()
    }

    /// Conjugate update with further multinomial counts.
    pub fn update(&self, counts: &[f64]) -> Result<Self> {
        check_counts(counts, self.len())?;
        Ok(Self {
            raw: self.raw.iter().zip(counts).map(|(a, n)| a + n).collect(),
        })
    }

    /// Posterior mean `α / Σα`.
    pub fn mean(&self) -> RaceDistribution {
        normalize(&self.concentration()).expect("floored concentration is positive")
    }

    /// One draw from `Dir(α)` via normalized Gamma variates.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> RaceDistribution {
        let draws: Vec<f64> = self
            .concentration()
            .iter()
            .map(|a| Gamma::new(*a, 1.0).expect("positive shape").sample(rng))
            .collect();
        // Tiny shapes can underflow every draw to zero.
        normalize(&draws).unwrap_or_else(|_| self.mean())
    }
}

/// Posterior `Dir(η·C + n)`.
pub fn fit_posterior(census: &[f64], observed: &[f64], eta: f64) -> Result<DirichletParams> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidConfig(format!("eta {eta} outside [0, 1]")));
    }
    check_counts(census, census.len())?;
    check_counts(observed, census.len())?;
    Ok(DirichletParams {
        raw: census.iter().zip(observed).map(|(c, n)| eta * c + n).collect(),
    })
}

fn check_counts(counts: &[f64], k: usize) -> Result<()> {
    if counts.len() != k {
        return Err(Error::LengthMismatch {
            expected: k,
            found: counts.len(),
        });
    }
    if counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::InvalidConfig(format!("counts must be nonnegative: {counts:?}")));
    }
    Ok(())
}

/// How the cell-level estimate of Pr[R | g, y] is read off the posterior.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointEstimate {
    #[default]
    PosteriorMean,
    /// One seeded Dirichlet draw per cell, fixed at construction.
    Sampled { seed: u64 },
}

/// Estimator used to score η candidates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TuningEstimator {
    #[default]
    Bayes,
    Weighted,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EtaSetting {
    Fixed(f64),
    Tuned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbisgConfig {
    pub eta: EtaSetting,
    pub grid: Vec<f64>,
    pub tuning_estimator: TuningEstimator,
    pub averaging: ContextAveraging,
    /// η for geographies without training records when tuning.
    pub default_eta: f64,
    pub point_estimate: PointEstimate,
}

impl Default for CbisgConfig {
    fn default() -> Self {
        Self {
            eta: EtaSetting::Fixed(0.0),
            grid: default_eta_grid(),
            tuning_estimator: TuningEstimator::Bayes,
            averaging: ContextAveraging::WithinContext,
            default_eta: 0.0,
            point_estimate: PointEstimate::PosteriorMean,
        }
    }
}

type Cell = (String, Context);

/// Fitted cBISG proxy: one posterior per (geography, context) cell.
#[derive(Debug)]
pub struct CbisgModel {
    race_set: RaceSet,
    surnames: SurnameTable,
    posteriors: BTreeMap<Cell, DirichletParams>,
    eta: BTreeMap<String, f64>,
    estimates: BTreeMap<Cell, RaceDistribution>,
    point_estimate: PointEstimate,
    zero_product_fallbacks: AtomicU64,
}

impl CbisgModel {
    /// Assembles a model from per-cell posteriors.
    pub fn from_posteriors(
        race_set: RaceSet,
        surnames: SurnameTable,
        posteriors: BTreeMap<Cell, DirichletParams>,
        eta: BTreeMap<String, f64>,
        point_estimate: PointEstimate,
    ) -> Result<Self> {
        if surnames.race_set() != &race_set {
            return Err(Error::InvalidRaceSet("surname table uses a different race order".into()));
        }
        if let Some(p) = posteriors.values().find(|p| p.len() != race_set.len()) {
            return Err(Error::LengthMismatch {
                expected: race_set.len(),
                found: p.len(),
            });
        }
        let estimates = match point_estimate {
            PointEstimate::PosteriorMean => posteriors.iter().map(|(cell, p)| (cell.clone(), p.mean())).collect(),
            PointEstimate::Sampled { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                posteriors
                    .iter()
                    .map(|(cell, p)| (cell.clone(), p.sample(&mut rng)))
                    .collect()
            }
        };
        Ok(Self {
            race_set,
            surnames,
            posteriors,
            eta,
            estimates,
            point_estimate,
            zero_product_fallbacks: AtomicU64::new(0),
        })
    }

    pub fn race_set(&self) -> &RaceSet {
        &self.race_set
    }

    pub fn surname_table(&self) -> &SurnameTable {
        &self.surnames
    }

    pub fn posterior(&self, geo: &str, context: Context) -> Option<&DirichletParams> {
        self.posteriors.get(&(geo.to_string(), context))
    }

    pub fn eta(&self, geo: &str) -> Option<f64> {
        self.eta.get(geo).copied()
    }

    pub fn etas(&self) -> &BTreeMap<String, f64> {
        &self.eta
    }

    pub fn point_estimate_mode(&self) -> PointEstimate {
        self.point_estimate
    }

    /// Cell-level estimate of Pr[R | g, y].
    pub fn cell_estimate(&self, geo: &str, context: Context) -> Result<&RaceDistribution> {
        let key = (geo.to_string(), context);
        if let Some(estimate) = self.estimates.get(&key) {
            return Ok(estimate);
        }
        if self.eta.contains_key(geo) || self.estimates.contains_key(&(geo.to_string(), context.flip())) {
            Err(Error::UnfittedContext {
                geo: geo.to_string(),
                context: context.as_u8(),
            })
        } else {
            Err(Error::UnknownGeo(geo.to_string()))
        }
    }

    pub fn predict(&self, surname: &str, geo: &str, context: Context) -> Result<RaceDistribution> {
        let prior = self.cell_estimate(geo, context)?.clone();
        combine_with_surname(&self.surnames, surname, prior, &self.zero_product_fallbacks)
    }

    /// Writes `geo,y,<alpha_1>,...,<alpha_K>,eta` rows (raw concentrations).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        let alpha_cols: Vec<String> = self.race_set.labels().iter().map(|l| format!("alpha_{l}")).collect();
        writeln!(out, "geo,y,{},eta", alpha_cols.join(",")).map_err(io)?;
        for ((geo, y), params) in &self.posteriors {
            let alphas: Vec<String> = params.raw().iter().map(|a| format_significant(*a, 17)).collect();
            let eta = self.eta.get(geo).copied().unwrap_or(0.0);
            writeln!(out, "{geo},{y},{},{}", alphas.join(","), format_significant(eta, 17)).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn read_csv(path: &Path, surnames: SurnameTable, point_estimate: PointEstimate) -> Result<Self> {
        let race_set = surnames.race_set().clone();
        let k = race_set.len();
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut reader = csv::Reader::from_reader(file);
        let header = reader.headers()?.clone();
        let expected: Vec<String> = ["geo".to_string(), "y".to_string()]
            .into_iter()
            .chain(race_set.labels().iter().map(|l| format!("alpha_{l}")))
            .chain(std::iter::once("eta".to_string()))
            .collect();
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::InvalidModel(format!(
                "cBISG model header must be {}",
                expected.join(",")
            )));
        }
        let mut posteriors = BTreeMap::new();
        let mut eta = BTreeMap::new();
        for row in reader.records() {
            let row = row?;
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse()
                    .map_err(|_| Error::InvalidModel(format!("non-numeric value {s:?}")))
            };
            let geo = row[0].to_string();
            let context = Context::parse(&row[1])?;
            let raw = (0..k).map(|j| parse(&row[2 + j])).collect::<Result<Vec<_>>>()?;
            posteriors.insert((geo.clone(), context), DirichletParams::from_raw(raw)?);
            eta.insert(geo, parse(&row[2 + k])?);
        }
        Self::from_posteriors(race_set, surnames, posteriors, eta, point_estimate)
    }
}

impl Clone for CbisgModel {
    fn clone(&self) -> Self {
        Self {
            race_set: self.race_set.clone(),
            surnames: self.surnames.clone(),
            posteriors: self.posteriors.clone(),
            eta: self.eta.clone(),
            estimates: self.estimates.clone(),
            point_estimate: self.point_estimate,
            zero_product_fallbacks: AtomicU64::new(0),
        }
    }
}

impl ContextualProxy for CbisgModel {
    fn num_races(&self) -> usize {
        self.race_set.len()
    }

    fn evaluate(&self, record: &AttributedRecord, context: Context) -> Result<RaceDistribution> {
        self.predict(&record.surname, &record.geo, context)
    }
}

/// Fits one posterior per (geography in `geo`, context) from the labeled
/// training data. Training records in geographies absent from `geo` are
/// skipped with a warning.
pub fn fit_cbisg(
    geo: &GeoTable,
    surnames: &SurnameTable,
    train: &SupplementalDataset,
    config: &CbisgConfig,
) -> Result<CbisgModel> {
    train.require_labels()?;
    if geo.race_set() != &train.race_set || surnames.race_set() != &train.race_set {
        return Err(Error::InvalidRaceSet("tables and training data use different race orders".into()));
    }
    let unknown = train.records.iter().filter(|r| !geo.contains(&r.geo)).count();
    if unknown > 0 {
        warn!("{unknown} training records reference geographies missing from the census table; skipped");
    }
    let counts = all_group_counts(train)?;
    let by_geo = records_by_geo(train);
    let k = train.race_set.len();
    let zeros = vec![0.0; k];

    let mut posteriors = BTreeMap::new();
    let mut etas = BTreeMap::new();
    for (g, census) in geo.iter() {
        let eta = match config.eta {
            EtaSetting::Fixed(eta) => eta,
            EtaSetting::Tuned => match by_geo.get(g) {
                Some(indices) => {
                    let local = SupplementalDataset {
                        race_set: train.race_set.clone(),
                        records: indices.iter().map(|i| train.records[*i].clone()).collect(),
                        encoding: train.encoding.clone(),
                    };
                    tune_eta_in_geo(census, surnames, &local, &config.grid, config)?.eta
                }
                None => config.default_eta,
            },
        };
        for y in Context::BOTH {
            let observed = counts.get(&(g.to_string(), y)).unwrap_or(&zeros);
            posteriors.insert((g.to_string(), y), fit_posterior(census, observed, eta)?);
        }
        etas.insert(g.to_string(), eta);
    }
    CbisgModel::from_posteriors(
        train.race_set.clone(),
        surnames.clone(),
        posteriors,
        etas,
        config.point_estimate,
    )
}

fn records_by_geo(train: &SupplementalDataset) -> BTreeMap<&str, Vec<usize>> {
    let mut by_geo: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, record) in train.records.iter().enumerate() {
        by_geo.entry(record.geo.as_str()).or_default().push(i);
    }
    by_geo
}

/// Result of an η search in one geography.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaSearch {
    pub eta: f64,
    /// Estimation error at each grid point, in grid order.
    pub errors: Vec<(f64, f64)>,
}

/// Picks the η for geography `geo` minimizing disparity-estimation error on
/// the training records located there. Falls back to
/// `config.default_eta` when the geography has no training records.
pub fn tune_eta(
    geo: &str,
    census: &GeoTable,
    surnames: &SurnameTable,
    train: &SupplementalDataset,
    config: &CbisgConfig,
) -> Result<f64> {
    let local = train.filter(|r| r.geo == geo);
    if local.is_empty() {
        warn!("no training data in geography {geo:?}; using default eta {}", config.default_eta);
        return Ok(config.default_eta);
    }
    Ok(tune_eta_in_geo(census.counts(geo)?, surnames, &local, &config.grid, config)?.eta)
}

/// Grid search over `grid` for one geography whose training records are
/// `local`. The error for a candidate η is Σ_r |μ̂(r) − μ(r)| over races
/// present in `local`. Ties (within 1e-12) go to the smaller η.
pub fn tune_eta_in_geo(
    census: &[f64],
    surnames: &SurnameTable,
    local: &SupplementalDataset,
    grid: &[f64],
    config: &CbisgConfig,
) -> Result<EtaSearch> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("eta grid is empty".into()));
    }
    local.require_labels()?;
    let k = local.race_set.len();
    let geo = local.records[0].geo.clone();
    let mut counts = [vec![0.0; k], vec![0.0; k]];
    let mut members = vec![0.0; k];
    let mut positives = vec![0.0; k];
    for record in &local.records {
        let r = record.race.expect("labels checked");
        counts[record.context.index()][r] += 1.0;
        members[r] += 1.0;
        if record.context == Context::Positive {
            positives[r] += 1.0;
        }
    }

    let mut sorted: Vec<f64> = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();

    let mut errors = Vec::with_capacity(sorted.len());
    for &eta in &sorted {
        let mut posteriors = BTreeMap::new();
        for y in Context::BOTH {
            posteriors.insert((geo.clone(), y), fit_posterior(census, &counts[y.index()], eta)?);
        }
        let model = CbisgModel::from_posteriors(
            local.race_set.clone(),
            surnames.clone(),
            posteriors,
            BTreeMap::from([(geo.clone(), eta)]),
            config.point_estimate,
        )?;
        let predictions = ContextualPredictions::evaluate(&model, local)?;
        let mut error = 0.0;
        for r in (0..k).filter(|r| members[*r] > 0.0) {
            let truth = positives[r] / members[r];
            let estimate = match config.tuning_estimator {
                TuningEstimator::Bayes => bayes_estimate(&predictions, r, config.averaging),
                TuningEstimator::Weighted => weighted_estimate_for(&predictions, r),
            };
            error += match estimate {
                Ok(v) => (v - truth).abs(),
                Err(Error::ZeroDenominator(_) | Error::ZeroMass(_)) => 1.0,
                Err(e) => return Err(e),
            };
        }
        errors.push((eta, error));
    }

    let mut best = errors[0];
    for &(eta, error) in &errors[1..] {
        if error < best.1 - 1e-12 {
            best = (eta, error);
        }
    }
    Ok(EtaSearch { eta: best.0, errors })
}
