//! Synthetic populations over (race, geography, surname, outcome) with an
//! exactly enumerated joint table for oracle computations.
//!
//! Cell mass is `θ_r · Pr[g|r] · Pr[s|r,g] · Pr[y|r,g]`, where
//! `Pr[s|r,g] = (1−v)·Pr[s|r] + v·Q(s|r,g)` and `v` is the configured
//! assumption-1 violation. With `v = 0` surnames are independent of
//! geography and outcome given race.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{normalize, AttributedRecord, Context, ContextualProxy, RaceDistribution, RaceSet};
use crate::error::{Error, Result};
use crate::tables::{format_significant, CovariateEncoding, GeoTable, SupplementalDataset, SurnameTable};

/// Scale applied to masses when emitting census-style count tables.
pub const CENSUS_POPULATION: f64 = 1e8;

const MASS_TOLERANCE: f64 = 1e-12;

/// Outcome rates `Pr[Y=1|r,g] = σ(logit(base_rate) + race_effects[r] + u_g)`
/// with `u_g ~ N(0, geo_spread²)`. Used when no explicit table is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutcomeSpec {
    pub base_rate: f64,
    /// Logit shift per race; empty means no race effect.
    pub race_effects: Vec<f64>,
    pub geo_spread: f64,
}

impl Default for OutcomeSpec {
    fn default() -> Self {
        Self {
            base_rate: 0.5,
            race_effects: vec![0.0, -0.8, -0.4],
            geo_spread: 0.5,
        }
    }
}

/// Covariates attached to sampled records: `loading_r[r][j] + loading_g[g][j] + noise·N(0,1)`.
/// They are not part of the joint table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateSpec {
    pub count: usize,
    pub race_loading: f64,
    pub geo_loading: f64,
    pub noise: f64,
}

impl Default for CovariateSpec {
    fn default() -> Self {
        Self {
            count: 0,
            race_loading: 1.0,
            geo_loading: 0.5,
            noise: 1.0,
        }
    }
}

/// Data-generating process. Unset tables are drawn from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub races: Vec<String>,
    pub n_geos: usize,
    pub n_surnames: usize,
    pub theta: Option<Vec<f64>>,
    pub geo_given_race: Option<Vec<Vec<f64>>>,
    pub surname_given_race: Option<Vec<Vec<f64>>>,
    pub assumption1_violation: f64,
    /// `outcome_model[r][g] = Pr[Y=1 | R=r, G=g]`.
    pub outcome_model: Option<Vec<Vec<f64>>>,
    /// Dirichlet concentration for a drawn θ.
    pub theta_concentration: f64,
    /// Dirichlet concentration for drawn Pr[G|R] rows; small means segregated.
    pub geo_concentration: f64,
    /// Dirichlet concentration for drawn surname rows; small means informative.
    pub surname_concentration: f64,
    pub outcome: OutcomeSpec,
    pub covariates: CovariateSpec,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            races: vec!["r1".into(), "r2".into(), "r3".into()],
            n_geos: 50,
            n_surnames: 200,
            theta: None,
            geo_given_race: None,
            surname_given_race: None,
            assumption1_violation: 0.0,
            outcome_model: None,
            theta_concentration: 4.0,
            geo_concentration: 0.5,
            surname_concentration: 0.3,
            outcome: OutcomeSpec::default(),
            covariates: CovariateSpec::default(),
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Outcome depends on geography only, so `Y ⊥ R | G`.
    pub fn independent_outcomes(mut self) -> Self {
        self.outcome.race_effects = vec![0.0; self.races.len()];
        self
    }

    pub fn with_race_effects(mut self, effects: Vec<f64>) -> Self {
        self.outcome.race_effects = effects;
        self
    }

    pub fn with_violation(mut self, violation: f64) -> Self {
        self.assumption1_violation = violation;
        self
    }

    /// Party-membership-like world: a majority group, a large group with
    /// very high membership and a small group in between.
    pub fn party_composition(seed: u64) -> Self {
        Self {
            races: vec!["white".into(), "black".into(), "hispanic".into()],
            theta: Some(vec![0.68, 0.24, 0.08]),
            outcome: OutcomeSpec {
                base_rate: 0.5,
                race_effects: vec![-0.62, 1.73, 0.2],
                geo_spread: 0.3,
            },
            seed,
            ..Self::default()
        }
    }
}

/// Exact joint distribution over (r, g, s, y).
#[derive(Debug, Clone)]
pub struct JointTable {
    races: RaceSet,
    geos: Vec<String>,
    surnames: Vec<String>,
    /// Mass at `((g·S + s)·2 + y)·K + r`.
    mass: Vec<f64>,
    theta: Vec<f64>,
    geo_given_race: Vec<Vec<f64>>,
    outcome: Vec<Vec<f64>>,
    covariate_loadings: Option<CovariateLoadings>,
}

#[derive(Debug, Clone)]
struct CovariateLoadings {
    spec: CovariateSpec,
    race: Vec<Vec<f64>>,
    geo: Vec<Vec<f64>>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn dirichlet(rng: &mut impl Rng, alpha: f64, len: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    loop {
        let draws: Vec<f64> = (0..len).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|d| d / total).collect();
        }
    }
}

fn check_row(row: &[f64], len: usize, what: &str) -> Result<()> {
    if row.len() != len {
        return Err(Error::InvalidConfig(format!("{what}: expected {len} entries, found {}", row.len())));
    }
    if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidConfig(format!("{what}: entries must lie in [0, 1]")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("{what}: sums to {total}, not 1")));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Builds the exact joint table for `config`.
pub fn build_joint(config: &DgpConfig) -> Result<JointTable> {
    let races = RaceSet::new(config.races.iter().cloned())?;
    let (k, n_geo, n_sur) = (races.len(), config.n_geos, config.n_surnames);
    if n_geo == 0 || n_sur == 0 {
        return Err(Error::InvalidConfig("n_geos and n_surnames must be positive".into()));
    }
    let v = config.assumption1_violation;
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidConfig(format!("assumption1_violation {v} outside [0, 1]")));
    }
    for (name, c) in [
        ("theta_concentration", config.theta_concentration),
        ("geo_concentration", config.geo_concentration),
        ("surname_concentration", config.surname_concentration),
    ] {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
    }

    let theta = match &config.theta {
        Some(t) => {
            check_row(t, k, "theta")?;
            t.clone()
        }
        None => dirichlet(&mut stream(config.seed, 1), config.theta_concentration, k),
    };
    let geo_given_race = match &config.geo_given_race {
        Some(rows) => {
            if rows.len() != k {
                return Err(Error::InvalidConfig(format!("geo_given_race needs {k} rows")));
            }
            for (r, row) in rows.iter().enumerate() {
                check_row(row, n_geo, &format!("geo_given_race[{r}]"))?;
            }
            rows.clone()
        }
        None => {
            let mut rng = stream(config.seed, 2);
            (0..k).map(|_| dirichlet(&mut rng, config.geo_concentration, n_geo)).collect()
        }
    };
    let surname_given_race = match &config.surname_given_race {
        Some(rows) => {
            if rows.len() != k {
                return Err(Error::InvalidConfig(format!("surname_given_race needs {k} rows")));
            }
            for (r, row) in rows.iter().enumerate() {
                check_row(row, n_sur, &format!("surname_given_race[{r}]"))?;
            }
            rows.clone()
        }
        None => {
            let mut rng = stream(config.seed, 3);
            (0..k).map(|_| dirichlet(&mut rng, config.surname_concentration, n_sur)).collect()
        }
    };
    // Geography-specific surname rows; only used when v > 0.
    let local_surnames: Vec<Vec<Vec<f64>>> = if v > 0.0 {
        let mut rng = stream(config.seed, 4);
        (0..k)
            .map(|_| (0..n_geo).map(|_| dirichlet(&mut rng, config.surname_concentration, n_sur)).collect())
            .collect()
    } else {
        Vec::new()
    };
    let outcome = match &config.outcome_model {
        Some(rows) => {
            if rows.len() != k || rows.iter().any(|row| row.len() != n_geo) {
                return Err(Error::InvalidConfig(format!("outcome_model must be {k} × {n_geo}")));
            }
            if rows.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::InvalidConfig("outcome rates must lie in [0, 1]".into()));
            }
            rows.clone()
        }
        None => {
            let spec = &config.outcome;
            if !(spec.base_rate > 0.0 && spec.base_rate < 1.0) {
                return Err(Error::InvalidConfig("outcome.base_rate must lie in (0, 1)".into()));
            }
            let effects = match spec.race_effects.len() {
                0 => vec![0.0; k],
                n if n == k => spec.race_effects.clone(),
                n => return Err(Error::InvalidConfig(format!("outcome.race_effects has {n} entries, expected {k}"))),
            };
            if !(spec.geo_spread >= 0.0) {
                return Err(Error::InvalidConfig("outcome.geo_spread must be nonnegative".into()));
            }
            let mut rng = stream(config.seed, 5);
            let geo_effects: Vec<f64> = (0..n_geo)
                .map(|_| spec.geo_spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let base = (spec.base_rate / (1.0 - spec.base_rate)).ln();
            effects
                .iter()
                .map(|e| geo_effects.iter().map(|u| sigmoid(base + e + u)).collect())
                .collect()
        }
    };
    let covariate_loadings = (config.covariates.count > 0).then(|| {
        let spec = config.covariates.clone();
        let mut rng = stream(config.seed, 6);
        let mut draw = |rows: usize, scale: f64| -> Vec<Vec<f64>> {
            (0..rows)
                .map(|_| (0..spec.count).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
                .collect()
        };
        let race = draw(k, spec.race_loading);
        let geo = draw(n_geo, spec.geo_loading);
        CovariateLoadings { spec, race, geo }
    });

    let mut mass = vec![0.0; n_geo * n_sur * 2 * k];
    for g in 0..n_geo {
        for r in 0..k {
            let p_rg = theta[r] * geo_given_race[r][g];
            if p_rg == 0.0 {
                continue;
            }
            let p1 = outcome[r][g];
            for s in 0..n_sur {
                let p_s = if v > 0.0 {
                    (1.0 - v) * surname_given_race[r][s] + v * local_surnames[r][g][s]
                } else {
                    surname_given_race[r][s]
                };
                let base = ((g * n_sur + s) * 2) * k + r;
                mass[base] = p_rg * p_s * (1.0 - p1);
                mass[base + k] = p_rg * p_s * p1;
            }
        }
    }
    let total: f64 = mass.iter().sum();
    if (total - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::InvalidConfig(format!("joint masses sum to {total}")));
    }
    let geo_width = n_geo.to_string().len().max(3);
    let sur_width = n_sur.to_string().len().max(4);
    Ok(JointTable {
        races,
        geos: (0..n_geo).map(|g| format!("G{:0w$}", g + 1, w = geo_width)).collect(),
        surnames: (0..n_sur).map(|s| format!("S{:0w$}", s + 1, w = sur_width)).collect(),
        mass,
        theta,
        geo_given_race,
        outcome,
        covariate_loadings,
    })
}

impl JointTable {
    pub fn race_set(&self) -> &RaceSet {
        &self.races
    }

    pub fn k(&self) -> usize {
        self.races.len()
    }

    pub fn geos(&self) -> &[String] {
        &self.geos
    }

    pub fn surnames(&self) -> &[String] {
        &self.surnames
    }

    pub fn geo_index(&self, name: &str) -> Option<usize> {
        let n: usize = name.strip_prefix('G')?.parse().ok()?;
        (n >= 1 && n <= self.geos.len() && self.geos[n - 1] == name).then(|| n - 1)
    }

    pub fn surname_index(&self, name: &str) -> Option<usize> {
        let n: usize = name.strip_prefix('S')?.parse().ok()?;
        (n >= 1 && n <= self.surnames.len() && self.surnames[n - 1] == name).then(|| n - 1)
    }

    fn offset(&self, g: usize, s: usize, y: usize) -> usize {
        ((g * self.surnames.len() + s) * 2 + y) * self.k()
    }

    pub fn mass(&self, r: usize, g: usize, s: usize, y: Context) -> f64 {
        self.mass[self.offset(g, s, y.index()) + r]
    }

    /// Per-race masses in cell (g, s, y).
    pub fn cell(&self, g: usize, s: usize, y: Context) -> &[f64] {
        let o = self.offset(g, s, y.index());
        &self.mass[o..o + self.k()]
    }

    /// Configured Pr[Y=1 | R=r, G=g].
    pub fn outcome_rate(&self, r: usize, g: usize) -> f64 {
        self.outcome[r][g]
    }

    /// Configured Pr[G=g | R=r].
    pub fn geo_given_race(&self, r: usize, g: usize) -> f64 {
        self.geo_given_race[r][g]
    }

    /// Marginal race proportions θ. Equal to the configured θ up to rounding.
    pub fn theta(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.k()];
        for cell in self.mass.chunks(self.k()) {
            for (o, m) in out.iter_mut().zip(cell) {
                *o += m;
            }
        }
        out
    }

    /// Configured θ as given or drawn.
    pub fn configured_theta(&self) -> &[f64] {
        &self.theta
    }

    /// Pr[Y = 1].
    pub fn nu(&self) -> f64 {
        self.mass
            .chunks(self.k())
            .enumerate()
            .filter(|(i, _)| i % 2 == 1)
            .map(|(_, c)| c.iter().sum::<f64>())
            .sum()
    }

    /// Joint masses Pr[R=r, Y=y] as `[y][r]`.
    pub fn race_context_mass(&self) -> [Vec<f64>; 2] {
        let mut out = [vec![0.0; self.k()], vec![0.0; self.k()]];
        for (i, cell) in self.mass.chunks(self.k()).enumerate() {
            for (o, m) in out[i % 2].iter_mut().zip(cell) {
                *o += m;
            }
        }
        out
    }

    /// μ_f(r) = Pr[Y=1 | R=r].
    pub fn positive_rate(&self, r: usize) -> Result<f64> {
        let joint = self.race_context_mass();
        let total = joint[0][r] + joint[1][r];
        if total <= 0.0 {
            return Err(Error::ZeroMassEvent(format!("R={}", self.races.label(r))));
        }
        Ok(joint[1][r] / total)
    }

    /// φ = Pr[R | Y=y].
    pub fn race_given_context(&self, y: Context) -> Result<RaceDistribution> {
        let joint = self.race_context_mass();
        normalize(&joint[y.index()]).map_err(|_| Error::ZeroMassEvent(format!("Y={y}")))
    }

    /// Pr[R | G=g, S=s].
    pub fn race_given_geo_surname(&self, g: usize, s: usize) -> Result<RaceDistribution> {
        let sum: Vec<f64> = self
            .cell(g, s, Context::Negative)
            .iter()
            .zip(self.cell(g, s, Context::Positive))
            .map(|(a, b)| a + b)
            .collect();
        normalize(&sum).map_err(|_| self.zero_event(Some(g), Some(s), None))
    }

    /// Pr[R | G=g, S=s, Y=y].
    pub fn race_given_geo_surname_context(&self, g: usize, s: usize, y: Context) -> Result<RaceDistribution> {
        normalize(self.cell(g, s, y)).map_err(|_| self.zero_event(Some(g), Some(s), Some(y)))
    }

    /// Pr[R | G=g, Y=y].
    pub fn race_given_geo_context(&self, g: usize, y: Context) -> Result<RaceDistribution> {
        let mut sum = vec![0.0; self.k()];
        for s in 0..self.surnames.len() {
            for (t, m) in sum.iter_mut().zip(self.cell(g, s, y)) {
                *t += m;
            }
        }
        normalize(&sum).map_err(|_| self.zero_event(Some(g), None, Some(y)))
    }

    /// Pr[R | G=g].
    pub fn race_given_geo(&self, g: usize) -> Result<RaceDistribution> {
        let mut sum = vec![0.0; self.k()];
        for s in 0..self.surnames.len() {
            for y in Context::BOTH {
                for (t, m) in sum.iter_mut().zip(self.cell(g, s, y)) {
                    *t += m;
                }
            }
        }
        normalize(&sum).map_err(|_| self.zero_event(Some(g), None, None))
    }

    /// Pr[G=g, S=s] (both contexts, all races).
    pub fn geo_surname_mass(&self, g: usize, s: usize) -> f64 {
        Context::BOTH.iter().map(|y| self.cell(g, s, *y).iter().sum::<f64>()).sum()
    }

    fn zero_event(&self, g: Option<usize>, s: Option<usize>, y: Option<Context>) -> Error {
        let mut parts = Vec::new();
        if let Some(g) = g {
            parts.push(format!("G={}", self.geos[g]));
        }
        if let Some(s) = s {
            parts.push(format!("S={}", self.surnames[s]));
        }
        if let Some(y) = y {
            parts.push(format!("Y={y}"));
        }
        Error::ZeroMassEvent(parts.join(","))
    }

    /// Census-style surname counts: `CENSUS_POPULATION · Pr[S=s, R=r]`. The
    /// implied Pr[S|R] is exact because every surname is tabulated.
    pub fn surname_table(&self) -> SurnameTable {
        let k = self.k();
        let mut rows = vec![vec![0.0; k]; self.surnames.len()];
        for g in 0..self.geos.len() {
            for (s, row) in rows.iter_mut().enumerate() {
                for y in Context::BOTH {
                    for (t, m) in row.iter_mut().zip(self.cell(g, s, y)) {
                        *t += m;
                    }
                }
            }
        }
        let named = self
            .surnames
            .iter()
            .cloned()
            .zip(rows.into_iter().map(|row| row.into_iter().map(|m| m * CENSUS_POPULATION).collect()));
        SurnameTable::from_counts(self.races.clone(), named).expect("simulated counts are valid")
    }

    /// Census-style geography counts: `CENSUS_POPULATION · Pr[G=g, R=r]`.
    /// Geographies with no mass at all get a unit count for every race so
    /// the table stays loadable.
    pub fn geo_table(&self) -> GeoTable {
        let rows = (0..self.geos.len()).map(|g| {
            let mut row = vec![0.0; self.k()];
            for s in 0..self.surnames.len() {
                for y in Context::BOTH {
                    for (t, m) in row.iter_mut().zip(self.cell(g, s, y)) {
                        *t += m * CENSUS_POPULATION;
                    }
                }
            }
            if row.iter().all(|c| *c == 0.0) {
                row = vec![1.0; self.k()];
            }
            (self.geos[g].clone(), row)
        });
        GeoTable::from_counts(self.races.clone(), rows).expect("simulated counts are valid")
    }

    fn decode(&self, index: usize) -> (usize, usize, usize, usize) {
        let k = self.k();
        let r = index % k;
        let rest = index / k;
        let y = rest % 2;
        let rest = rest / 2;
        let s = rest % self.surnames.len();
        let g = rest / self.surnames.len();
        (r, g, s, y)
    }

    fn covariate_encoding(&self) -> CovariateEncoding {
        match &self.covariate_loadings {
            Some(l) => {
                let names: Vec<String> = (1..=l.spec.count).map(|j| format!("z{j}")).collect();
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                CovariateEncoding::numeric(&refs)
            }
            None => CovariateEncoding::default(),
        }
    }

    fn make_record(&self, id: String, r: usize, g: usize, s: usize, y: usize, rng: &mut ChaCha8Rng) -> AttributedRecord {
        let context = if y == 1 { Context::Positive } else { Context::Negative };
        let mut record = AttributedRecord::new(id, &self.surnames[s], self.geos[g].clone(), context).with_race(r);
        if let Some(l) = &self.covariate_loadings {
            record.covariates = (0..l.spec.count)
                .map(|j| l.race[r][j] + l.geo[g][j] + l.spec.noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
        }
        record
    }

    /// `n` i.i.d. labeled records, deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<SupplementalDataset> {
        if n == 0 {
            return Err(Error::InvalidConfig("sample size must be at least 1".into()));
        }
        let index = WeightedIndex::new(&self.mass).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = n.to_string().len();
        let records = (0..n)
            .map(|i| {
                let (r, g, s, y) = self.decode(index.sample(&mut rng));
                self.make_record(format!("p{:0w$}", i, w = width), r, g, s, y, &mut rng)
            })
            .collect();
        SupplementalDataset::new(self.races.clone(), records, self.covariate_encoding())
    }

    /// `per_cell` labeled records drawn from Pr[R, S | G=g, Y=y] for every
    /// (g, y) with positive mass, in geography-then-context order.
    pub fn sample_per_cell(&self, per_cell: usize, seed: u64) -> Result<SupplementalDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.k();
        let mut records = Vec::new();
        for g in 0..self.geos.len() {
            for y in 0..2 {
                let weights: Vec<f64> = (0..self.surnames.len())
                    .flat_map(|s| {
                        let o = self.offset(g, s, y);
                        self.mass[o..o + k].to_vec()
                    })
                    .collect();
                let Ok(index) = WeightedIndex::new(&weights) else {
                    continue;
                };
                for i in 0..per_cell {
                    let flat = index.sample(&mut rng);
                    let (s, r) = (flat / k, flat % k);
                    let id = format!("{}-{y}-{i}", self.geos[g]);
                    records.push(self.make_record(id, r, g, s, y, &mut rng));
                }
            }
        }
        SupplementalDataset::new(self.races.clone(), records, self.covariate_encoding())
    }

    /// One unlabeled record per positive-mass (g, s, y) cell, with its mass.
    /// Estimators evaluated on these weights are population-exact.
    pub fn population(&self) -> (Vec<AttributedRecord>, Vec<f64>) {
        let mut records = Vec::new();
        let mut weights = Vec::new();
        for g in 0..self.geos.len() {
            for s in 0..self.surnames.len() {
                for y in Context::BOTH {
                    let m: f64 = self.cell(g, s, y).iter().sum();
                    if m > 0.0 {
                        let id = format!("{}|{}|{y}", self.geos[g], self.surnames[s]);
                        records.push(AttributedRecord::new(id, &self.surnames[s], self.geos[g].clone(), y));
                        weights.push(m);
                    }
                }
            }
        }
        (records, weights)
    }

    /// Writes `r,g,s,y,mass` with 17 significant digits, skipping zero cells.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(out, "r,g,s,y,mass").map_err(io)?;
        for r in 0..self.k() {
            for g in 0..self.geos.len() {
                for s in 0..self.surnames.len() {
                    for y in Context::BOTH {
                        let m = self.mass(r, g, s, y);
                        if m > 0.0 {
                            writeln!(
                                out,
                                "{},{},{},{},{}",
                                self.races.label(r),
                                self.geos[g],
                                self.surnames[s],
                                y,
                                format_significant(m, 17)
                            )
                            .map_err(io)?;
                        }
                    }
                }
            }
        }
        out.flush().map_err(io)
    }

    /// Reads a table written by [`write_csv`](Self::write_csv). Geography and
    /// surname names must follow the simulator's naming.
    pub fn read_csv(path: &Path, races: &RaceSet) -> Result<Self> {
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut reader = csv::Reader::from_reader(file);
        let mut cells: Vec<(usize, String, String, Context, f64)> = Vec::new();
        for row in reader.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            let malformed = |reason: String| Error::MalformedRow {
                path: path.to_path_buf(),
                line,
                reason,
            };
            if row.len() != 5 {
                return Err(malformed(format!("expected 5 columns, found {}", row.len())));
            }
            let r = races.index_of(row[0].trim()).ok_or_else(|| Error::UnknownRace(row[0].to_string()))?;
            let y = Context::parse(&row[3])?;
            let m: f64 = row[4]
                .trim()
                .parse()
                .map_err(|_| malformed(format!("mass {:?} is not a number", &row[4])))?;
            if !(m >= 0.0 && m.is_finite()) {
                return Err(malformed(format!("mass {m} must be nonnegative")));
            }
            cells.push((r, row[1].trim().to_string(), row[2].trim().to_string(), y, m));
        }
        let index_of = |name: &str, prefix: char| -> Option<usize> { name.strip_prefix(prefix)?.parse::<usize>().ok() };
        let n_geo = cells.iter().filter_map(|c| index_of(&c.1, 'G')).max().unwrap_or(0);
        let n_sur = cells.iter().filter_map(|c| index_of(&c.2, 'S')).max().unwrap_or(0);
        if n_geo == 0 || n_sur == 0 {
            return Err(Error::InvalidModel("joint table has no recognizable cells".into()));
        }
        let k = races.len();
        let geo_width = n_geo.to_string().len().max(3);
        let sur_width = n_sur.to_string().len().max(4);
        let mut table = JointTable {
            races: races.clone(),
            geos: (0..n_geo).map(|g| format!("G{:0w$}", g + 1, w = geo_width)).collect(),
            surnames: (0..n_sur).map(|s| format!("S{:0w$}", s + 1, w = sur_width)).collect(),
            mass: vec![0.0; n_geo * n_sur * 2 * k],
            theta: Vec::new(),
            geo_given_race: Vec::new(),
            outcome: Vec::new(),
            covariate_loadings: None,
        };
        for (r, g, s, y, m) in cells {
            let gi = table.geo_index(&g).ok_or_else(|| Error::UnknownGeo(g.clone()))?;
            let si = table
                .surname_index(&s)
                .ok_or_else(|| Error::InvalidModel(format!("unrecognized surname {s}")))?;
            let o = table.offset(gi, si, y.index()) + r;
            table.mass[o] = m;
        }
        let total: f64 = table.mass.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidModel(format!("joint masses sum to {total}")));
        }
        table.theta = table.theta();
        let [neg, pos] = table.race_context_mass();
        table.geo_given_race = (0..k)
            .map(|r| {
                (0..n_geo)
                    .map(|g| {
                        let m: f64 = (0..n_sur)
                            .map(|s| Context::BOTH.iter().map(|y| table.mass(r, g, s, *y)).sum::<f64>())
                            .sum();
                        m / (neg[r] + pos[r])
                    })
                    .collect()
            })
            .collect();
        table.outcome = (0..k)
            .map(|r| {
                (0..n_geo)
                    .map(|g| {
                        let (m0, m1) = (0..n_sur).fold((0.0, 0.0), |(a, b), s| {
                            (a + table.mass(r, g, s, Context::Negative), b + table.mass(r, g, s, Context::Positive))
                        });
                        if m0 + m1 > 0.0 {
                            m1 / (m0 + m1)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(table)
    }

    /// Exact Pr[R | G, S, Y] as a contextual proxy.
    pub fn oracle_proxy(&self) -> OracleProxy {
        OracleProxy::build(self, true)
    }

    /// Exact, context-free Pr[R | G, S], the calibrated non-contextual proxy.
    pub fn oracle_noncontextual_proxy(&self) -> OracleProxy {
        OracleProxy::build(self, false)
    }
}

/// Table-exact proxy. Zero-mass cells fall back to Pr[R | Y=y] (contextual)
/// or θ (non-contextual); unknown or empty surnames use the geography-level
/// conditional.
#[derive(Debug, Clone)]
pub struct OracleProxy {
    k: usize,
    n_surnames: usize,
    geo_index: HashMap<String, usize>,
    surname_index: HashMap<String, usize>,
    /// `cells[(g·S + s)·2 + y]`.
    cells: Vec<RaceDistribution>,
    /// `geo_level[g·2 + y]`.
    geo_level: Vec<RaceDistribution>,
    contextual: bool,
}

impl OracleProxy {
    fn build(table: &JointTable, contextual: bool) -> Self {
        let k = table.k();
        let fallback = if contextual {
            [0, 1].map(|y| {
                table
                    .race_given_context(if y == 1 { Context::Positive } else { Context::Negative })
                    .unwrap_or_else(|_| RaceDistribution::uniform(k))
            })
        } else {
            let theta = normalize(&table.theta()).expect("table has mass");
            [theta.clone(), theta]
        };
        let mut cells = Vec::with_capacity(table.geos.len() * table.surnames.len() * 2);
        let mut geo_level = Vec::with_capacity(table.geos.len() * 2);
        for g in 0..table.geos.len() {
            for y in Context::BOTH {
                let d = if contextual {
                    table.race_given_geo_context(g, y)
                } else {
                    table.race_given_geo(g)
                };
                geo_level.push(d.unwrap_or_else(|_| fallback[y.index()].clone()));
            }
            for s in 0..table.surnames.len() {
                for y in Context::BOTH {
                    let d = if contextual {
                        table.race_given_geo_surname_context(g, s, y)
                    } else {
                        table.race_given_geo_surname(g, s)
                    };
                    cells.push(d.unwrap_or_else(|_| fallback[y.index()].clone()));
                }
            }
        }
        Self {
            k,
            n_surnames: table.surnames.len(),
            geo_index: table.geos.iter().enumerate().map(|(i, g)| (g.clone(), i)).collect(),
            surname_index: table.surnames.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect(),
            cells,
            geo_level,
            contextual,
        }
    }

    pub fn is_contextual(&self) -> bool {
        self.contextual
    }
}

impl ContextualProxy for OracleProxy {
    fn num_races(&self) -> usize {
        self.k
    }

    fn evaluate(&self, record: &AttributedRecord, context: Context) -> Result<RaceDistribution> {
        let g = *self
            .geo_index
            .get(&record.geo)
            .ok_or_else(|| Error::UnknownGeo(record.geo.clone()))?;
        let y = context.index();
        Ok(match self.surname_index.get(&record.surname) {
            Some(&s) => self.cells[(g * self.n_surnames + s) * 2 + y].clone(),
            None => self.geo_level[g * 2 + y].clone(),
        })
    }
}

/// `(1 − λ_y)·ω(x, y) + λ_y·target_y`: a proxy with controlled departure
/// from `base`.
#[derive(Debug, Clone)]
pub struct MixedProxy<P> {
    base: P,
    targets: [RaceDistribution; 2],
    weights: [f64; 2],
}

impl<P: ContextualProxy> MixedProxy<P> {
    pub fn new(base: P, targets: [RaceDistribution; 2], weights: [f64; 2]) -> Result<Self> {
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::InvalidConfig("mixing weights must lie in [0, 1]".into()));
        }
        if targets.iter().any(|t| t.len() != base.num_races()) {
            return Err(Error::LengthMismatch {
                expected: base.num_races(),
                found: targets[0].len().min(targets[1].len()),
            });
        }
        Ok(Self { base, targets, weights })
    }

    /// Mixes toward uniform with the same weight at both contexts.
    pub fn toward_uniform(base: P, weight: f64) -> Result<Self> {
        let u = RaceDistribution::uniform(base.num_races());
        Self::new(base, [u.clone(), u], [weight, weight])
    }
}

impl<P: ContextualProxy> ContextualProxy for MixedProxy<P> {
    fn num_races(&self) -> usize {
        self.base.num_races()
    }

    fn evaluate(&self, record: &AttributedRecord, context: Context) -> Result<RaceDistribution> {
        let base = self.base.evaluate(record, context)?;
        let y = context.index();
        base.mix(&self.targets[y], self.weights[y])
    }
}
