//! Mean-consistency measurement and numerical checks of the bias bounds
//! linking consistency violation to Bayes-estimator error.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::domain::{normalize, Context, ContextualProxy, RaceDistribution};
use crate::error::{Error, Result};
use crate::estimators::{bayes_estimate, ContextAveraging, ContextualPredictions};
use crate::simulator::{build_joint, DgpConfig, JointTable, MixedProxy};
use crate::tables::SupplementalDataset;

/// Consistency of one race at one context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextConsistency {
    pub race: String,
    pub context: u8,
    /// Mean proxy output ω̄ at this context.
    pub omega_bar: f64,
    /// Pr[R = race | Y = context].
    pub phi: f64,
    pub violation: f64,
}

/// Per-race global quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceSummary {
    pub race: String,
    /// Pr[R = race].
    pub theta: f64,
    /// Marginal proxy mass ν·ω̄₁ + (1−ν)·ω̄₀.
    pub rho: f64,
    /// |ρ − θ|.
    pub gamma: f64,
    pub mu_true: f64,
    pub mu_bayes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// "empirical" (dataset counts) or "population" (joint table).
    pub plug_ins: String,
    pub averaging: ContextAveraging,
    /// Pr[Y = 1].
    pub nu: f64,
    pub n: f64,
    pub contexts: Vec<ContextConsistency>,
    pub races: Vec<RaceSummary>,
}

impl ConsistencyReport {
    pub fn entry(&self, race: usize, context: Context) -> &ContextConsistency {
        &self.contexts[race * 2 + context.index()]
    }
}

/// Ground-truth plug-ins: θ, ν and φ as `[y][r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub theta: Vec<f64>,
    pub nu: f64,
    pub phi: [Vec<f64>; 2],
}

impl Truth {
    pub fn from_dataset(dataset: &SupplementalDataset) -> Result<Self> {
        dataset.require_labels()?;
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let k = dataset.race_set.len();
        let mut joint = [vec![0.0; k], vec![0.0; k]];
        for record in &dataset.records {
            joint[record.context.index()][record.race.expect("labeled")] += 1.0;
        }
        Ok(Self::from_joint(joint))
    }

    pub fn from_table(table: &JointTable) -> Self {
        Self::from_joint(table.race_context_mass())
    }

    /// From (unnormalized) Pr[R=r, Y=y] as `[y][r]`.
    fn from_joint(joint: [Vec<f64>; 2]) -> Self {
        let total: f64 = joint.iter().flatten().sum();
        let n1: f64 = joint[1].iter().sum();
        let theta = (0..joint[0].len()).map(|r| (joint[0][r] + joint[1][r]) / total).collect();
        let phi = joint.map(|row| {
            let t: f64 = row.iter().sum();
            row.iter().map(|m| if t > 0.0 { m / t } else { f64::NAN }).collect()
        });
        Self {
            theta,
            nu: n1 / total,
            phi,
        }
    }

    /// μ(r) = φ₁(r)·ν / θ(r).
    pub fn positive_rate(&self, race: usize) -> f64 {
        self.phi[1][race] * self.nu / self.theta[race]
    }
}

/// |mean ω_r(x_i, y) − Pr̂[R=r | Y=y]| over records observed at context `y`.
pub fn consistency_violation<P: ContextualProxy + ?Sized>(
    proxy: &P,
    dataset: &SupplementalDataset,
    race: usize,
    context: Context,
) -> Result<f64> {
    dataset.require_labels()?;
    let (mut sum, mut members, mut n) = (0.0, 0usize, 0usize);
    for record in dataset.records.iter().filter(|r| r.context == context) {
        sum += proxy.evaluate(record, context)?[race];
        members += usize::from(record.race == Some(race));
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyContext(context.as_u8()));
    }
    Ok((sum / n as f64 - members as f64 / n as f64).abs())
}

/// Builds a consistency report from evaluated predictions and ground truth.
pub fn consistency_report(
    races: &[String],
    predictions: &ContextualPredictions,
    truth: &Truth,
    averaging: ContextAveraging,
    plug_ins: &str,
) -> Result<ConsistencyReport> {
    let mut contexts = Vec::with_capacity(races.len() * 2);
    let mut summaries = Vec::with_capacity(races.len());
    for (r, label) in races.iter().enumerate() {
        let mut omega = [0.0; 2];
        for y in Context::BOTH {
            let w = predictions
                .mean_output(r, y, averaging)
                .ok_or(Error::EmptyContext(y.as_u8()))?;
            omega[y.index()] = w;
            let phi = truth.phi[y.index()][r];
            contexts.push(ContextConsistency {
                race: label.clone(),
                context: y.as_u8(),
                omega_bar: w,
                phi,
                violation: (w - phi).abs(),
            });
        }
        let rho = truth.nu * omega[1] + (1.0 - truth.nu) * omega[0];
        summaries.push(RaceSummary {
            race: label.clone(),
            theta: truth.theta[r],
            rho,
            gamma: (rho - truth.theta[r]).abs(),
            mu_true: truth.positive_rate(r),
            mu_bayes: bayes_estimate(predictions, r, averaging).unwrap_or(f64::NAN),
        });
    }
    let mass = predictions.context_mass();
    Ok(ConsistencyReport {
        plug_ins: plug_ins.to_string(),
        averaging,
        nu: truth.nu,
        n: mass[0] + mass[1],
        contexts,
        races: summaries,
    })
}

/// Report with empirical plug-ins from a labeled dataset.
pub fn dataset_consistency_report<P: ContextualProxy + ?Sized>(
    proxy: &P,
    dataset: &SupplementalDataset,
    averaging: ContextAveraging,
) -> Result<ConsistencyReport> {
    let truth = Truth::from_dataset(dataset)?;
    let predictions = ContextualPredictions::evaluate(proxy, dataset)?;
    consistency_report(dataset.race_set.labels(), &predictions, &truth, averaging, "empirical")
}

/// Report with exact population plug-ins, evaluating the proxy on every
/// positive-mass cell of `table`.
pub fn population_consistency_report<P: ContextualProxy + ?Sized>(
    proxy: &P,
    table: &JointTable,
) -> Result<ConsistencyReport> {
    let (records, weights) = table.population();
    let predictions = ContextualPredictions::evaluate_weighted(proxy, &records, weights)?;
    consistency_report(
        table.race_set().labels(),
        &predictions,
        &Truth::from_table(table),
        ContextAveraging::WithinContext,
        "population",
    )
}

/// One occupied bin of a violation profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationBin {
    pub bin_center: f64,
    pub lower: f64,
    pub upper: f64,
    pub violation: f64,
    pub geos: usize,
    pub records: usize,
}

/// Groups geographies into `bins` equal-width bins over [0, 1] by the true
/// share of `race` among their records at `context`, then reports the
/// consistency violation within each occupied bin. Geographies without
/// records at `context` are left out.
pub fn binned_violation_profile<P: ContextualProxy + ?Sized>(
    proxy: &P,
    dataset: &SupplementalDataset,
    race: usize,
    context: Context,
    bins: usize,
) -> Result<Vec<ViolationBin>> {
    if bins < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 bins, got {bins}")));
    }
    dataset.require_labels()?;
    // geo → (Σ ω_r, #race members, #records)
    let mut per_geo: BTreeMap<&str, (f64, usize, usize)> = BTreeMap::new();
    for record in dataset.records.iter().filter(|r| r.context == context) {
        let w = proxy.evaluate(record, context)?[race];
        let entry = per_geo.entry(record.geo.as_str()).or_default();
        entry.0 += w;
        entry.1 += usize::from(record.race == Some(race));
        entry.2 += 1;
    }
    if per_geo.is_empty() {
        return Err(Error::EmptyContext(context.as_u8()));
    }
    let mut acc = vec![(0.0, 0usize, 0usize, 0usize); bins];
    for (sum, members, n) in per_geo.values() {
        let share = *members as f64 / *n as f64;
        let b = ((share * bins as f64) as usize).min(bins - 1);
        acc[b].0 += sum;
        acc[b].1 += members;
        acc[b].2 += n;
        acc[b].3 += 1;
    }
    let width = 1.0 / bins as f64;
    Ok(acc
        .into_iter()
        .enumerate()
        .filter(|(_, a)| a.3 > 0)
        .map(|(b, (sum, members, n, geos))| ViolationBin {
            bin_center: (b as f64 + 0.5) * width,
            lower: b as f64 * width,
            upper: (b + 1) as f64 * width,
            violation: (sum / n as f64 - members as f64 / n as f64).abs(),
            geos,
            records: n,
        })
        .collect())
}

/// Largest consistency violation that still guarantees Bayes-estimator error
/// at most `epsilon`: `εθ/ν − ω̄·γ/(θ − γ)`, with ω̄ the positive-context mean.
///
/// Returns `DegenerateBound` when `θ ≤ γ`, `ν ≤ 0`, or the bound is negative.
pub fn consistency_budget(epsilon: f64, theta: f64, nu: f64, gamma: f64, omega_bar: f64) -> Result<f64> {
    if !(nu > 0.0) {
        return Err(Error::DegenerateBound(format!("nu = {nu}")));
    }
    if !(theta > gamma) {
        return Err(Error::DegenerateBound(format!("theta {theta} <= gamma {gamma}")));
    }
    let bound = epsilon * theta / nu - omega_bar * gamma / (theta - gamma);
    if bound < 0.0 {
        return Err(Error::DegenerateBound(format!("negative budget {bound}")));
    }
    Ok(bound)
}

/// Violation implied by Bayes-estimator error at most `epsilon`:
/// `εθ/ν + γ·μᴮ/ν`.
pub fn implied_violation_bound(epsilon: f64, theta: f64, nu: f64, gamma: f64, mu_bayes: f64) -> Result<f64> {
    if !(nu > 0.0) {
        return Err(Error::DegenerateBound(format!("nu = {nu}")));
    }
    Ok((epsilon * theta + gamma * mu_bayes) / nu)
}

/// `E[Cov(1[R=r], Y | X)] / Pr[R=r]` with X = (geography, surname), summed
/// exactly over the table.
pub fn weighted_bias_oracle(table: &JointTable, race: usize) -> Result<f64> {
    let k = table.k();
    let mut expected_cov = 0.0;
    for g in 0..table.geos().len() {
        for s in 0..table.surnames().len() {
            let m0 = table.cell(g, s, Context::Negative);
            let m1 = table.cell(g, s, Context::Positive);
            let px: f64 = m0.iter().chain(m1).sum();
            if px <= 0.0 {
                continue;
            }
            let p_r = (m0[race] + m1[race]) / px;
            let p_y: f64 = m1.iter().sum::<f64>() / px;
            let p_ry = m1[race] / px;
            expected_cov += px * (p_ry - p_r * p_y);
        }
    }
    let theta: f64 = table.theta()[race];
    if theta <= 0.0 || k == 0 {
        return Err(Error::ZeroMassEvent(format!("R={}", table.race_set().label(race))));
    }
    Ok(expected_cov / theta)
}

/// Exact large-sample limit of `μ̂ᵂ(r) − μ(r)` for the calibrated
/// non-contextual proxy ρ_r(x) = Pr[R=r | X=x]. Computed from the weighted
/// estimator's definition, independently of [`weighted_bias_oracle`].
pub fn weighted_gap_oracle(table: &JointTable, race: usize) -> Result<f64> {
    let (records, weights) = table.population();
    let proxy = table.oracle_noncontextual_proxy();
    let (mut num, mut den) = (0.0, 0.0);
    for (record, w) in records.iter().zip(&weights) {
        let rho = proxy.evaluate(record, record.context)?[race];
        num += w * rho * record.context.as_f64();
        den += w * rho;
    }
    if den <= 0.0 {
        return Err(Error::ZeroMass(table.race_set().label(race).to_string()));
    }
    Ok(num / den - table.positive_rate(race)?)
}

/// Outcome of the two bound implications for one (instance, race, ε).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub race: String,
    pub epsilon: f64,
    pub violation: f64,
    pub bayes_error: f64,
    pub theta: f64,
    pub nu: f64,
    pub gamma: f64,
    pub omega_bar: f64,
    pub mu_bayes: f64,
    /// `None` when the budget is degenerate.
    pub budget: Option<f64>,
    pub degenerate: Option<String>,
    pub implied: f64,
    /// Whether "violation ≤ budget ⇒ error ≤ ε" held; `None` if the
    /// antecedent was false or the budget degenerate.
    pub forward_holds: Option<bool>,
    /// Whether "error ≤ ε ⇒ violation ≤ implied" held; `None` if vacuous.
    pub converse_holds: Option<bool>,
}

/// Evaluates both implications for every race at each ε. `slack` is added
/// to the right-hand side of each conclusion (0 for population-exact checks).
pub fn check_bounds(report: &ConsistencyReport, epsilons: &[f64], slack: f64) -> Vec<BoundCheck> {
    let mut out = Vec::new();
    for (r, summary) in report.races.iter().enumerate() {
        let positive = report.entry(r, Context::Positive);
        let error = (summary.mu_bayes - summary.mu_true).abs();
        for &epsilon in epsilons {
            let budget = consistency_budget(epsilon, summary.theta, report.nu, summary.gamma, positive.omega_bar);
            let implied = implied_violation_bound(epsilon, summary.theta, report.nu, summary.gamma, summary.mu_bayes)
                .unwrap_or(f64::NAN);
            let forward_holds = match &budget {
                Ok(b) if positive.violation <= *b => Some(error <= epsilon + slack),
                _ => None,
            };
            let converse_holds = (error <= epsilon).then_some(positive.violation <= implied + slack);
            out.push(BoundCheck {
                race: summary.race.clone(),
                epsilon,
                violation: positive.violation,
                bayes_error: error,
                theta: summary.theta,
                nu: report.nu,
                gamma: summary.gamma,
                omega_bar: positive.omega_bar,
                mu_bayes: summary.mu_bayes,
                degenerate: budget.as_ref().err().map(ToString::to_string),
                budget: budget.ok(),
                implied,
                forward_holds,
                converse_holds,
            });
        }
    }
    out
}

/// Fixed ε grid probed for every instance, 0 to 0.2 in steps of 0.005.
pub fn epsilon_grid() -> Vec<f64> {
    (0..=40).map(|i| i as f64 * 0.005).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepInstance {
    pub seed: u64,
    pub mixing_weights: [f64; 2],
    pub checks: Vec<BoundCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub instances: usize,
    pub forward_checks: usize,
    pub forward_counterexamples: usize,
    pub converse_checks: usize,
    pub converse_counterexamples: usize,
    /// (instance, race, ε) triples whose budget was degenerate.
    pub degenerate_excluded: usize,
    /// Instances where every race had zero violation at both contexts; the
    /// Bayes estimate must then be exact.
    pub exact_consistency_instances: usize,
    pub exact_consistency_failures: usize,
    pub results: Vec<SweepInstance>,
}

/// Population-exact sweep: for each instance, draw a world from `base`
/// with a fresh seed and random race effects, perturb its oracle proxy
/// toward random targets with random weights, and check both implications.
/// One instance in five keeps the exact oracle proxy.
pub fn verify_bounds(base: &DgpConfig, instances: usize, seed: u64) -> Result<SweepSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = SweepSummary {
        instances,
        forward_checks: 0,
        forward_counterexamples: 0,
        converse_checks: 0,
        converse_counterexamples: 0,
        degenerate_excluded: 0,
        exact_consistency_instances: 0,
        exact_consistency_failures: 0,
        results: Vec::with_capacity(instances),
    };
    let k = base.races.len();
    let dirichlet = Gamma::new(1.0, 1.0).expect("valid gamma");
    for i in 0..instances {
        let instance_seed: u64 = rng.random();
        let effects: Vec<f64> = (0..k).map(|_| rng.random_range(-1.5..1.5)).collect();
        let config = base.clone().with_seed(instance_seed).with_race_effects(effects);
        let table = build_joint(&config)?;
        let weights = if i % 5 == 0 {
            [0.0, 0.0]
        } else {
            [rng.random_range(0.0..0.6), rng.random_range(0.0..0.6)]
        };
        let mut target = || -> RaceDistribution {
            let draws: Vec<f64> = (0..k).map(|_| dirichlet.sample(&mut rng)).collect();
            normalize(&draws).unwrap_or_else(|_| RaceDistribution::uniform(k))
        };
        let targets = [target(), target()];
        let proxy = MixedProxy::new(table.oracle_proxy(), targets, weights)?;
        let report = population_consistency_report(&proxy, &table)?;

        let mut epsilons = epsilon_grid();
        for (r, s) in report.races.iter().enumerate() {
            let pos = report.entry(r, Context::Positive);
            // Tightest ε for each direction, nudged so the antecedent holds.
            epsilons.push((s.mu_bayes - s.mu_true).abs());
            if s.theta > s.gamma {
                let tight = (pos.violation + pos.omega_bar * s.gamma / (s.theta - s.gamma)) * report.nu / s.theta;
                epsilons.push(tight * (1.0 + 1e-9) + 1e-15);
            }
        }
        let checks = check_bounds(&report, &epsilons, 1e-12);
        for c in &checks {
            if c.degenerate.is_some() {
                summary.degenerate_excluded += 1;
            }
            if let Some(ok) = c.forward_holds {
                summary.forward_checks += 1;
                summary.forward_counterexamples += usize::from(!ok);
            }
            if let Some(ok) = c.converse_holds {
                summary.converse_checks += 1;
                summary.converse_counterexamples += usize::from(!ok);
            }
        }
        if report.contexts.iter().all(|c| c.violation <= 1e-12) {
            summary.exact_consistency_instances += 1;
            if report.races.iter().any(|s| (s.mu_bayes - s.mu_true).abs() > 1e-10) {
                summary.exact_consistency_failures += 1;
            }
        }
        summary.results.push(SweepInstance {
            seed: instance_seed,
            mixing_weights: weights,
            checks,
        });
    }
    Ok(summary)
}
