//! Multinomial logistic (softmax) regression.
//!
//! Minimizes mean cross-entropy plus `(λ/2)·‖W‖²` over the non-intercept
//! weights by full-batch gradient descent. Each step backtracks from a
//! Barzilai–Borwein trial length until the Armijo condition holds, so the
//! training loss never increases.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::RaceDistribution;
use crate::error::{Error, Result};
use crate::tables::format_significant;

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    Zero,
    /// Uniform(−0.5, 0.5) weights from a seeded generator.
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub l2_lambda: f64,
    pub tolerance: f64,
    pub max_iters: usize,
    pub init: Init,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            l2_lambda: 1e-4,
            tolerance: 1e-6,
            max_iters: 5000,
            init: Init::Zero,
        }
    }
}

/// Dense row-major design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Features {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::LengthMismatch {
                    expected: cols,
                    found: row.len(),
                });
            }
            check_finite(row)?;
            data.extend_from_slice(row);
        }
        Ok(Self {
            data,
            rows: rows.len(),
            cols,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

fn check_finite(row: &[f64]) -> Result<()> {
    match row.iter().position(|x| !x.is_finite()) {
        Some(column) => Err(Error::NonFiniteFeature { column }),
        None => Ok(()),
    }
}

/// Regularized mean cross-entropy for a fixed dataset. Weights are laid out
/// class-major: `w[k * (d + 1) + j]`, with column `d` the intercept.
#[derive(Debug, Clone)]
pub struct SoftmaxObjective<'a> {
    features: &'a Features,
    labels: &'a [usize],
    classes: usize,
    l2_lambda: f64,
}

impl<'a> SoftmaxObjective<'a> {
    pub fn new(features: &'a Features, labels: &'a [usize], classes: usize, l2_lambda: f64) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if labels.len() != features.rows() {
            return Err(Error::LengthMismatch {
                expected: features.rows(),
                found: labels.len(),
            });
        }
        if classes < 2 {
            return Err(Error::InvalidConfig("softmax regression needs at least 2 classes".into()));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= classes) {
            return Err(Error::InvalidConfig(format!("label {bad} out of range for {classes} classes")));
        }
        if !(l2_lambda >= 0.0 && l2_lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("l2_lambda {l2_lambda} must be nonnegative")));
        }
        Ok(Self {
            features,
            labels,
            classes,
            l2_lambda,
        })
    }

    pub fn dim(&self) -> usize {
        self.classes * (self.features.cols() + 1)
    }

    fn stride(&self) -> usize {
        self.features.cols() + 1
    }

    fn penalty(&self, w: &[f64]) -> f64 {
        let stride = self.stride();
        let d = self.features.cols();
        let sq: f64 = w
            .chunks(stride)
            .map(|row| row[..d].iter().map(|x| x * x).sum::<f64>())
            .sum();
        0.5 * self.l2_lambda * sq
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        let mut logits = vec![0.0; self.classes];
        let mut loss = 0.0;
        for (i, &label) in self.labels.iter().enumerate() {
            linear_logits(w, self.features.row(i), &mut logits);
            loss += log_sum_exp(&logits) - logits[label];
        }
        loss / self.labels.len() as f64 + self.penalty(w)
    }

    /// Objective value and gradient in one pass.
    pub fn value_and_gradient(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let stride = self.stride();
        let d = self.features.cols();
        let n = self.labels.len() as f64;
        let mut grad = vec![0.0; w.len()];
        let mut logits = vec![0.0; self.classes];
        let mut loss = 0.0;
        for (i, &label) in self.labels.iter().enumerate() {
            let x = self.features.row(i);
            linear_logits(w, x, &mut logits);
            let lse = log_sum_exp(&logits);
            loss += lse - logits[label];
            for (k, logit) in logits.iter().enumerate() {
                let residual = (logit - lse).exp() - if k == label { 1.0 } else { 0.0 };
                let g = &mut grad[k * stride..(k + 1) * stride];
                for (gj, xj) in g[..d].iter_mut().zip(x) {
                    *gj += residual * xj;
                }
                g[d] += residual;
            }
        }
        for g in &mut grad {
            *g /= n;
        }
        for (row_g, row_w) in grad.chunks_mut(stride).zip(w.chunks(stride)) {
            for (g, wj) in row_g[..d].iter_mut().zip(&row_w[..d]) {
                *g += self.l2_lambda * wj;
            }
        }
        (loss / n + self.penalty(w), grad)
    }

    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        self.value_and_gradient(w).1
    }
}

fn linear_logits(w: &[f64], x: &[f64], out: &mut [f64]) {
    let stride = x.len() + 1;
    for (k, logit) in out.iter_mut().enumerate() {
        let row = &w[k * stride..(k + 1) * stride];
        *logit = row[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[x.len()];
    }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Compares the analytic gradient at `point` against central differences
/// and returns the largest coordinatewise relative error. The relative
/// error uses `max(|analytic|, |numeric|, 1e-3)` as its scale.
pub fn gradient_check(objective: &SoftmaxObjective<'_>, point: &[f64], epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(Error::InvalidConfig(format!("epsilon {epsilon} outside (0, 1e-3]")));
    }
    if point.len() != objective.dim() {
        return Err(Error::LengthMismatch {
            expected: objective.dim(),
            found: point.len(),
        });
    }
    let analytic = objective.gradient(point);
    let mut probe = point.to_vec();
    let mut worst: f64 = 0.0;
    for j in 0..point.len() {
        probe[j] = point[j] + epsilon;
        let up = objective.value(&probe);
        probe[j] = point[j] - epsilon;
        let down = objective.value(&probe);
        probe[j] = point[j];
        let numeric = (up - down) / (2.0 * epsilon);
        let scale = analytic[j].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max((analytic[j] - numeric).abs() / scale);
    }
    Ok(worst)
}

/// Fitted softmax regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxModel {
    classes: usize,
    inputs: usize,
    weights: Vec<f64>,
    pub l2_lambda: f64,
    pub iterations: usize,
    pub final_gradient_norm: f64,
    pub final_objective: f64,
    pub converged: bool,
}

impl SoftmaxModel {
    /// Model with all-zero weights; predicts the uniform distribution.
    pub fn zeros(classes: usize, inputs: usize) -> Self {
        Self {
            classes,
            inputs,
            weights: vec![0.0; classes * (inputs + 1)],
            l2_lambda: 0.0,
            iterations: 0,
            final_gradient_norm: f64::NAN,
            final_objective: f64::NAN,
            converged: false,
        }
    }

    /// `weights` is class-major with the intercept as the last column.
    pub fn from_weights(classes: usize, inputs: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != classes * (inputs + 1) {
            return Err(Error::LengthMismatch {
                expected: classes * (inputs + 1),
                found: weights.len(),
            });
        }
        check_finite(&weights)?;
        Ok(Self {
            weights,
            ..Self::zeros(classes, inputs)
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn predict_proba(&self, row: &[f64]) -> Result<RaceDistribution> {
        if row.len() != self.inputs {
            return Err(Error::LengthMismatch {
                expected: self.inputs,
                found: row.len(),
            });
        }
        check_finite(row)?;
        let mut logits = vec![0.0; self.classes];
        linear_logits(&self.weights, row, &mut logits);
        let probs = softmax(&logits);
        Ok(crate::domain::normalize(&probs).expect("softmax output is positive"))
    }

    /// One row per class: `class,w_1,...,w_d,intercept`, 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        let mut header = vec!["class".to_string()];
        header.extend((1..=self.inputs).map(|j| format!("w_{j}")));
        header.push("intercept".into());
        writeln!(out, "{}", header.join(",")).map_err(io)?;
        for (k, row) in self.weights.chunks(self.inputs + 1).enumerate() {
            let values: Vec<String> = row.iter().map(|w| format_significant(*w, 17)).collect();
            writeln!(out, "{k},{}", values.join(",")).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut reader = csv::Reader::from_reader(file);
        let inputs = reader
            .headers()?
            .len()
            .checked_sub(2)
            .ok_or_else(|| Error::InvalidModel("weight file needs class and intercept columns".into()))?;
        let mut weights = Vec::new();
        let mut classes = 0;
        for row in reader.records() {
            let row = row?;
            for field in row.iter().skip(1) {
                weights.push(
                    field
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidModel(format!("non-numeric weight {field:?}")))?,
                );
            }
            classes += 1;
        }
        Self::from_weights(classes, inputs, weights)
    }
}

/// Fits softmax regression on `features` with class `labels` in `[0, classes)`.
///
/// Non-convergence within `max_iters` is not an error: the model is returned
/// with `converged = false` and a warning is logged.
pub fn fit(features: &Features, labels: &[usize], classes: usize, config: &LearnerConfig) -> Result<SoftmaxModel> {
    let objective = SoftmaxObjective::new(features, labels, classes, config.l2_lambda)?;
    let dim = objective.dim();
    let mut w = match config.init {
        Init::Zero => vec![0.0; dim],
        Init::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect()
        }
    };
    let (mut value, mut grad) = objective.value_and_gradient(&w);
    let mut previous: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut step = 1.0;
    let mut iterations = 0;
    let mut converged = inf_norm(&grad) <= config.tolerance;
    while !converged && iterations < config.max_iters {
        if let Some((w_prev, g_prev)) = &previous {
            let (mut ss, mut sy) = (0.0, 0.0);
            for j in 0..dim {
                let s = w[j] - w_prev[j];
                let y = grad[j] - g_prev[j];
                ss += s * s;
                sy += s * y;
            }
            step = if sy > 0.0 { (ss / sy).clamp(1e-10, 1e10) } else { step * 2.0 };
        }
        let grad_sq: f64 = grad.iter().map(|g| g * g).sum();
        let mut candidate = vec![0.0; dim];
        let accepted = loop {
            for j in 0..dim {
                candidate[j] = w[j] - step * grad[j];
            }
            let trial = objective.value(&candidate);
            if trial <= value - ARMIJO_C * step * grad_sq {
                break Some(trial);
            }
            step *= 0.5;
            if step < MIN_STEP {
                break None;
            }
        };
        let Some(_) = accepted else {
            // No decrease is representable at this precision.
            break;
        };
        let (new_value, new_grad) = objective.value_and_gradient(&candidate);
        previous = Some((std::mem::replace(&mut w, candidate), std::mem::replace(&mut grad, new_grad)));
        value = new_value;
        iterations += 1;
        converged = inf_norm(&grad) <= config.tolerance;
    }
    let final_gradient_norm = inf_norm(&grad);
    if !converged {
        warn!(
            "softmax regression stopped after {iterations} iterations with gradient norm {final_gradient_norm:e} > {:e}",
            config.tolerance
        );
    }
    Ok(SoftmaxModel {
        classes,
        inputs: features.cols(),
        weights: w,
        l2_lambda: config.l2_lambda,
        iterations,
        final_gradient_norm,
        final_objective: value,
        converged,
    })
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn random_problem(seed: u64, n: usize, d: usize, k: usize) -> (Features, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
        (Features::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn zero_weights_predict_uniform() {
        let model = SoftmaxModel::zeros(4, 2);
        let p = model.predict_proba(&[3.0, -7.0]).unwrap();
        assert_eq!(p.probs(), &[0.25; 4]);
    }

    #[test]
    fn hand_computed_softmax() {
        // Rows: class weights (w_1, w_2, intercept).
        let weights = vec![0.5, -0.25, 0.1, -1.0, 2.0, 0.0, 0.3, 0.3, -0.2];
        let model = SoftmaxModel::from_weights(3, 2, weights).unwrap();
        let logits = [0.5 + 0.25 + 0.1, -1.0 - 2.0, 0.3 - 0.3 - 0.2];
        let exps: Vec<f64> = logits.iter().map(|l: &f64| l.exp()).collect();
        let total: f64 = exps.iter().sum();
        let p = model.predict_proba(&[1.0, -1.0]).unwrap();
        for (a, e) in p.probs().iter().zip(&exps) {
            assert_abs_diff_eq!(*a, e / total, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_is_monotone_in_own_logit() {
        let mut last = 0.0;
        for w in [-2.0, -1.0, 0.0, 1.0, 5.0, 50.0, 500.0] {
            let model = SoftmaxModel::from_weights(2, 1, vec![w, 0.0, 0.0, 0.0]).unwrap();
            let p = model.predict_proba(&[1.0]).unwrap()[0];
            assert!(p >= last);
            last = p;
        }
        assert!(last > 0.999_999);
    }

    #[test]
    fn predict_rejects_bad_rows() {
        let model = SoftmaxModel::zeros(2, 2);
        assert!(matches!(model.predict_proba(&[1.0]), Err(Error::LengthMismatch { .. })));
        assert!(matches!(
            model.predict_proba(&[1.0, f64::NAN]),
            Err(Error::NonFiniteFeature { column: 1 })
        ));
        assert!(matches!(
            Features::from_rows(&[vec![f64::INFINITY]]),
            Err(Error::NonFiniteFeature { column: 0 })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (x, y) = random_problem(5, 5, 2, 3);
        let objective = SoftmaxObjective::new(&x, &y, 3, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let point: Vec<f64> = (0..objective.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert!(gradient_check(&objective, &point, 1e-6).unwrap() <= 1e-5);
        assert!(gradient_check(&objective, &point, 0.1).is_err());
    }

    #[test]
    fn regularization_shifts_gradient_by_lambda_w() {
        let (x, y) = random_problem(8, 12, 3, 3);
        let plain = SoftmaxObjective::new(&x, &y, 3, 0.0).unwrap();
        let lambda = 0.7;
        let ridge = SoftmaxObjective::new(&x, &y, 3, lambda).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Vec<f64> = (0..plain.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (g0, g1) = (plain.gradient(&w), ridge.gradient(&w));
        for j in 0..w.len() {
            let intercept = j % 4 == 3;
            let expected = if intercept { 0.0 } else { lambda * w[j] };
            assert_abs_diff_eq!(g1[j] - g0[j], expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn fit_reaches_first_order_condition() {
        let (x, y) = random_problem(21, 60, 2, 3);
        let config = LearnerConfig {
            l2_lambda: 0.05,
            ..LearnerConfig::default()
        };
        let model = fit(&x, &y, 3, &config).unwrap();
        assert!(model.converged);
        let objective = SoftmaxObjective::new(&x, &y, 3, 0.05).unwrap();
        assert!(inf_norm(&objective.gradient(model.weights())) <= config.tolerance);
    }

    #[test]
    fn separable_pair_matches_grid_search() {
        let x = Features::from_rows(&[vec![-1.0], vec![1.0]]).unwrap();
        let y = [0, 1];
        let lambda = 0.1;
        let config = LearnerConfig {
            l2_lambda: lambda,
            tolerance: 1e-10,
            ..LearnerConfig::default()
        };
        let model = fit(&x, &y, 2, &config).unwrap();

        // Symmetric optimum: w_1 = −w_0 = a, equal intercepts, so
        // J(a) = ln(1 + e^{−2a}) + λa². Minimize on a fine grid.
        let objective = |a: f64| (1.0 + (-2.0 * a).exp()).ln() + lambda * a * a;
        let (mut best_a, mut best) = (0.0, f64::INFINITY);
        for i in 0..=400_000 {
            let a = i as f64 * 1e-5;
            let v = objective(a);
            if v < best {
                best = v;
                best_a = a;
            }
        }
        let p_oracle = 1.0 / (1.0 + (-2.0 * best_a).exp());
        assert_abs_diff_eq!(model.predict_proba(&[1.0]).unwrap()[1], p_oracle, epsilon = 1e-3);
        assert_abs_diff_eq!(model.predict_proba(&[-1.0]).unwrap()[0], p_oracle, epsilon = 1e-3);
        assert_abs_diff_eq!(model.final_objective, best, epsilon = 1e-8);
    }

    #[test]
    fn single_class_labels_are_learned() {
        let (x, _) = random_problem(4, 100, 2, 3);
        let y = vec![2; 100];
        let model = fit(&x, &y, 3, &LearnerConfig::default()).unwrap();
        for i in 0..x.rows() {
            assert!(model.predict_proba(x.row(i)).unwrap()[2] > 0.99);
        }
    }

    #[test]
    fn loss_never_increases() {
        let (x, y) = random_problem(33, 80, 3, 4);
        let mut last = f64::INFINITY;
        for iters in [0, 1, 2, 5, 10, 20, 50, 100] {
            let config = LearnerConfig {
                max_iters: iters,
                l2_lambda: 1e-3,
                ..LearnerConfig::default()
            };
            let model = fit(&x, &y, 4, &config).unwrap();
            let objective = SoftmaxObjective::new(&x, &y, 4, 1e-3).unwrap();
            let v = objective.value(model.weights());
            assert!(v <= last + 1e-15, "{v} > {last}");
            last = v;
        }
    }

    #[test]
    fn different_starts_reach_same_objective() {
        let (x, y) = random_problem(77, 40, 2, 3);
        let base = LearnerConfig {
            l2_lambda: 1e-2,
            tolerance: 1e-9,
            max_iters: 20_000,
            init: Init::Zero,
        };
        let a = fit(&x, &y, 3, &base).unwrap();
        let b = fit(&x, &y, 3, &LearnerConfig { init: Init::Random { seed: 3 }, ..base }).unwrap();
        assert!((a.final_objective - b.final_objective).abs() <= 1e-8);
    }

    #[test]
    fn class_permutation_permutes_predictions() {
        let (x, y) = random_problem(90, 50, 2, 3);
        let perm = [2, 0, 1];
        let y_perm: Vec<usize> = y.iter().map(|c| perm[*c]).collect();
        let config = LearnerConfig {
            l2_lambda: 1e-2,
            tolerance: 1e-9,
            max_iters: 20_000,
            ..LearnerConfig::default()
        };
        let a = fit(&x, &y, 3, &config).unwrap();
        let b = fit(&x, &y_perm, 3, &config).unwrap();
        for i in 0..x.rows() {
            let pa = a.predict_proba(x.row(i)).unwrap();
            let pb = b.predict_proba(x.row(i)).unwrap();
            for c in 0..3 {
                assert_abs_diff_eq!(pa[c], pb[perm[c]], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn weights_round_trip_through_csv() {
        let (x, y) = random_problem(2, 30, 3, 3);
        let model = fit(&x, &y, 3, &LearnerConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        model.write_csv(&path).unwrap();
        let loaded = SoftmaxModel::read_csv(&path).unwrap();
        assert_eq!(loaded.weights(), model.weights());
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let x = Features::from_rows(&[vec![1.0]]).unwrap();
        assert!(fit(&x, &[3], 3, &LearnerConfig::default()).is_err());
        assert!(fit(&x, &[0, 1], 3, &LearnerConfig::default()).is_err());
        let empty = Features::from_rows(&[]).unwrap();
        assert!(matches!(fit(&empty, &[], 3, &LearnerConfig::default()), Err(Error::EmptyDataset)));
    }
}
