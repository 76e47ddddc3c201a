//! Property tests over randomly configured worlds.

use fairproxy::bisg::BisgModel;
use fairproxy::diagnostics::{consistency_budget, implied_violation_bound, weighted_bias_oracle, weighted_gap_oracle};
use fairproxy::domain::Context;
use fairproxy::estimators::{bayes_estimate, ContextAveraging, ContextualPredictions};
use fairproxy::simulator::{build_joint, DgpConfig};
use fairproxy::ContextualProxy;
use proptest::prelude::*;

fn world(seed: u64, effects: Vec<f64>) -> DgpConfig {
    DgpConfig {
        n_geos: 6,
        n_surnames: 15,
        ..DgpConfig::default()
    }
    .with_seed(seed)
    .with_race_effects(effects)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bisg_outputs_are_distributions(seed in 0u64..1000) {
        let table = build_joint(&world(seed, vec![0.0, -0.5, 0.5])).unwrap();
        let bisg = BisgModel::new(table.surname_table(), table.geo_table()).unwrap();
        for record in &table.sample(50, seed).unwrap().records {
            let d = bisg.evaluate(record, record.context).unwrap();
            let sum: f64 = d.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(d.probs().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn population_bayes_is_exact_for_the_oracle(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let table = build_joint(&world(seed, vec![0.0, a, b])).unwrap();
        let (records, weights) = table.population();
        let preds = ContextualPredictions::evaluate_weighted(&table.oracle_proxy(), &records, weights).unwrap();
        for r in 0..table.k() {
            let mu = table.positive_rate(r).unwrap();
            let est = bayes_estimate(&preds, r, ContextAveraging::WithinContext).unwrap();
            prop_assert!((est - mu).abs() < 1e-10);
        }
    }

    #[test]
    fn weighted_gap_is_the_negated_stated_bias(seed in 0u64..1000, a in -2.0f64..2.0) {
        let table = build_joint(&world(seed, vec![0.0, a, -a])).unwrap();
        for r in 0..table.k() {
            let oracle = weighted_bias_oracle(&table, r).unwrap();
            let gap = weighted_gap_oracle(&table, r).unwrap();
            prop_assert!((oracle + gap).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_outcomes_give_zero_bias(seed in 0u64..1000) {
        let table = build_joint(&world(seed, vec![0.0, 0.0, 0.0]).independent_outcomes()).unwrap();
        for r in 0..table.k() {
            prop_assert!(weighted_gap_oracle(&table, r).unwrap().abs() < 1e-12);
        }
        // Outcomes still vary by geography but not by race within one.
        let phi = table.race_given_context(Context::Positive).unwrap();
        prop_assert!((phi.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bounds_grow_with_epsilon(
        eps in 0.0f64..0.2, extra in 0.001f64..0.1,
        theta in 0.05f64..0.9, nu in 0.05f64..0.95, gamma in 0.0f64..0.04, omega in 0.0f64..1.0, mu in 0.0f64..1.0,
    ) {
        if let (Ok(lo), Ok(hi)) = (
            consistency_budget(eps, theta, nu, gamma, omega),
            consistency_budget(eps + extra, theta, nu, gamma, omega),
        ) {
            prop_assert!(hi > lo);
        }
        let lo = implied_violation_bound(eps, theta, nu, gamma, mu).unwrap();
        let hi = implied_violation_bound(eps + extra, theta, nu, gamma, mu).unwrap();
        prop_assert!(hi > lo && lo >= 0.0);
    }
}
