//! Bayesian Improved Surname Geocoding: Pr[R | S=s, G=g] ∝ Pr[S=s | R] Pr[R | G=g].

use std::sync::atomic::{AtomicU64, Ordering};

use log::warn;

use crate::domain::{normalize, AttributedRecord, Context, ContextualProxy, RaceDistribution, RaceSet};
use crate::error::{Error, Result};
use crate::tables::{GeoTable, SurnameTable};

#[derive(Debug)]
pub struct BisgModel {
    surnames: SurnameTable,
    geo: GeoTable,
    zero_product_fallbacks: AtomicU64,
}

impl Clone for BisgModel {
    fn clone(&self) -> Self {
        Self {
            surnames: self.surnames.clone(),
            geo: self.geo.clone(),
            zero_product_fallbacks: AtomicU64::new(self.zero_product_fallbacks()),
        }
    }
}

impl BisgModel {
    pub fn new(surnames: SurnameTable, geo: GeoTable) -> Result<Self> {
        if surnames.race_set() != geo.race_set() {
            return Err(Error::InvalidRaceSet(
                "surname and geography tables use different race orders".into(),
            ));
        }
        Ok(Self {
            surnames,
            geo,
            zero_product_fallbacks: AtomicU64::new(0),
        })
    }

    pub fn race_set(&self) -> &RaceSet {
        self.geo.race_set()
    }

    pub fn surname_table(&self) -> &SurnameTable {
        &self.surnames
    }

    pub fn geo_table(&self) -> &GeoTable {
        &self.geo
    }

    /// Number of predictions where a known surname had zero likelihood under
    /// every race with positive geographic mass.
    pub fn zero_product_fallbacks(&self) -> u64 {
        self.zero_product_fallbacks.load(Ordering::Relaxed)
    }

    /// BISG posterior for a normalized surname. An empty or untabulated
    /// surname contributes a uniform likelihood, so the result is Pr[R|g].
    pub fn predict(&self, surname: &str, geo: &str) -> Result<RaceDistribution> {
        let prior = self.geo.race_given_geo(geo)?;
        combine_with_surname(&self.surnames, surname, prior, &self.zero_product_fallbacks)
    }

    /// Geography-only variant, used when surnames are unavailable.
    pub fn predict_geo_only(&self, geo: &str) -> Result<RaceDistribution> {
        self.geo.race_given_geo(geo)
    }
}

impl ContextualProxy for BisgModel {
    fn num_races(&self) -> usize {
        self.race_set().len()
    }

    fn evaluate(&self, record: &AttributedRecord, _context: Context) -> Result<RaceDistribution> {
        self.predict(&record.surname, &record.geo)
    }
}

/// Multiplies `prior` by Pr[S=surname | R] and renormalizes. Missing
/// surnames skip the factor; an all-zero product falls back to `prior`.
pub(crate) fn combine_with_surname(
    surnames: &SurnameTable,
    surname: &str,
    prior: RaceDistribution,
    fallbacks: &AtomicU64,
) -> Result<RaceDistribution> {
    if surname.is_empty() {
        return Ok(prior);
    }
    let Some(likelihood) = surnames.likelihood(surname) else {
        return Ok(prior);
    };
    let product: Vec<f64> = prior.probs().iter().zip(&likelihood).map(|(p, l)| p * l).collect();
    match normalize(&product) {
        Ok(posterior) => Ok(posterior),
        Err(Error::AllZero) => {
            fallbacks.fetch_add(1, Ordering::Relaxed);
            warn!("surname {surname:?} has zero likelihood wherever the prior has mass; using prior");
            Ok(prior)
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn model() -> BisgModel {
        let races = RaceSet::new(["a", "b"]).unwrap();
        let surnames = SurnameTable::from_counts(
            races.clone(),
            [("S1".to_string(), vec![20.0, 10.0]), ("S2".to_string(), vec![80.0, 0.0])],
        )
        .unwrap()
        .with_race_totals(vec![100.0, 100.0])
        .unwrap();
        let geo = GeoTable::from_counts(
            races,
            [
                ("G1".to_string(), vec![50.0, 50.0]),
                ("G2".to_string(), vec![30.0, 70.0]),
                ("G3".to_string(), vec![0.0, 10.0]),
            ],
        )
        .unwrap();
        BisgModel::new(surnames, geo).unwrap()
    }

    #[test]
    fn bisg_forced_arithmetic() {
        let m = model();
        let p = m.predict("S1", "G1").unwrap();
        assert_abs_diff_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn unknown_or_empty_surname_falls_back_to_geography() {
        let m = model();
        assert_eq!(m.predict("NOBODY", "G2").unwrap().probs(), &[0.3, 0.7]);
        assert_eq!(m.predict("", "G2").unwrap().probs(), &[0.3, 0.7]);
        for geo in ["G1", "G2", "G3"] {
            assert_eq!(m.predict("", geo).unwrap(), m.predict_geo_only(geo).unwrap());
        }
    }

    #[test]
    fn zero_product_falls_back_and_counts() {
        let m = model();
        let p = m.predict("S2", "G3").unwrap();
        assert_eq!(p.probs(), &[0.0, 1.0]);
        assert_eq!(m.zero_product_fallbacks(), 1);
    }

    #[test]
    fn geo_only_examples() {
        let m = model();
        assert_eq!(m.predict_geo_only("G1").unwrap().probs(), &[0.5, 0.5]);
        assert_eq!(m.predict_geo_only("G3").unwrap().probs(), &[0.0, 1.0]);
        assert!(matches!(m.predict("S1", "NOPE"), Err(Error::UnknownGeo(_))));
        assert!(matches!(m.predict_geo_only("NOPE"), Err(Error::UnknownGeo(_))));
    }

    #[test]
    fn mismatched_race_orders_are_rejected() {
        let m = model();
        let other = GeoTable::from_counts(
            RaceSet::new(["b", "a"]).unwrap(),
            [("G1".to_string(), vec![1.0, 1.0])],
        )
        .unwrap();
        assert!(BisgModel::new(m.surname_table().clone(), other).is_err());
    }
}
