//! Shared domain types and the round protocol.
//!
//! Every round a design emits a propensity, a coin with that bias picks the
//! arm, and the design is told the realized outcome of that arm only.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_propensity, Error, Result};

/// Fixed potential outcomes of one unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialOutcomes {
    /// Outcome under treatment, `y(1)`.
    pub treated: f64,
    /// Outcome under control, `y(0)`.
    pub control: f64,
}

impl PotentialOutcomes {
    pub fn new(treated: f64, control: f64) -> Result<Self> {
        if !treated.is_finite() || !control.is_finite() {
            return Err(Error::Domain(format!(
                "potential outcomes must be finite, got ({treated}, {control})"
            )));
        }
        Ok(Self { treated, control })
    }

    /// Outcome of the arm selected by `treated`.
    #[inline]
    pub fn select(&self, treated: bool) -> f64 {
        if treated {
            self.treated
        } else {
            self.control
        }
    }
}

/// A covariate field value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovariateValue {
    Real(f64),
    Categorical(String),
}

impl CovariateValue {
    pub fn as_real(&self) -> Option<f64> {
        match self {
            CovariateValue::Real(x) => Some(*x),
            CovariateValue::Categorical(_) => None,
        }
    }
}

/// Pre-treatment covariates of one unit: named real or categorical fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Covariate {
    pub fields: BTreeMap<String, CovariateValue>,
}

impl Covariate {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_real(mut self, name: impl Into<String>, value: f64) -> Self {
        self.fields.insert(name.into(), CovariateValue::Real(value));
        self
    }

    pub fn insert(&mut self, name: impl Into<String>, value: CovariateValue) {
        self.fields.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&CovariateValue> {
        self.fields.get(name)
    }

    pub fn real(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(CovariateValue::as_real)
    }
}

/// The ground-truth population a simulation holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSequence {
    units: Vec<PotentialOutcomes>,
    covariates: Option<Vec<Covariate>>,
}

impl OutcomeSequence {
    pub fn new(units: Vec<PotentialOutcomes>) -> Result<Self> {
        Self::with_covariates(units, None)
    }

    pub fn with_covariates(
        units: Vec<PotentialOutcomes>,
        covariates: Option<Vec<Covariate>>,
    ) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::Config("outcome sequence is empty".into()));
        }
        if let Some(cov) = &covariates {
            if cov.len() != units.len() {
                return Err(Error::Misaligned {
                    what: "covariates",
                    left: cov.len(),
                    right: units.len(),
                });
            }
        }
        for u in &units {
            PotentialOutcomes::new(u.treated, u.control)?;
        }
        Ok(Self { units, covariates })
    }

    /// Builds a sequence from `(y1, y0)` pairs.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        let units = pairs
            .iter()
            .map(|&(y1, y0)| PotentialOutcomes::new(y1, y0))
            .collect::<Result<Vec<_>>>()?;
        Self::new(units)
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn units(&self) -> &[PotentialOutcomes] {
        &self.units
    }

    pub fn covariates(&self) -> Option<&[Covariate]> {
        self.covariates.as_deref()
    }

    /// Replaces the covariates, keeping the outcomes.
    pub fn set_covariates(&mut self, covariates: Vec<Covariate>) -> Result<()> {
        if covariates.len() != self.units.len() {
            return Err(Error::Misaligned {
                what: "covariates",
                left: covariates.len(),
                right: self.units.len(),
            });
        }
        self.covariates = Some(covariates);
        Ok(())
    }

    /// First `len` units (all of them if `len` exceeds the length).
    pub fn truncated(&self, len: usize) -> Result<Self> {
        let n = len.min(self.units.len());
        Self::with_covariates(
            self.units[..n].to_vec(),
            self.covariates.as_ref().map(|c| c[..n].to_vec()),
        )
    }
}

/// One round of an executed design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Round index, starting at 1.
    pub round: usize,
    pub propensity: f64,
    pub treated: bool,
    /// The realized outcome `Y_t`.
    pub observed: f64,
}

impl Assignment {
    /// `Z/p - (1-Z)/(1-p)`, the IPW weight of this round.
    #[inline]
    pub fn ipw_weight(&self) -> f64 {
        if self.treated {
            1.0 / self.propensity
        } else {
            -1.0 / (1.0 - self.propensity)
        }
    }
}

/// The observable history of a run. The only input estimators get.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    records: Vec<Assignment>,
}

impl Trajectory {
    pub fn new(records: Vec<Assignment>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.round != i + 1 {
                return Err(Error::Config(format!(
                    "record {i} has round index {}, expected {}",
                    r.round,
                    i + 1
                )));
            }
            check_propensity(r.propensity, "recorded propensity")?;
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[Assignment] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn propensities(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.propensity)
    }
}

/// Constants `0 < c <= C` bounding the potential outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundednessConstants {
    pub lower: f64,
    pub upper: f64,
}

impl BoundednessConstants {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower > 0.0 && lower <= upper && upper.is_finite()) {
            return Err(Error::Config(format!(
                "bounds need 0 < c <= C, got c={lower}, C={upper}"
            )));
        }
        Ok(Self { lower, upper })
    }
}

/// Which clause of the outcome bounds failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundsClause {
    /// Some `|y_t(i)|` exceeds `C`.
    OutcomeAboveUpper,
    /// Some `sqrt(y_t(0)^2 + y_t(1)^2)` is below `c`.
    UnitNormBelowLower,
    /// A prefix root-mean-square of one arm is below `c`.
    ArmMomentBelowLower { treated: bool },
}

impl fmt::Display for BoundsClause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundsClause::OutcomeAboveUpper => write!(f, "outcome above C"),
            BoundsClause::UnitNormBelowLower => write!(f, "per-unit norm below c"),
            BoundsClause::ArmMomentBelowLower { treated } => write!(
                f,
                "prefix second moment of arm {} below c",
                if *treated { 1 } else { 0 }
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundsViolation {
    pub clause: BoundsClause,
    /// 1-based round where the clause first fails.
    pub round: usize,
}

impl fmt::Display for BoundsViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at round {}", self.clause, self.round)
    }
}

/// Checks the outcome bounds for every prefix of `seq`.
///
/// Returns `None` when all clauses hold, otherwise the first violation in
/// round order (within a round: upper bound, unit norm, arm moments).
pub fn verify_bounds(seq: &OutcomeSequence, k: &BoundednessConstants) -> Option<BoundsViolation> {
    let (mut sum1, mut sum0) = (0.0, 0.0);
    for (i, u) in seq.units().iter().enumerate() {
        let round = i + 1;
        let fail = |clause| Some(BoundsViolation { clause, round });
        if u.treated.abs() > k.upper || u.control.abs() > k.upper {
            return fail(BoundsClause::OutcomeAboveUpper);
        }
        if (u.treated * u.treated + u.control * u.control).sqrt() < k.lower {
            return fail(BoundsClause::UnitNormBelowLower);
        }
        sum1 += u.treated * u.treated;
        sum0 += u.control * u.control;
        let n = round as f64;
        if (sum1 / n).sqrt() < k.lower {
            return fail(BoundsClause::ArmMomentBelowLower { treated: true });
        }
        if (sum0 / n).sqrt() < k.lower {
            return fail(BoundsClause::ArmMomentBelowLower { treated: false });
        }
    }
    None
}

/// An adaptive design speaking the two-phase round protocol.
pub trait AdaptiveDesign {
    /// Whether [`AdaptiveDesign::propensity`] needs the unit's covariate.
    fn requires_covariates(&self) -> bool {
        false
    }

    /// Treatment probability for the arriving unit, before its coin flip.
    fn propensity(&mut self, covariate: Option<&Covariate>) -> Result<f64>;

    /// Feedback for the unit just assigned: the arm and its realized outcome.
    fn observe(&mut self, treated: bool, outcome: f64) -> Result<()>;

    /// Per-group propensities, for designs that maintain them.
    fn group_propensities(&self) -> Option<&[f64]> {
        None
    }
}

impl<D: AdaptiveDesign + ?Sized> AdaptiveDesign for Box<D> {
    fn requires_covariates(&self) -> bool {
        (**self).requires_covariates()
    }
    fn propensity(&mut self, covariate: Option<&Covariate>) -> Result<f64> {
        (**self).propensity(covariate)
    }
    fn observe(&mut self, treated: bool, outcome: f64) -> Result<()> {
        (**self).observe(treated, outcome)
    }
    fn group_propensities(&self) -> Option<&[f64]> {
        (**self).group_propensities()
    }
}

/// Source of treatment decisions.
pub trait TreatmentCoin {
    /// Returns `true` (treat) with probability `p`.
    fn flip(&mut self, p: f64) -> bool;
}

impl<R: Rng + ?Sized> TreatmentCoin for R {
    #[inline]
    fn flip(&mut self, p: f64) -> bool {
        self.random::<f64>() < p
    }
}

/// Predetermined decisions, for deterministic traces in tests.
#[derive(Debug, Clone)]
pub struct ScriptedCoins {
    decisions: Vec<bool>,
    next: usize,
}

impl ScriptedCoins {
    pub fn new(decisions: Vec<bool>) -> Self {
        Self { decisions, next: 0 }
    }
}

impl TreatmentCoin for ScriptedCoins {
    fn flip(&mut self, _p: f64) -> bool {
        let z = self.decisions[self.next % self.decisions.len()];
        self.next += 1;
        z
    }
}

/// Runs `design` over every unit of `seq`, drawing decisions from `coin`.
///
/// The design only ever sees the outcome of the selected arm.
pub fn run_design<D, C>(design: &mut D, seq: &OutcomeSequence, coin: &mut C) -> Result<Trajectory>
where
    D: AdaptiveDesign + ?Sized,
    C: TreatmentCoin + ?Sized,
{
    let covariates = seq.covariates();
    if design.requires_covariates() && covariates.is_none() {
        return Err(Error::Config(
            "contextual design needs a sequence with covariates".into(),
        ));
    }
    let mut records = Vec::with_capacity(seq.len());
    for (i, unit) in seq.units().iter().enumerate() {
        let p = design.propensity(covariates.map(|c| &c[i]))?;
        check_propensity(p, "design propensity")?;
        let treated = coin.flip(p);
        let observed = unit.select(treated);
        design.observe(treated, observed)?;
        records.push(Assignment {
            round: i + 1,
            propensity: p,
            treated,
            observed,
        });
    }
    Ok(Trajectory { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::designs::FixedDesign;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forced_coin_selects_the_right_arm() {
        let seq = OutcomeSequence::from_pairs(&[(2.0, 0.0)]).unwrap();
        for (z, y) in [(true, 2.0), (false, 0.0)] {
            let mut d = FixedDesign::new(0.5).unwrap();
            let traj = run_design(&mut d, &seq, &mut ScriptedCoins::new(vec![z])).unwrap();
            assert_eq!(
                traj.records(),
                &[Assignment {
                    round: 1,
                    propensity: 0.5,
                    treated: z,
                    observed: y
                }]
            );
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let seq =
            OutcomeSequence::from_pairs(&(0..50).map(|i| (i as f64, 1.0)).collect::<Vec<_>>())
                .unwrap();
        let run = |seed| {
            let mut d = FixedDesign::new(0.3).unwrap();
            run_design(&mut d, &seq, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn bounds_examples() {
        let k = BoundednessConstants::new(1.0, 2.0).unwrap();
        let ok = OutcomeSequence::from_pairs(&[(1.0, 2.0); 4]).unwrap();
        assert_eq!(verify_bounds(&ok, &k), None);

        let zero = OutcomeSequence::from_pairs(&[(1.0, 2.0), (0.0, 0.0)]).unwrap();
        let v = verify_bounds(&zero, &k).unwrap();
        assert_eq!(v.clause, BoundsClause::UnitNormBelowLower);
        assert_eq!(v.round, 2);
        assert_eq!(v.clause.to_string(), "per-unit norm below c");

        let big = OutcomeSequence::from_pairs(&[(3.0, 0.0)]).unwrap();
        let v = verify_bounds(&big, &k).unwrap();
        assert_eq!(v.clause, BoundsClause::OutcomeAboveUpper);
        assert_eq!(v.clause.to_string(), "outcome above C");
    }

    #[test]
    fn prefix_moment_clause_is_checked_per_prefix() {
        // the full-horizon control RMS is fine but the first prefix is not
        let k = BoundednessConstants::new(1.0, 3.0).unwrap();
        let seq = OutcomeSequence::from_pairs(&[(2.0, 0.5), (2.0, 3.0)]).unwrap();
        let v = verify_bounds(&seq, &k).unwrap();
        assert_eq!(
            v.clause,
            BoundsClause::ArmMomentBelowLower { treated: false }
        );
        assert_eq!(v.round, 1);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(OutcomeSequence::from_pairs(&[]).is_err());
        assert!(PotentialOutcomes::new(f64::NAN, 0.0).is_err());
        assert!(BoundednessConstants::new(2.0, 1.0).is_err());
        let bad = vec![Assignment {
            round: 2,
            propensity: 0.5,
            treated: true,
            observed: 0.0,
        }];
        assert!(Trajectory::new(bad).is_err());
    }

    struct NeedsContext;
    impl AdaptiveDesign for NeedsContext {
        fn requires_covariates(&self) -> bool {
            true
        }
        fn propensity(&mut self, _: Option<&Covariate>) -> Result<f64> {
            Ok(0.5)
        }
        fn observe(&mut self, _: bool, _: f64) -> Result<()> {
            Ok(())
        }
    }

    #[test]
    fn contextual_design_without_covariates_is_a_config_error() {
        let seq = OutcomeSequence::from_pairs(&[(1.0, 1.0)]).unwrap();
        let err = run_design(&mut NeedsContext, &seq, &mut ScriptedCoins::new(vec![true]));
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
