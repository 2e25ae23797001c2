//! Multigroup designs.
//!
//! One noncontextual learner per covariate-defined group proposes a
//! propensity; a sleeping-experts aggregator mixes the proposals of the
//! groups the arriving unit belongs to. Group learners receive unbiased
//! gradient estimates of their own Neyman objective even though the coin is
//! flipped with the mixed propensity.
//!
//! [`Mgate`] is the concrete design (clipped OGD per group, SOLO sleeping
//! experts). [`MultigroupMetaDesign`] composes arbitrary first-order
//! learners and sleeping-experts learners the same way.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::designs::{ClippingFunction, FirstOrderDesign, Schedule};
use crate::error::{check_propensity, Error, Result};
use crate::olo::{SleepingExperts, SleepingExpertsLearner, Solo};
use crate::protocol::{AdaptiveDesign, Covariate, CovariateValue};

/// Membership rule of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroupPredicate {
    /// Every unit.
    All,
    /// `lo <= x[field] <= hi`; a missing bound is unbounded.
    Interval {
        field: String,
        #[serde(default)]
        lo: Option<f64>,
        #[serde(default)]
        hi: Option<f64>,
    },
    /// A 0/1 membership column carried as a covariate field.
    Indicator { column: String },
}

impl GroupPredicate {
    pub fn contains(&self, x: &Covariate) -> bool {
        match self {
            GroupPredicate::All => true,
            GroupPredicate::Interval { field, lo, hi } => match x.real(field) {
                Some(v) => lo.is_none_or(|lo| lo <= v) && hi.is_none_or(|hi| v <= hi),
                None => false,
            },
            GroupPredicate::Indicator { column } => match x.get(column) {
                Some(CovariateValue::Real(v)) => *v == 1.0,
                Some(CovariateValue::Categorical(s)) => s == "1" || s == "true",
                None => false,
            },
        }
    }

    fn field(&self) -> Option<&str> {
        match self {
            GroupPredicate::All => None,
            GroupPredicate::Interval { field, .. } => Some(field),
            GroupPredicate::Indicator { column } => Some(column),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    #[serde(flatten)]
    pub predicate: GroupPredicate,
}

/// An ordered family of possibly overlapping groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFamily {
    pub groups: Vec<Group>,
}

impl GroupFamily {
    pub fn new(groups: Vec<Group>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Config("group family is empty".into()));
        }
        for (i, g) in groups.iter().enumerate() {
            if groups[..i].iter().any(|h| h.name == g.name) {
                return Err(Error::Config(format!("duplicate group name `{}`", g.name)));
            }
        }
        Ok(Self { groups })
    }

    /// The single group containing every unit.
    pub fn everything() -> Self {
        Self {
            groups: vec![Group {
                name: "all".into(),
                predicate: GroupPredicate::All,
            }],
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let fam: GroupFamily = serde_json::from_str(&text)?;
        Self::new(fam.groups)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.name.clone()).collect()
    }

    /// Activity vector of the unit with covariate `x`.
    pub fn activity(&self, x: &Covariate) -> Vec<bool> {
        self.groups
            .iter()
            .map(|g| g.predicate.contains(x))
            .collect()
    }

    /// `T x d` membership matrix.
    pub fn membership(&self, covariates: &[Covariate]) -> Vec<Vec<bool>> {
        covariates.iter().map(|x| self.activity(x)).collect()
    }

    /// Checks that every field the predicates reference exists in `x`.
    pub fn check_fields(&self, x: &Covariate) -> Result<()> {
        for g in &self.groups {
            if let Some(f) = g.predicate.field() {
                if x.get(f).is_none() {
                    return Err(Error::Config(format!(
                        "group `{}` references unknown covariate field `{f}`",
                        g.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Activity vector of `x` under `family`.
pub fn active_groups(x: &Covariate, family: &GroupFamily) -> Vec<bool> {
    family.activity(x)
}

/// `<v, p>`: the mixed propensity.
pub fn effective_propensity(dist: &[f64], group_propensities: &[f64]) -> f64 {
    dist.iter()
        .zip(group_propensities)
        .filter(|(v, _)| **v > 0.0)
        .map(|(v, p)| v * p)
        .sum()
}

#[inline]
fn importance_weight(treated: bool, p_eff: f64) -> f64 {
    if treated {
        1.0 / p_eff
    } else {
        1.0 / (1.0 - p_eff)
    }
}

/// Unbiased estimate of `f'(p_G)` when the coin used `p_eff`:
/// `Y^2 (Z/p_eff + (1-Z)/(1-p_eff)) (-Z/p_G^2 + (1-Z)/(1-p_G)^2)`.
pub fn mgate_gradient(observed: f64, treated: bool, p_eff: f64, p_group: f64) -> Result<f64> {
    check_propensity(p_eff, "effective propensity")?;
    check_propensity(p_group, "group propensity")?;
    let y2 = observed * observed;
    let inner = if treated {
        -1.0 / (p_group * p_group)
    } else {
        1.0 / ((1.0 - p_group) * (1.0 - p_group))
    };
    Ok(y2 * importance_weight(treated, p_eff) * inner)
}

/// Unbiased estimate of `f(p_G)` when the coin used `p_eff`:
/// `Y^2 (Z/p_eff + (1-Z)/(1-p_eff)) (Z/p_G + (1-Z)/(1-p_G))`.
pub fn mgate_loss(observed: f64, treated: bool, p_eff: f64, p_group: f64) -> Result<f64> {
    check_propensity(p_eff, "effective propensity")?;
    check_propensity(p_group, "group propensity")?;
    let y2 = observed * observed;
    let inner = if treated {
        1.0 / p_group
    } else {
        1.0 / (1.0 - p_group)
    };
    Ok(y2 * importance_weight(treated, p_eff) * inner)
}

/// Which group count indexes a group's step size and clipping rate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepIndexing {
    /// The update after a group's `n`-th activation uses `eta(n+1)`,
    /// `delta(n+1)`: the schedule of the round the new propensity is used
    /// in. A single all-units group then reproduces clipped OGD exactly.
    #[default]
    NextActivation,
    /// The update after the `n`-th activation uses `eta(n)`, `delta(n)`.
    CurrentCount,
}

#[derive(Debug, Clone)]
pub struct MgateConfig {
    /// Lower outcome bound; group step size is `1/(2 c^2 n)`.
    pub c: f64,
    pub clipping: ClippingFunction,
    /// Propensity used for units that belong to no group.
    pub fallback_propensity: f64,
    pub indexing: StepIndexing,
}

impl MgateConfig {
    pub fn new(c: f64, clipping: ClippingFunction) -> Self {
        Self {
            c,
            clipping,
            fallback_propensity: 0.5,
            indexing: StepIndexing::default(),
        }
    }
}

#[derive(Debug, Clone)]
enum Pending {
    Idle,
    NoGroup,
    Round { active: Vec<bool>, p_eff: f64 },
}

/// Multigroup design: per-group clipped OGD aggregated by SOLO sleeping experts.
#[derive(Debug, Clone)]
pub struct Mgate {
    family: GroupFamily,
    schedule: Schedule,
    fallback: f64,
    indexing: StepIndexing,
    group_propensities: Vec<f64>,
    group_counts: Vec<u64>,
    experts: SleepingExperts,
    pending: Pending,
}

impl Mgate {
    pub fn new(family: GroupFamily, config: MgateConfig) -> Result<Self> {
        let schedule = crate::designs::schedule_sc(config.c, config.clipping)?;
        check_propensity(config.fallback_propensity, "fallback propensity")?;
        let d = family.len();
        Ok(Self {
            family,
            schedule,
            fallback: config.fallback_propensity,
            indexing: config.indexing,
            group_propensities: vec![0.5; d],
            group_counts: vec![0; d],
            experts: SleepingExperts::new(d)?,
            pending: Pending::Idle,
        })
    }

    pub fn family(&self) -> &GroupFamily {
        &self.family
    }

    /// Propensity each group will propose at its next activation.
    pub fn propensities(&self) -> &[f64] {
        &self.group_propensities
    }

    /// Number of rounds each group has been active.
    pub fn counts(&self) -> &[u64] {
        &self.group_counts
    }

    /// Cumulative surrogate losses and squared norms behind the group weights.
    pub fn solo(&self) -> &Solo {
        self.experts.solo()
    }

    /// Current unnormalized group weights.
    pub fn weights(&self) -> Vec<f64> {
        self.experts.solo().weights()
    }
}

impl AdaptiveDesign for Mgate {
    fn requires_covariates(&self) -> bool {
        true
    }

    fn propensity(&mut self, covariate: Option<&Covariate>) -> Result<f64> {
        let x =
            covariate.ok_or_else(|| Error::Config("multigroup design needs covariates".into()))?;
        let active = self.family.activity(x);
        if !active.iter().any(|&a| a) {
            self.pending = Pending::NoGroup;
            return Ok(self.fallback);
        }
        for (n, &a) in self.group_counts.iter_mut().zip(&active) {
            *n += a as u64;
        }
        let dist = self.experts.distribution(&active)?;
        let p_eff = effective_propensity(&dist, &self.group_propensities);
        self.pending = Pending::Round { active, p_eff };
        Ok(p_eff)
    }

    fn observe(&mut self, treated: bool, outcome: f64) -> Result<()> {
        let (active, p_eff) = match std::mem::replace(&mut self.pending, Pending::Idle) {
            Pending::Round { active, p_eff } => (active, p_eff),
            Pending::NoGroup => return Ok(()),
            Pending::Idle => {
                return Err(Error::Config(
                    "feedback received before a propensity".into(),
                ))
            }
        };
        let mut losses = vec![0.0; active.len()];
        for g in 0..active.len() {
            if !active[g] {
                continue;
            }
            let p = self.group_propensities[g];
            let grad = mgate_gradient(outcome, treated, p_eff, p)?;
            losses[g] = mgate_loss(outcome, treated, p_eff, p)?;
            let n = match self.indexing {
                StepIndexing::NextActivation => self.group_counts[g] + 1,
                StepIndexing::CurrentCount => self.group_counts[g],
            };
            let delta = self.schedule.clip_rate(n);
            self.group_propensities[g] =
                (p - self.schedule.learning_rate(n) * grad).clamp(delta, 1.0 - delta);
        }
        self.experts.feed_loss(&losses)
    }

    fn group_propensities(&self) -> Option<&[f64]> {
        Some(&self.group_propensities)
    }
}

/// Multigroup composition of arbitrary first-order learners and a
/// sleeping-experts learner.
///
/// A group's learner advances only on rounds its group is active, so its
/// internal round counter is the group count.
pub struct MultigroupMetaDesign<L> {
    family: GroupFamily,
    learners: Vec<Box<dyn FirstOrderDesign + Send>>,
    experts: L,
    fallback: f64,
    advice: Vec<f64>,
    pending: Pending,
}

impl<L: SleepingExpertsLearner> MultigroupMetaDesign<L> {
    /// `factory(i)` builds the learner for group `i`.
    pub fn new<F>(family: GroupFamily, mut factory: F, experts: L, fallback: f64) -> Result<Self>
    where
        F: FnMut(usize) -> Box<dyn FirstOrderDesign + Send>,
    {
        if experts.dim() != family.len() {
            return Err(Error::Config(format!(
                "sleeping-experts learner has {} experts for {} groups",
                experts.dim(),
                family.len()
            )));
        }
        check_propensity(fallback, "fallback propensity")?;
        let learners = (0..family.len()).map(&mut factory).collect();
        Ok(Self {
            advice: vec![0.5; family.len()],
            family,
            learners,
            experts,
            fallback,
            pending: Pending::Idle,
        })
    }

    /// Most recent advice of each group's learner.
    pub fn advice(&self) -> &[f64] {
        &self.advice
    }

    pub fn experts(&self) -> &L {
        &self.experts
    }
}

impl<L: SleepingExpertsLearner> AdaptiveDesign for MultigroupMetaDesign<L> {
    fn requires_covariates(&self) -> bool {
        true
    }

    fn propensity(&mut self, covariate: Option<&Covariate>) -> Result<f64> {
        let x =
            covariate.ok_or_else(|| Error::Config("multigroup design needs covariates".into()))?;
        let active = self.family.activity(x);
        if !active.iter().any(|&a| a) {
            self.pending = Pending::NoGroup;
            return Ok(self.fallback);
        }
        for (g, &a) in active.iter().enumerate() {
            if a {
                self.advice[g] = self.learners[g].next_propensity();
                check_propensity(self.advice[g], "group learner propensity")?;
            }
        }
        let dist = self.experts.distribution(&active)?;
        let p_eff = effective_propensity(&dist, &self.advice);
        self.pending = Pending::Round { active, p_eff };
        Ok(p_eff)
    }

    fn observe(&mut self, treated: bool, outcome: f64) -> Result<()> {
        let (active, p_eff) = match std::mem::replace(&mut self.pending, Pending::Idle) {
            Pending::Round { active, p_eff } => (active, p_eff),
            Pending::NoGroup => return Ok(()),
            Pending::Idle => {
                return Err(Error::Config(
                    "feedback received before a propensity".into(),
                ))
            }
        };
        let mut losses = vec![0.0; active.len()];
        for g in 0..active.len() {
            if active[g] {
                let p = self.advice[g];
                losses[g] = mgate_loss(outcome, treated, p_eff, p)?;
                let grad = mgate_gradient(outcome, treated, p_eff, p)?;
                self.learners[g].ingest_gradient(grad);
            }
        }
        self.experts.feed_loss(&losses)
    }

    fn group_propensities(&self) -> Option<&[f64]> {
        Some(&self.advice)
    }
}
