//! Simulation-only evaluation against the hindsight-best fixed propensity.
//!
//! These functions read both potential outcomes and must never feed back
//! into a design.

use serde::{Deserialize, Serialize};

use crate::error::{check_propensity, Error, Result};
use crate::protocol::{OutcomeSequence, PotentialOutcomes, Trajectory};

/// Per-round Neyman objective `y1^2/p + y0^2/(1-p)`.
pub fn neyman_objective(y1: f64, y0: f64, p: f64) -> Result<f64> {
    check_propensity(p, "propensity")?;
    Ok(y1 * y1 / p + y0 * y0 / (1.0 - p))
}

/// Minimizer of the cumulative objective over a set of units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparator {
    /// `sqrt(A) / (sqrt(A) + sqrt(B))`; 0 or 1 when one arm is all zero.
    pub propensity: f64,
    /// `min_p sum f_t(p) = (sqrt(A) + sqrt(B))^2` (an infimum when degenerate).
    pub value: f64,
    /// The minimum is only approached at the boundary.
    pub degenerate: bool,
}

impl Comparator {
    /// From the arm sums of squares `A = sum y(1)^2`, `B = sum y(0)^2`.
    pub fn from_moments(treated_sq: f64, control_sq: f64) -> Result<Self> {
        if treated_sq == 0.0 && control_sq == 0.0 {
            return Err(Error::Domain(
                "optimal propensity undefined: all outcomes are zero".into(),
            ));
        }
        let (a, b) = (treated_sq.sqrt(), control_sq.sqrt());
        Ok(Self {
            propensity: a / (a + b),
            value: (a + b) * (a + b),
            degenerate: a == 0.0 || b == 0.0,
        })
    }
}

fn arm_moments(units: &[PotentialOutcomes]) -> (f64, f64) {
    units.iter().fold((0.0, 0.0), |(a, b), u| {
        (a + u.treated * u.treated, b + u.control * u.control)
    })
}

/// Closed-form hindsight-optimal fixed propensity.
pub fn optimal_propensity(units: &[PotentialOutcomes]) -> Result<Comparator> {
    let (a, b) = arm_moments(units);
    Comparator::from_moments(a, b)
}

/// Brute-force minimizer of the cumulative objective over the grid
/// `{res, 2 res, ..., 1 - res}`.
pub fn optimal_propensity_grid(units: &[PotentialOutcomes], resolution: f64) -> f64 {
    let steps = (1.0 / resolution).round() as usize;
    let mut best = (f64::INFINITY, 0.5);
    for k in 1..steps {
        let p = k as f64 * resolution;
        let total: f64 = units
            .iter()
            .map(|u| u.treated * u.treated / p + u.control * u.control / (1.0 - p))
            .sum();
        if total < best.0 {
            best = (total, p);
        }
    }
    best.1
}

/// Running regret `RegVar_t` for `t = 1..T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretCurve {
    pub values: Vec<f64>,
}

impl RegretCurve {
    pub fn last(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }
}

/// Accumulates the regret of a subsequence with a per-prefix comparator.
#[derive(Debug, Clone, Default)]
struct RegretAccumulator {
    design_loss: f64,
    treated_sq: f64,
    control_sq: f64,
}

impl RegretAccumulator {
    fn push(&mut self, u: &PotentialOutcomes, p: f64) -> Result<()> {
        self.design_loss += neyman_objective(u.treated, u.control, p)?;
        self.treated_sq += u.treated * u.treated;
        self.control_sq += u.control * u.control;
        Ok(())
    }

    fn regret(&self) -> f64 {
        let best = self.treated_sq.sqrt() + self.control_sq.sqrt();
        self.design_loss - best * best
    }
}

fn check_aligned(traj: &Trajectory, seq: &OutcomeSequence) -> Result<()> {
    if traj.len() != seq.len() {
        return Err(Error::Misaligned {
            what: "trajectory and outcome sequence",
            left: traj.len(),
            right: seq.len(),
        });
    }
    Ok(())
}

/// `RegVar_t = sum_{s<=t} f_s(p_s) - min_p sum_{s<=t} f_s(p)` for every prefix.
pub fn neyman_regret(traj: &Trajectory, seq: &OutcomeSequence) -> Result<RegretCurve> {
    check_aligned(traj, seq)?;
    let mut acc = RegretAccumulator::default();
    let mut values = Vec::with_capacity(traj.len());
    for (r, u) in traj.records().iter().zip(seq.units()) {
        acc.push(u, r.propensity)?;
        values.push(acc.regret());
    }
    Ok(RegretCurve { values })
}

/// Regret restricted to one group, indexed by global round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRegretCurve {
    pub name: String,
    /// Regret over the group's units among the first `t` rounds.
    pub values: Vec<f64>,
    /// Number of the group's units among the first `t` rounds.
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRegretReport {
    pub groups: Vec<GroupRegretCurve>,
    /// Max over groups, per round.
    pub multigroup: Vec<f64>,
}

/// Group-conditional and multigroup regret. `membership[t][g]` says whether
/// unit `t` belongs to group `g`.
pub fn group_regret(
    traj: &Trajectory,
    seq: &OutcomeSequence,
    membership: &[Vec<bool>],
    names: &[String],
) -> Result<GroupRegretReport> {
    check_aligned(traj, seq)?;
    if membership.len() != seq.len() {
        return Err(Error::Misaligned {
            what: "membership matrix",
            left: membership.len(),
            right: seq.len(),
        });
    }
    let d = names.len();
    if let Some(row) = membership.iter().find(|row| row.len() != d) {
        return Err(Error::Misaligned {
            what: "membership row",
            left: row.len(),
            right: d,
        });
    }
    let n = seq.len();
    let mut accs = vec![RegretAccumulator::default(); d];
    let mut counts = vec![0usize; d];
    let mut groups: Vec<GroupRegretCurve> = names
        .iter()
        .map(|name| GroupRegretCurve {
            name: name.clone(),
            values: Vec::with_capacity(n),
            counts: Vec::with_capacity(n),
        })
        .collect();
    let mut multigroup = Vec::with_capacity(n);
    for ((r, u), row) in traj.records().iter().zip(seq.units()).zip(membership) {
        let mut worst = f64::NEG_INFINITY;
        for g in 0..d {
            if row[g] {
                accs[g].push(u, r.propensity)?;
                counts[g] += 1;
            }
            let v = accs[g].regret();
            groups[g].values.push(v);
            groups[g].counts.push(counts[g]);
            worst = worst.max(v);
        }
        multigroup.push(if d == 0 { 0.0 } else { worst });
    }
    Ok(GroupRegretReport { groups, multigroup })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::designs::FixedDesign;
    use crate::protocol::{run_design, verify_bounds, BoundednessConstants, ScriptedCoins};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn units(pairs: &[(f64, f64)]) -> Vec<PotentialOutcomes> {
        pairs
            .iter()
            .map(|&(a, b)| PotentialOutcomes::new(a, b).unwrap())
            .collect()
    }

    #[test]
    fn objective_examples() {
        assert_eq!(neyman_objective(1.0, 1.0, 0.5).unwrap(), 4.0);
        assert!((neyman_objective(2.0, 1.0, 0.25).unwrap() - (16.0 + 4.0 / 3.0)).abs() < 1e-12);
        assert_eq!(neyman_objective(0.0, 0.0, 0.3).unwrap(), 0.0);
        assert!(neyman_objective(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn optimal_propensity_examples() {
        let c = optimal_propensity(&units(&[(2.0, 1.0); 5])).unwrap();
        assert!((c.propensity - 2.0 / 3.0).abs() < 1e-15);
        assert!(
            (optimal_propensity_grid(&units(&[(2.0, 1.0); 5]), 1e-4) - 2.0 / 3.0).abs() <= 1e-4
        );
        assert_eq!(
            optimal_propensity(&units(&[(1.5, 1.5); 3]))
                .unwrap()
                .propensity,
            0.5
        );
        assert_eq!(
            optimal_propensity(&units(&[(1.0, 3.0)]))
                .unwrap()
                .propensity,
            0.25
        );
        assert!((optimal_propensity_grid(&units(&[(1.0, 3.0)]), 1e-4) - 0.25).abs() <= 1e-4);
        assert_eq!(optimal_propensity_grid(&units(&[(1.0, 1.0)]), 0.1), 0.5);
        assert!(optimal_propensity(&units(&[(0.0, 0.0)])).is_err());
    }

    #[test]
    fn degenerate_comparator_reports_infimum() {
        let c = optimal_propensity(&units(&[(2.0, 0.0), (1.0, 0.0)])).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.propensity, 1.0);
        assert!((c.value - 5.0).abs() < 1e-12);
    }

    #[test]
    fn closed_form_agrees_with_grid_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.random_range(1..20);
            let u: Vec<_> = (0..n)
                .map(|_| {
                    PotentialOutcomes::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))
                        .unwrap()
                })
                .collect();
            let closed = optimal_propensity(&u).unwrap().propensity;
            let grid = optimal_propensity_grid(&u, 1e-4);
            assert!((closed - grid).abs() <= 1e-4, "{closed} vs {grid}");
        }
    }

    #[test]
    fn regret_examples() {
        let seq = OutcomeSequence::from_pairs(&[(2.0, 1.0); 20]).unwrap();
        let coins = ScriptedCoins::new(vec![true, false, false]);
        let mut d = FixedDesign::new(2.0 / 3.0).unwrap();
        let traj = run_design(&mut d, &seq, &mut coins.clone()).unwrap();
        let curve = neyman_regret(&traj, &seq).unwrap();
        assert!(curve.values.iter().all(|v| v.abs() < 1e-12));

        let one = OutcomeSequence::from_pairs(&[(2.0, 1.0)]).unwrap();
        let mut d = FixedDesign::new(0.5).unwrap();
        let traj = run_design(&mut d, &one, &mut coins.clone()).unwrap();
        assert!((neyman_regret(&traj, &one).unwrap().last() - 1.0).abs() < 1e-12);

        assert!(neyman_regret(&traj, &seq).is_err());
    }

    #[test]
    fn group_regret_examples() {
        let seq =
            OutcomeSequence::from_pairs(&[(1.0, 3.0), (3.0, 1.0), (1.0, 3.0), (3.0, 1.0)]).unwrap();
        let mut d = FixedDesign::new(0.25).unwrap();
        let traj = run_design(&mut d, &seq, &mut ScriptedCoins::new(vec![true])).unwrap();
        let membership: Vec<Vec<bool>> = (0..4)
            .map(|i| vec![i % 2 == 0, i % 2 == 1, false])
            .collect();
        let names = vec!["a".to_string(), "b".to_string(), "empty".to_string()];
        let r = group_regret(&traj, &seq, &membership, &names).unwrap();
        assert!(r.groups[0].values.iter().all(|v| v.abs() < 1e-12));
        // group b: 2 units of (3,1) at p = 1/4: 2 * (36 + 4/3) - 2 * 16
        let expected = 2.0 * (36.0 + 4.0 / 3.0) - 2.0 * 16.0;
        assert!((r.groups[1].values[3] - expected).abs() < 1e-9);
        assert!(r.groups[2].values.iter().all(|&v| v == 0.0));
        assert_eq!(r.groups[1].counts, vec![0, 1, 1, 2]);
        assert_eq!(r.multigroup[3], r.groups[1].values[3]);

        let all = group_regret(&traj, &seq, &vec![vec![true]; 4], &["all".to_string()]).unwrap();
        assert_eq!(
            all.groups[0].values,
            neyman_regret(&traj, &seq).unwrap().values
        );
    }

    proptest! {
        #[test]
        fn optimum_within_bounds(pairs in prop::collection::vec((0.5f64..3.0, 0.5f64..3.0, any::<bool>(), any::<bool>()), 1..50)) {
            let pairs: Vec<(f64, f64)> = pairs.iter()
                .map(|&(a, b, sa, sb)| (if sa { a } else { -a }, if sb { b } else { -b }))
                .collect();
            let seq = OutcomeSequence::from_pairs(&pairs).unwrap();
            let k = BoundednessConstants::new(0.5, 3.0).unwrap();
            prop_assume!(verify_bounds(&seq, &k).is_none());
            let p = optimal_propensity(seq.units()).unwrap().propensity;
            let a = 1.0 + k.upper / k.lower;
            prop_assert!(1.0 / a <= p && p <= 1.0 - 1.0 / a);
        }

        #[test]
        fn comparator_loss_is_nondecreasing(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..60)) {
            let u = units(&pairs);
            let mut prev = 0.0;
            for t in 1..=u.len() {
                if let Ok(c) = optimal_propensity(&u[..t]) {
                    prop_assert!(c.value >= prev * (1.0 - 1e-12));
                    prev = c.value;
                }
            }
        }

        #[test]
        fn fixed_design_regret_is_nonnegative(
            pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..60),
            p in 0.01f64..0.99,
        ) {
            let seq = OutcomeSequence::from_pairs(&pairs).unwrap();
            let mut d = FixedDesign::new(p).unwrap();
            let traj = run_design(&mut d, &seq, &mut ScriptedCoins::new(vec![true, false])).unwrap();
            for v in neyman_regret(&traj, &seq).unwrap().values {
                prop_assert!(v >= -1e-9 * (1.0 + v.abs()));
            }
        }
    }
}
