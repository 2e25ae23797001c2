//! Inference from a trajectory: the adaptive IPW estimate of the ATE, the
//! conservative variance-bound estimate and Chebyshev-type intervals.
//!
//! Everything here except [`true_ate`] and [`correlation_diagnostic`] reads
//! the trajectory only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{OutcomeSequence, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteEstimate {
    pub tau_hat: f64,
    pub rounds: usize,
}

/// `(1/T) sum Y_t (Z_t/p_t - (1-Z_t)/(1-p_t))`.
pub fn ipw_estimate(traj: &Trajectory) -> Result<AteEstimate> {
    if traj.is_empty() {
        return Err(Error::Config(
            "cannot estimate from an empty trajectory".into(),
        ));
    }
    let sum: f64 = traj
        .records()
        .iter()
        .map(|r| r.observed * r.ipw_weight())
        .sum();
    Ok(AteEstimate {
        tau_hat: sum / traj.len() as f64,
        rounds: traj.len(),
    })
}

/// Finite-population ATE. Needs both potential outcomes.
pub fn true_ate(seq: &OutcomeSequence) -> f64 {
    let sum: f64 = seq.units().iter().map(|u| u.treated - u.control).sum();
    sum / seq.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceBoundEstimate {
    pub vb_hat: f64,
    /// `(1/T) sum Y^2 Z / p`.
    pub treated_moment: f64,
    /// `(1/T) sum Y^2 (1-Z) / (1-p)`.
    pub control_moment: f64,
    /// One of the arms was never observed, so `vb_hat` is zero.
    pub degenerate: bool,
}

/// `(4/T) sqrt(treated_moment * control_moment)`.
pub fn variance_bound_estimate(traj: &Trajectory) -> Result<VarianceBoundEstimate> {
    if traj.is_empty() {
        return Err(Error::Config(
            "cannot estimate from an empty trajectory".into(),
        ));
    }
    let n = traj.len() as f64;
    let (mut treated, mut control) = (0.0, 0.0);
    let (mut any_treated, mut any_control) = (false, false);
    for r in traj.records() {
        let y2 = r.observed * r.observed;
        if r.treated {
            treated += y2 / r.propensity;
            any_treated = true;
        } else {
            control += y2 / (1.0 - r.propensity);
            any_control = true;
        }
    }
    let (treated, control) = (treated / n, control / n);
    let vb_hat = 4.0 / n * (treated * control).sqrt();
    Ok(VarianceBoundEstimate {
        vb_hat,
        treated_moment: treated,
        control_moment: control,
        degenerate: !(any_treated && any_control) || vb_hat == 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
    pub alpha: f64,
    /// Zero-width interval from a zero variance bound.
    pub degenerate: bool,
}

impl ConfidenceInterval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }
}

/// `tau_hat +- alpha^(-1/2) sqrt(vb_hat)`.
pub fn chebyshev_ci(
    est: &AteEstimate,
    vb: &VarianceBoundEstimate,
    alpha: f64,
) -> Result<ConfidenceInterval> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    let half = vb.vb_hat.sqrt() / alpha.sqrt();
    Ok(ConfidenceInterval {
        lo: est.tau_hat - half,
        hi: est.tau_hat + half,
        alpha,
        degenerate: half == 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationDiagnostic {
    /// Running correlation `rho_T`.
    pub rho: f64,
    /// Root second moment `S_T(1)`.
    pub treated_rms: f64,
    /// Root second moment `S_T(0)`.
    pub control_rms: f64,
    /// Population variance bound `(4/T) S_T(1) S_T(0)`.
    pub variance_bound: f64,
}

pub fn correlation_diagnostic(seq: &OutcomeSequence) -> Result<CorrelationDiagnostic> {
    let n = seq.len() as f64;
    let (mut s11, mut s00, mut s10) = (0.0, 0.0, 0.0);
    for u in seq.units() {
        s11 += u.treated * u.treated;
        s00 += u.control * u.control;
        s10 += u.treated * u.control;
    }
    let treated_rms = (s11 / n).sqrt();
    let control_rms = (s00 / n).sqrt();
    if treated_rms == 0.0 || control_rms == 0.0 {
        return Err(Error::Domain(format!(
            "correlation undefined: second moments are ({}, {})",
            treated_rms * treated_rms,
            control_rms * control_rms
        )));
    }
    Ok(CorrelationDiagnostic {
        rho: (s10 / n) / (treated_rms * control_rms),
        treated_rms,
        control_rms,
        variance_bound: 4.0 / n * treated_rms * control_rms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Assignment;
    use proptest::prelude::*;

    fn traj(recs: &[(f64, bool, f64)]) -> Trajectory {
        Trajectory::new(
            recs.iter()
                .enumerate()
                .map(|(i, &(p, z, y))| Assignment {
                    round: i + 1,
                    propensity: p,
                    treated: z,
                    observed: y,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn ipw_examples() {
        assert_eq!(
            ipw_estimate(&traj(&[(0.5, true, 2.0)])).unwrap().tau_hat,
            4.0
        );
        assert_eq!(
            ipw_estimate(&traj(&[(0.5, false, 2.0)])).unwrap().tau_hat,
            -4.0
        );
        let zeros = traj(&[(0.3, true, 0.0), (0.6, false, 0.0)]);
        assert_eq!(ipw_estimate(&zeros).unwrap().tau_hat, 0.0);
        assert!(ipw_estimate(&Trajectory::default()).is_err());
    }

    #[test]
    fn true_ate_examples() {
        let s = |p: &[(f64, f64)]| OutcomeSequence::from_pairs(p).unwrap();
        assert_eq!(true_ate(&s(&[(2.0, 1.0); 3])), 1.0);
        assert_eq!(true_ate(&s(&[(1.0, 0.0), (0.0, 1.0)])), 0.0);
        assert_eq!(true_ate(&s(&[(3.0, 1.0), (2.0, 2.0)])), 1.0);
    }

    #[test]
    fn variance_bound_examples() {
        let vb = variance_bound_estimate(&traj(&[(0.5, true, 2.0), (0.5, false, 1.0)])).unwrap();
        assert_eq!(vb.treated_moment, 4.0);
        assert_eq!(vb.control_moment, 1.0);
        assert_eq!(vb.vb_hat, 4.0);
        assert!(!vb.degenerate);

        let vb = variance_bound_estimate(&traj(&[(0.5, true, 2.0), (0.4, true, 1.0)])).unwrap();
        assert_eq!(vb.control_moment, 0.0);
        assert_eq!(vb.vb_hat, 0.0);
        assert!(vb.degenerate);
    }

    #[test]
    fn variance_bound_components_are_unbiased_at_t2() {
        let ys = [(2.0, 1.0), (-1.5, 3.0)];
        let ps = [0.3, 0.8];
        let (mut e1, mut e0) = (0.0, 0.0);
        for mask in 0..4u32 {
            let zs = [mask & 1 == 1, mask & 2 == 2];
            let prob: f64 = (0..2)
                .map(|i| if zs[i] { ps[i] } else { 1.0 - ps[i] })
                .product();
            let t = traj(&[
                (ps[0], zs[0], if zs[0] { ys[0].0 } else { ys[0].1 }),
                (ps[1], zs[1], if zs[1] { ys[1].0 } else { ys[1].1 }),
            ]);
            let vb = variance_bound_estimate(&t).unwrap();
            e1 += prob * vb.treated_moment;
            e0 += prob * vb.control_moment;
        }
        assert!((e1 - (4.0 + 2.25) / 2.0).abs() < 1e-12);
        assert!((e0 - (1.0 + 9.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ci_examples() {
        let est = AteEstimate {
            tau_hat: 4.0,
            rounds: 2,
        };
        let vb = VarianceBoundEstimate {
            vb_hat: 4.0,
            treated_moment: 4.0,
            control_moment: 1.0,
            degenerate: false,
        };
        let ci = chebyshev_ci(&est, &vb, 0.25).unwrap();
        assert_eq!((ci.lo, ci.hi), (0.0, 8.0));
        assert_eq!(chebyshev_ci(&est, &vb, 1.0).unwrap().half_width(), 2.0);
        let zero = VarianceBoundEstimate { vb_hat: 0.0, ..vb };
        let ci = chebyshev_ci(&est, &zero, 0.1).unwrap();
        assert!(ci.degenerate);
        assert_eq!(ci.lo, ci.hi);
        assert!(chebyshev_ci(&est, &vb, 0.0).is_err());
        assert!(chebyshev_ci(&est, &vb, 1.5).is_err());
    }

    #[test]
    fn correlation_examples() {
        let s = |p: &[(f64, f64)]| OutcomeSequence::from_pairs(p).unwrap();
        assert!((correlation_diagnostic(&s(&[(1.0, 1.0); 4])).unwrap().rho - 1.0).abs() < 1e-15);
        assert!((correlation_diagnostic(&s(&[(1.0, -1.0); 4])).unwrap().rho + 1.0).abs() < 1e-15);
        let d = correlation_diagnostic(&s(&[(2.0, 1.0), (1.0, 2.0)])).unwrap();
        assert!((d.rho - 0.8).abs() < 1e-15);
        assert!((d.treated_rms - 2.5f64.sqrt()).abs() < 1e-15);
        assert!(correlation_diagnostic(&s(&[(1.0, 0.0)])).is_err());
    }

    #[test]
    fn exact_unbiasedness_by_enumeration() {
        let ys = [(2.0, 1.0), (-1.0, 0.5), (3.0, 3.0), (0.2, -2.0)];
        let ps = [0.5, 0.2, 0.9, 0.35];
        let seq = OutcomeSequence::from_pairs(&ys).unwrap();
        let mut mean = 0.0;
        for mask in 0..16u32 {
            let mut prob = 1.0;
            let mut recs = Vec::new();
            for i in 0..4 {
                let z = mask >> i & 1 == 1;
                prob *= if z { ps[i] } else { 1.0 - ps[i] };
                recs.push((ps[i], z, if z { ys[i].0 } else { ys[i].1 }));
            }
            mean += prob * ipw_estimate(&traj(&recs)).unwrap().tau_hat;
        }
        assert!((mean - true_ate(&seq)).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn per_round_ipw_is_exactly_unbiased(y1 in -100.0f64..100.0, y0 in -100.0f64..100.0, p in 0.001f64..0.999) {
            let e = p * (y1 / p) + (1.0 - p) * (-y0 / (1.0 - p));
            prop_assert!((e - (y1 - y0)).abs() <= 1e-12 * (y1.abs() + y0.abs()).max(1.0));
        }

        #[test]
        fn population_bound_dominates(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40)) {
            let seq = OutcomeSequence::from_pairs(&pairs).unwrap();
            if let Ok(d) = correlation_diagnostic(&seq) {
                let n = seq.len() as f64;
                let opt = 2.0 / n * (1.0 + d.rho) * d.treated_rms * d.control_rms;
                prop_assert!(opt <= d.variance_bound * (1.0 + 1e-12));
            }
        }

        #[test]
        fn smaller_alpha_gives_wider_interval(a in 0.01f64..1.0, b in 0.01f64..1.0, vb in 0.0f64..10.0) {
            let est = AteEstimate { tau_hat: 1.0, rounds: 10 };
            let v = VarianceBoundEstimate { vb_hat: vb, treated_moment: 0.0, control_moment: 0.0, degenerate: false };
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(chebyshev_ci(&est, &v, lo).unwrap().half_width() >= chebyshev_ci(&est, &v, hi).unwrap().half_width());
        }
    }
}
