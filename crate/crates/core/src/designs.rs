//! Noncontextual designs: fixed Bernoulli and clipped online gradient
//! descent on the per-round Neyman objective `f_t(p) = y1^2/p + y0^2/(1-p)`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_propensity, Error, Result};
use crate::protocol::{AdaptiveDesign, Covariate};

/// Clipping function `h`; the clipping rate at round `t` is `1/h(t)`.
#[derive(Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ClippingFunction {
    /// `h(t) = exp((ln(t + 2))^(1/4))`.
    #[default]
    ExpRootLog,
    /// `h(t) = scale * (t + 1)^exponent`.
    Power { scale: f64, exponent: f64 },
    #[serde(skip)]
    Custom(Arc<dyn Fn(u64) -> f64 + Send + Sync>),
}

impl fmt::Debug for ClippingFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClippingFunction::ExpRootLog => write!(f, "ExpRootLog"),
            ClippingFunction::Power { scale, exponent } => {
                write!(f, "Power {{ scale: {scale}, exponent: {exponent} }}")
            }
            ClippingFunction::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl ClippingFunction {
    /// Wraps an arbitrary `h`. Checked on rounds `1..=10_000` to be strictly
    /// increasing with `h(1) > 2`.
    pub fn custom(h: impl Fn(u64) -> f64 + Send + Sync + 'static) -> Result<Self> {
        let f = ClippingFunction::Custom(Arc::new(h));
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if let ClippingFunction::Power { scale, exponent } = self {
            if !(*exponent > 0.0 && scale.is_finite() && *exponent < f64::INFINITY) {
                return Err(Error::Config(format!(
                    "power clipping needs a positive exponent, got {exponent}"
                )));
            }
        }
        let mut prev = self.eval(1);
        if !(prev > 2.0) {
            return Err(Error::Config(format!(
                "clipping function must exceed 2 at t=1, got {prev}"
            )));
        }
        for t in 2..=10_000 {
            let v = self.eval(t);
            if !(v > prev) {
                return Err(Error::Config(format!(
                    "clipping function is not strictly increasing at t={t}"
                )));
            }
            prev = v;
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, t: u64) -> f64 {
        let t = t as f64;
        match self {
            ClippingFunction::ExpRootLog => (t + 2.0).ln().powf(0.25).exp(),
            ClippingFunction::Power { scale, exponent } => scale * (t + 1.0).powf(*exponent),
            ClippingFunction::Custom(h) => h(t as u64),
        }
    }
}

/// Learning-rate and clipping-rate schedule of a clipped OGD design.
#[derive(Debug, Clone)]
pub enum Schedule {
    /// `eta = 1/sqrt(T)`, `delta_t = 0.5 * t^(-1/sqrt(5 ln T))`. Needs the horizon.
    Zero { horizon: u64 },
    /// `eta_t = 1/(2 c^2 t)`, `delta_t = 1/h(t)`. Anytime.
    StronglyConvex { c: f64, clipping: ClippingFunction },
}

/// Horizon-tuned schedule. `horizon` must be at least 2.
pub fn schedule_zero(horizon: u64) -> Result<Schedule> {
    if horizon < 2 {
        return Err(Error::Config(format!(
            "horizon-tuned schedule needs T >= 2, got {horizon}"
        )));
    }
    Ok(Schedule::Zero { horizon })
}

/// Strongly-convex schedule for lower outcome bound `c`.
pub fn schedule_sc(c: f64, clipping: ClippingFunction) -> Result<Schedule> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Config(format!("c must be positive, got {c}")));
    }
    clipping.validate()?;
    Ok(Schedule::StronglyConvex { c, clipping })
}

impl Schedule {
    #[inline]
    pub fn learning_rate(&self, t: u64) -> f64 {
        match self {
            Schedule::Zero { horizon } => 1.0 / (*horizon as f64).sqrt(),
            Schedule::StronglyConvex { c, .. } => 1.0 / (2.0 * c * c * t as f64),
        }
    }

    #[inline]
    pub fn clip_rate(&self, t: u64) -> f64 {
        match self {
            Schedule::Zero { horizon } => {
                let alpha = (5.0 * (*horizon as f64).ln()).sqrt();
                0.5 * (t as f64).powf(-1.0 / alpha)
            }
            Schedule::StronglyConvex { clipping, .. } => 1.0 / clipping.eval(t),
        }
    }
}

/// Inverse-propensity estimate of `f_t'(p)` from the realized outcome:
/// `Y^2 (-Z/p^3 + (1-Z)/(1-p)^3)`.
pub fn gradient_estimate(observed: f64, treated: bool, p: f64) -> Result<f64> {
    check_propensity(p, "propensity")?;
    let y2 = observed * observed;
    Ok(if treated {
        -y2 / (p * p * p)
    } else {
        let q = 1.0 - p;
        y2 / (q * q * q)
    })
}

/// A noncontextual learner driven by gradient feedback alone.
///
/// Each round it emits a propensity, then receives an unbiased estimate of
/// the Neyman objective's derivative at that propensity.
pub trait FirstOrderDesign {
    /// Propensity for this learner's next round.
    fn next_propensity(&mut self) -> f64;

    /// Gradient feedback for the propensity last emitted.
    fn ingest_gradient(&mut self, gradient: f64);
}

impl<D: FirstOrderDesign + ?Sized> FirstOrderDesign for Box<D> {
    fn next_propensity(&mut self) -> f64 {
        (**self).next_propensity()
    }
    fn ingest_gradient(&mut self, gradient: f64) {
        (**self).ingest_gradient(gradient)
    }
}

/// Nonadaptive Bernoulli design.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedDesign {
    p: f64,
}

impl FixedDesign {
    pub fn new(p: f64) -> Result<Self> {
        check_propensity(p, "fixed propensity")?;
        Ok(Self { p })
    }

    pub fn propensity_value(&self) -> f64 {
        self.p
    }
}

impl FirstOrderDesign for FixedDesign {
    fn next_propensity(&mut self) -> f64 {
        self.p
    }
    fn ingest_gradient(&mut self, _: f64) {}
}

impl AdaptiveDesign for FixedDesign {
    fn propensity(&mut self, _: Option<&Covariate>) -> Result<f64> {
        Ok(self.p)
    }
    fn observe(&mut self, _: bool, _: f64) -> Result<()> {
        Ok(())
    }
}

/// Clipped online gradient descent on the Neyman objective.
///
/// Round `t` emits `p_t = clamp(p_{t-1} - eta_t g_{t-1}, delta_t, 1 - delta_t)`
/// starting from `p_0 = 0.5`, `g_0 = 0`. The gradient is stored raw; only
/// the iterate is clipped.
#[derive(Debug, Clone)]
pub struct ClipOgd {
    schedule: Schedule,
    /// Rounds emitted so far.
    round: u64,
    last_propensity: f64,
    last_gradient: f64,
}

impl ClipOgd {
    pub fn new(schedule: Schedule) -> Self {
        Self {
            schedule,
            round: 0,
            last_propensity: 0.5,
            last_gradient: 0.0,
        }
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    /// Number of propensities emitted so far.
    pub fn round(&self) -> u64 {
        self.round
    }

    /// Most recently emitted propensity (0.5 before the first round).
    pub fn last_propensity(&self) -> f64 {
        self.last_propensity
    }

    pub fn last_gradient(&self) -> f64 {
        self.last_gradient
    }

    /// Emits the next propensity. The pending gradient is consumed; if no
    /// feedback arrives before the next call, a zero gradient is used.
    pub fn step(&mut self) -> f64 {
        self.round += 1;
        let t = self.round;
        let delta = self.schedule.clip_rate(t);
        let raw = self.last_propensity - self.schedule.learning_rate(t) * self.last_gradient;
        let p = raw.clamp(delta, 1.0 - delta);
        self.last_propensity = p;
        self.last_gradient = 0.0;
        p
    }

    pub fn feed(&mut self, gradient: f64) {
        self.last_gradient = gradient;
    }
}

impl FirstOrderDesign for ClipOgd {
    fn next_propensity(&mut self) -> f64 {
        self.step()
    }
    fn ingest_gradient(&mut self, gradient: f64) {
        self.feed(gradient)
    }
}

impl AdaptiveDesign for ClipOgd {
    fn propensity(&mut self, _: Option<&Covariate>) -> Result<f64> {
        Ok(self.step())
    }

    fn observe(&mut self, treated: bool, outcome: f64) -> Result<()> {
        let g = gradient_estimate(outcome, treated, self.last_propensity)?;
        self.feed(g);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{run_design, OutcomeSequence, ScriptedCoins};
    use proptest::prelude::*;

    fn neyman_derivative(y1: f64, y0: f64, p: f64) -> f64 {
        -y1 * y1 / (p * p) + y0 * y0 / ((1.0 - p) * (1.0 - p))
    }

    #[test]
    fn schedule_zero_examples() {
        // T = e^5 gives alpha = 5, so delta(32) = 0.5 * 32^(-1/5) = 0.25.
        let horizon = 5f64.exp();
        let alpha = (5.0 * horizon.ln()).sqrt();
        assert!((alpha - 5.0).abs() < 1e-12);
        assert!((0.5 * 32f64.powf(-1.0 / alpha) - 0.25).abs() < 1e-12);

        let s = schedule_zero(148).unwrap();
        assert_eq!(s.clip_rate(1), 0.5);
        let s = schedule_zero(100).unwrap();
        for t in [1, 7, 1000] {
            assert!((s.learning_rate(t) - 0.1).abs() < 1e-15);
        }
        assert!(schedule_zero(1).is_err());
    }

    #[test]
    fn schedule_sc_examples() {
        let s = schedule_sc(1.0, ClippingFunction::ExpRootLog).unwrap();
        assert_eq!(s.learning_rate(1), 0.5);
        assert!((s.clip_rate(1) - 0.359_2).abs() < 1e-4);
        assert!((s.clip_rate(1) - 1.0 / 3f64.ln().powf(0.25).exp()).abs() < 1e-15);
        let s = schedule_sc(0.5, ClippingFunction::ExpRootLog).unwrap();
        assert!((s.learning_rate(10) - 0.2).abs() < 1e-15);
        assert!(schedule_sc(0.0, ClippingFunction::ExpRootLog).is_err());
    }

    #[test]
    fn clipping_function_validation() {
        assert!(ClippingFunction::ExpRootLog.validate().is_ok());
        assert!(ClippingFunction::Power {
            scale: 2.0,
            exponent: 0.1
        }
        .validate()
        .is_ok());
        assert!(ClippingFunction::Power {
            scale: 1.0,
            exponent: 0.1
        }
        .validate()
        .is_err());
        assert!(ClippingFunction::custom(|t| 3.0 + t as f64).is_ok());
        assert!(ClippingFunction::custom(|_| 3.0).is_err());
    }

    #[test]
    fn gradient_examples() {
        assert_eq!(gradient_estimate(1.0, true, 0.5).unwrap(), -8.0);
        assert_eq!(gradient_estimate(0.0, false, 0.9).unwrap(), 0.0);
        assert_eq!(gradient_estimate(0.0, true, 0.1).unwrap(), 0.0);
        let e = 0.5 * gradient_estimate(2.0, true, 0.5).unwrap()
            + 0.5 * gradient_estimate(1.0, false, 0.5).unwrap();
        assert_eq!(e, -12.0);
        assert_eq!(neyman_derivative(2.0, 1.0, 0.5), -12.0);
        assert!(gradient_estimate(1.0, true, 0.0).is_err());
        assert!(gradient_estimate(1.0, false, 1.0).is_err());
    }

    #[test]
    fn step_examples() {
        let mut d = ClipOgd::new(schedule_zero(1000).unwrap());
        assert_eq!(d.step(), 0.5);

        // p_prev = 0.5, g_prev = -8, eta = 0.5, delta(1) ~ 0.359 -> upper end
        let mut d = ClipOgd::new(schedule_sc(1.0, ClippingFunction::ExpRootLog).unwrap());
        d.feed(-8.0);
        let p = d.step();
        assert_eq!(p, 1.0 - d.schedule().clip_rate(1));
        assert!((p - 0.641).abs() < 1e-3);

        let mut d = ClipOgd::new(schedule_sc(1.0, ClippingFunction::ExpRootLog).unwrap());
        for _ in 0..5 {
            assert_eq!(d.step(), 0.5);
        }
    }

    #[test]
    fn fixed_design_boundaries() {
        assert!(FixedDesign::new(0.999).is_ok());
        assert!(FixedDesign::new(1.0).is_err());
        assert!(FixedDesign::new(0.0).is_err());
        let mut d = FixedDesign::new(0.5).unwrap();
        let seq = OutcomeSequence::from_pairs(&[(1.0, 2.0); 5]).unwrap();
        let traj = run_design(&mut d, &seq, &mut ScriptedCoins::new(vec![true, false])).unwrap();
        assert!(traj.propensities().all(|p| p == 0.5));
    }

    #[test]
    fn sc_propensities_respect_round_bounds() {
        let seq = OutcomeSequence::from_pairs(&[(2.0, 1.0), (3.0, 0.5), (1.0, 4.0)]).unwrap();
        let schedule = schedule_sc(1.0, ClippingFunction::ExpRootLog).unwrap();
        let mut d = ClipOgd::new(schedule.clone());
        let traj = run_design(
            &mut d,
            &seq,
            &mut ScriptedCoins::new(vec![true, false, true]),
        )
        .unwrap();
        assert_eq!(traj.len(), 3);
        for r in traj.records() {
            let delta = schedule.clip_rate(r.round as u64);
            assert!(delta <= r.propensity && r.propensity <= 1.0 - delta);
        }
    }

    #[test]
    fn anytime_continuation_matches_direct_run() {
        let gradients: Vec<f64> = (0..200)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) * 3.0)
            .collect();
        let schedule = schedule_sc(0.7, ClippingFunction::ExpRootLog).unwrap();
        let mut direct = ClipOgd::new(schedule.clone());
        let mut out_direct = Vec::new();
        for g in &gradients {
            out_direct.push(direct.step());
            direct.feed(*g);
        }
        let mut resumed = ClipOgd::new(schedule);
        let mut out = Vec::new();
        for g in &gradients[..120] {
            out.push(resumed.step());
            resumed.feed(*g);
        }
        let mut resumed = resumed.clone();
        for g in &gradients[120..] {
            out.push(resumed.step());
            resumed.feed(*g);
        }
        assert_eq!(out, out_direct);
        assert_eq!(resumed.last_propensity(), direct.last_propensity());
        assert_eq!(resumed.round(), direct.round());
    }

    proptest! {
        #[test]
        fn gradient_is_unbiased(y1 in -10.0f64..10.0, y0 in -10.0f64..10.0, p in 0.01f64..0.99) {
            let e = p * gradient_estimate(y1, true, p).unwrap()
                + (1.0 - p) * gradient_estimate(y0, false, p).unwrap();
            let truth = neyman_derivative(y1, y0, p);
            prop_assert!((e - truth).abs() <= 1e-12 * truth.abs().max(1.0));
        }

        #[test]
        fn strong_convexity_of_objective(y1 in -5.0f64..5.0, y0 in -5.0f64..5.0) {
            let c2 = y1 * y1 + y0 * y0;
            for i in 1..100 {
                let p = i as f64 / 100.0;
                let second = 2.0 * (y1 * y1 / p.powi(3) + y0 * y0 / (1.0 - p).powi(3));
                prop_assert!(second >= 2.0 * c2 * (1.0 - 1e-12));
            }
        }

        #[test]
        fn emitted_propensities_stay_clipped(
            gradients in prop::collection::vec(-1e6f64..1e6, 1..300),
            c in 0.1f64..3.0,
        ) {
            let schedule = schedule_sc(c, ClippingFunction::ExpRootLog).unwrap();
            let mut d = ClipOgd::new(schedule.clone());
            for (i, g) in gradients.iter().enumerate() {
                let p = d.step();
                let delta = schedule.clip_rate(i as u64 + 1);
                prop_assert!(delta <= p && p <= 1.0 - delta);
                d.feed(*g);
            }
        }
    }
}
