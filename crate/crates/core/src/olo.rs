//! Scale-free online linear optimization and sleeping experts.
//!
//! [`Solo`] is scale-free FTRL over the nonnegative orthant with the squared
//! L2 regularizer, for which the leader has the closed form
//! `w = max(0, -L / sqrt(q))`. [`SleepingExperts`] turns any such learner
//! into a distribution over the currently awake experts.

use crate::error::{Error, Result};

/// Scale-free FTRL on the nonnegative orthant.
#[derive(Debug, Clone, PartialEq)]
pub struct Solo {
    /// Cumulative loss vector `L`.
    cumulative_loss: Vec<f64>,
    /// Cumulative squared norm `q = sum ||l||_2^2`.
    squared_norm_sum: f64,
}

impl Solo {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("SOLO needs at least one coordinate".into()));
        }
        Ok(Self {
            cumulative_loss: vec![0.0; dim],
            squared_norm_sum: 0.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.cumulative_loss.len()
    }

    pub fn cumulative_loss(&self) -> &[f64] {
        &self.cumulative_loss
    }

    pub fn squared_norm_sum(&self) -> f64 {
        self.squared_norm_sum
    }

    /// `w_i = max(0, -L_i / sqrt(q))`, with `w = 0` while `q = 0`.
    pub fn weights(&self) -> Vec<f64> {
        if self.squared_norm_sum == 0.0 {
            return vec![0.0; self.dim()];
        }
        let scale = self.squared_norm_sum.sqrt();
        self.cumulative_loss
            .iter()
            .map(|&l| (-l / scale).max(0.0))
            .collect()
    }

    pub fn ingest(&mut self, loss: &[f64]) -> Result<()> {
        if loss.len() != self.dim() {
            return Err(Error::Misaligned {
                what: "SOLO loss",
                left: loss.len(),
                right: self.dim(),
            });
        }
        if let Some(bad) = loss.iter().find(|l| !l.is_finite()) {
            return Err(Error::Domain(format!("non-finite loss {bad}")));
        }
        for (acc, l) in self.cumulative_loss.iter_mut().zip(loss) {
            *acc += l;
        }
        self.squared_norm_sum += loss.iter().map(|l| l * l).sum::<f64>();
        Ok(())
    }
}

/// Restricts `weights` to the awake experts and normalizes.
///
/// Falls back to uniform over awake experts when their total weight is zero.
pub fn normalize_awake(active: &[bool], weights: &[f64]) -> Result<Vec<f64>> {
    if active.len() != weights.len() {
        return Err(Error::Misaligned {
            what: "activity vector",
            left: active.len(),
            right: weights.len(),
        });
    }
    let awake = active.iter().filter(|&&a| a).count();
    if awake == 0 {
        return Err(Error::Domain("no awake expert".into()));
    }
    let total: f64 = active
        .iter()
        .zip(weights)
        .filter(|(a, _)| **a)
        .map(|(_, w)| *w)
        .sum();
    Ok(if total > 0.0 {
        active
            .iter()
            .zip(weights)
            .map(|(&a, &w)| if a { w / total } else { 0.0 })
            .collect()
    } else {
        let u = 1.0 / awake as f64;
        active.iter().map(|&a| if a { u } else { 0.0 }).collect()
    })
}

/// `l~_i = a_i (l_i - <l, v>)`.
pub fn surrogate_loss(active: &[bool], loss: &[f64], dist: &[f64]) -> Vec<f64> {
    let mixed: f64 = loss.iter().zip(dist).map(|(l, v)| l * v).sum();
    active
        .iter()
        .zip(loss)
        .map(|(&a, &l)| if a { l - mixed } else { 0.0 })
        .collect()
}

/// A learner producing distributions over awake experts.
pub trait SleepingExpertsLearner {
    fn dim(&self) -> usize;

    /// Distribution for this round. Must be followed by [`feed_loss`].
    ///
    /// [`feed_loss`]: SleepingExpertsLearner::feed_loss
    fn distribution(&mut self, active: &[bool]) -> Result<Vec<f64>>;

    /// Losses of all experts for the round (values at sleeping experts are ignored).
    fn feed_loss(&mut self, loss: &[f64]) -> Result<()>;
}

/// Sleeping experts via SOLO FTRL: weights are computed before the round's
/// loss is revealed, and SOLO is fed the surrogate loss.
#[derive(Debug, Clone)]
pub struct SleepingExperts {
    solo: Solo,
    pending: Option<(Vec<bool>, Vec<f64>)>,
}

impl SleepingExperts {
    pub fn new(dim: usize) -> Result<Self> {
        Ok(Self {
            solo: Solo::new(dim)?,
            pending: None,
        })
    }

    pub fn solo(&self) -> &Solo {
        &self.solo
    }

    /// One full round: returns the distribution played.
    pub fn round(
        &mut self,
        active: &[bool],
        loss: impl FnOnce(&[f64]) -> Vec<f64>,
    ) -> Result<Vec<f64>> {
        let dist = self.distribution(active)?;
        let l = loss(&dist);
        self.feed_loss(&l)?;
        Ok(dist)
    }
}

impl SleepingExpertsLearner for SleepingExperts {
    fn dim(&self) -> usize {
        self.solo.dim()
    }

    fn distribution(&mut self, active: &[bool]) -> Result<Vec<f64>> {
        let dist = normalize_awake(active, &self.solo.weights())?;
        self.pending = Some((active.to_vec(), dist.clone()));
        Ok(dist)
    }

    fn feed_loss(&mut self, loss: &[f64]) -> Result<()> {
        let (active, dist) = self
            .pending
            .take()
            .ok_or_else(|| Error::Config("loss fed before a distribution was drawn".into()))?;
        if loss.len() != active.len() {
            return Err(Error::Misaligned {
                what: "expert losses",
                left: loss.len(),
                right: active.len(),
            });
        }
        let masked: Vec<f64> = loss
            .iter()
            .zip(&active)
            .map(|(&l, &a)| if a { l } else { 0.0 })
            .collect();
        self.solo.ingest(&surrogate_loss(&active, &masked, &dist))
    }
}
