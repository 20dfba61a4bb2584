//! Masking schedules.
//!
//! At inference the schedule decides how many tokens remain masked after each
//! of `T` decoding steps. During training it supplies the masking rate.

use std::f64::consts::FRAC_PI_2;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Shape of the masked-fraction curve. Cosine is the default; linear and
/// square exist for ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleShape {
    #[default]
    Cosine,
    Linear,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub steps: usize,
    pub shape: ScheduleShape,
}

impl Schedule {
    pub fn new(steps: usize, shape: ScheduleShape) -> Result<Self> {
        if steps == 0 {
            bail!(Config, "schedule needs at least one step");
        }
        Ok(Schedule { steps, shape })
    }

    pub fn cosine(steps: usize) -> Result<Self> {
        Self::new(steps, ScheduleShape::Cosine)
    }

    pub fn fraction(&self, t: usize) -> Result<f64> {
        mask_fraction(t, self.steps, self.shape)
    }

    pub fn masked_count(&self, t: usize, tokens: usize) -> Result<usize> {
        masked_count(t, self.steps, tokens, self.shape)
    }

    /// Masked counts for `t = 0..=T`.
    pub fn counts(&self, tokens: usize) -> Result<Vec<usize>> {
        masked_counts(self.steps, tokens, self.shape)
    }
}

/// Fraction of tokens still masked after step `t` of `steps`.
pub fn mask_fraction(t: usize, steps: usize, shape: ScheduleShape) -> Result<f64> {
    if steps == 0 {
        bail!(Config, "schedule needs at least one step");
    }
    if t > steps {
        bail!(Domain, "step {t} beyond schedule length {steps}");
    }
    // Exact endpoints regardless of floating-point evaluation.
    if t == 0 {
        return Ok(1.0);
    }
    if t == steps {
        return Ok(0.0);
    }
    let r = t as f64 / steps as f64;
    Ok(match shape {
        ScheduleShape::Cosine => (r * FRAC_PI_2).cos(),
        ScheduleShape::Linear => 1.0 - r,
        ScheduleShape::Square => (1.0 - r) * (1.0 - r),
    })
}

/// Integer masked counts for every step `0..=steps`.
///
/// `count(t) = min(count(t-1) - 1, floor(fraction(t) * N))`, floored at 0,
/// so the count strictly decreases until it reaches zero.
pub fn masked_counts(steps: usize, tokens: usize, shape: ScheduleShape) -> Result<Vec<usize>> {
    if tokens == 0 {
        bail!(Domain, "token count must be at least 1");
    }
    let mut counts = Vec::with_capacity(steps + 1);
    counts.push(tokens);
    for t in 1..=steps {
        let base = (mask_fraction(t, steps, shape)? * tokens as f64).floor() as usize;
        let prev = counts[t - 1];
        counts.push(base.min(prev.saturating_sub(1)));
    }
    Ok(counts)
}

pub fn masked_count(t: usize, steps: usize, tokens: usize, shape: ScheduleShape) -> Result<usize> {
    if t > steps {
        bail!(Domain, "step {t} beyond schedule length {steps}");
    }
    Ok(masked_counts(steps, tokens, shape)?[t])
}

/// Training masking rate `cos(r * pi/2)` with `r ~ U(0, 1)`.
pub fn sample_train_fraction(rng: &mut impl Rng) -> f64 {
    train_fraction_from_uniform(rng.gen::<f64>())
}

pub fn train_fraction_from_uniform(r: f64) -> f64 {
    if r >= 1.0 {
        return 0.0;
    }
    (r * FRAC_PI_2).cos()
}

/// Number of positions a training mask covers for `fraction` of `tokens`:
/// `round(fraction * N)` (half away from zero), at least one when the
/// fraction is positive.
pub fn train_mask_count(tokens: usize, fraction: f64) -> usize {
    if fraction <= 0.0 || tokens == 0 {
        return 0;
    }
    ((fraction * tokens as f64).round() as usize).clamp(1, tokens)
}

/// Boolean mask with [`train_mask_count`] positions chosen uniformly
/// without replacement.
pub fn make_train_mask(tokens: usize, fraction: f64, rng: &mut impl Rng) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&fraction) {
        bail!(Domain, "mask fraction {fraction} outside [0, 1]");
    }
    let count = train_mask_count(tokens, fraction);
    let mut mask = vec![false; tokens];
    for i in index::sample(rng, tokens, count).iter() {
        mask[i] = true;
    }
    Ok(mask)
}
