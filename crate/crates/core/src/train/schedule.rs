use std::fmt;
use std::str::FromStr;

use crate::error::{LsdError, Result};

/// Interpolation between a start and end value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleShape {
    #[default]
    Linear,
    /// Geometric: `start * (end / start)^frac`. Both ends must be positive.
    Exponential,
}

impl FromStr for ScheduleShape {
    type Err = LsdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleShape::Linear),
            "exponential" | "exp" => Ok(ScheduleShape::Exponential),
            _ => Err(LsdError::config(format!("unknown schedule shape {s:?}"))),
        }
    }
}

impl fmt::Display for ScheduleShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleShape::Linear => "linear",
            ScheduleShape::Exponential => "exponential",
        })
    }
}

/// Value at `frac` in `[0, 1]` of the way from `start` to `end`.
pub fn interpolate(start: f64, end: f64, frac: f64, shape: ScheduleShape) -> f64 {
    let frac = frac.clamp(0.0, 1.0);
    match shape {
        ScheduleShape::Linear => start + (end - start) * frac,
        ScheduleShape::Exponential => start * (end / start).powf(frac),
    }
}

/// Exploration rate for the sampled-decomposition trainer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
    pub shape: ScheduleShape,
}

impl EpsilonSchedule {
    /// Linear decay from 1.0 to 0.1 over the first quarter of `total_steps`.
    pub fn default_for(total_steps: u64) -> Self {
        EpsilonSchedule {
            start: 1.0,
            end: 0.1,
            decay_steps: (total_steps / 4).max(1),
            shape: ScheduleShape::Linear,
        }
    }

    pub fn constant(eps: f64) -> Self {
        EpsilonSchedule {
            start: eps,
            end: eps,
            decay_steps: 1,
            shape: ScheduleShape::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("start", self.start), ("end", self.end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(LsdError::config(format!("epsilon {name} {v} outside [0, 1]")));
            }
        }
        if self.end > self.start {
            return Err(LsdError::config("epsilon end must not exceed start"));
        }
        if self.decay_steps == 0 {
            return Err(LsdError::config("epsilon decay_steps must be positive"));
        }
        if self.shape == ScheduleShape::Exponential && (self.start <= 0.0 || self.end <= 0.0) {
            return Err(LsdError::config(
                "exponential epsilon schedule needs positive endpoints",
            ));
        }
        Ok(())
    }

    /// Epsilon at a zero-based step; `end` from `decay_steps` onward.
    pub fn value(&self, step: u64) -> f64 {
        if step >= self.decay_steps {
            return self.end;
        }
        interpolate(self.start, self.end, step as f64 / self.decay_steps as f64, self.shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_default() {
        let s = EpsilonSchedule::default_for(400);
        assert_eq!(s.decay_steps, 100);
        assert_eq!(s.value(0), 1.0);
        assert!((s.value(50) - 0.55).abs() < 1e-12);
        assert_eq!(s.value(100), 0.1);
        assert_eq!(s.value(10_000), 0.1);
        for t in 0..150 {
            assert!(s.value(t + 1) <= s.value(t));
        }
    }

    #[test]
    fn exponential_and_validation() {
        let s = EpsilonSchedule {
            start: 1.0,
            end: 0.01,
            decay_steps: 10,
            shape: ScheduleShape::Exponential,
        };
        s.validate().unwrap();
        assert!((s.value(5) - 0.1).abs() < 1e-12);
        assert!(EpsilonSchedule { end: 0.0, ..s }.validate().is_err());
        assert!(EpsilonSchedule::constant(1.5).validate().is_err());
        assert!(EpsilonSchedule { decay_steps: 0, ..s }.validate().is_err());
        assert_eq!("exp".parse::<ScheduleShape>().unwrap(), ScheduleShape::Exponential);
    }
}
