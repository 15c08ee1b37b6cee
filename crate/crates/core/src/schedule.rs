//! Noise schedules shared by the Gaussian node process and the categorical edge process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COSINE_OFFSET: f64 = 0.008;
pub const ALPHA_MIN: f64 = 0.001;
pub const ALPHA_MAX: f64 = 0.9999;

/// Parameters that fully determine a schedule; this is what checkpoints store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub family: String,
    pub steps: usize,
    pub offset: f64,
    pub clip: [f64; 2],
}

/// Per-step retention `alpha[t]` (index 0 unused, set to 1) and cumulative
/// products `alpha_bar[t]` with `alpha_bar[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Squared-cosine cumulative profile with per-step clipping.
    pub fn cosine(steps: usize) -> Result<Self> {
        Self::from_spec(&ScheduleSpec {
            family: "cosine".into(),
            steps,
            offset: COSINE_OFFSET,
            clip: [ALPHA_MIN, ALPHA_MAX],
        })
    }

    pub fn from_spec(spec: &ScheduleSpec) -> Result<Self> {
        if spec.family != "cosine" {
            return Err(Error::Config(format!("unknown schedule family `{}`", spec.family)));
        }
        if spec.steps == 0 {
            return Err(Error::Config("schedule needs T ≥ 1".into()));
        }
        let t_max = spec.steps as f64;
        let s = spec.offset;
        let f = |t: f64| {
            let a = ((t / t_max + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
            a.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut alpha = vec![1.0; spec.steps + 1];
        let mut alpha_bar = vec![1.0; spec.steps + 1];
        let mut prev_raw = 1.0;
        for t in 1..=spec.steps {
            let raw = f(t as f64) / f0;
            let a = if prev_raw > 0.0 { raw / prev_raw } else { 0.0 };
            alpha[t] = a.clamp(spec.clip[0], spec.clip[1]);
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
            prev_raw = raw;
        }
        Ok(Self {
            spec: spec.clone(),
            alpha,
            alpha_bar,
        })
    }

    /// Builds a schedule from explicit per-step retentions `alpha[1..=T]`.
    pub fn from_alphas(alphas: &[f64]) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::Config("schedule needs T ≥ 1".into()));
        }
        if alphas.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::invalid("alphas must lie in (0, 1]"));
        }
        let mut alpha = vec![1.0];
        alpha.extend_from_slice(alphas);
        let mut alpha_bar = vec![1.0; alpha.len()];
        for t in 1..alpha.len() {
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        Ok(Self {
            spec: ScheduleSpec {
                family: "explicit".into(),
                steps: alphas.len(),
                offset: 0.0,
                clip: [0.0, 1.0],
            },
            alpha,
            alpha_bar,
        })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }
}
