//! Diffusion variance schedule and the quantities derived from it.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// β/α/ᾱ tables of the forward diffusion chain. Steps are 1-indexed: `beta(1)`
/// is the first forward step and `beta(steps())` the terminal one.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

/// Parameters of a linear schedule, as they appear in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl NoiseSchedule {
    /// Linear schedule from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("step count must be positive".into()));
        }
        for (name, b) in [("beta_start", beta_start), ("beta_end", beta_end)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Schedule(format!("{name} = {b} outside (0, 1)")));
            }
        }
        if beta_start > beta_end {
            return Err(Error::Schedule(format!(
                "beta_start {beta_start} exceeds beta_end {beta_end}"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            let last = (steps - 1) as f64;
            (0..steps)
                .map(|i| beta_start + span * (i as f64) / last)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Builds a schedule from an explicit β table (e.g. one read back from a
    /// checkpoint).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("empty beta table".into()));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Schedule(format!("beta_{} = {b} outside (0, 1)", i + 1)));
            }
            if i > 0 && b < betas[i - 1] {
                return Err(Error::Schedule(format!("beta_{} decreases", i + 1)));
            }
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_vars = (0..betas.len())
            .map(|i| {
                if i == 0 {
                    betas[0]
                } else {
                    (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i]) * betas[i]
                }
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_vars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::StepOutOfRange {
                t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    /// Marginal signal-to-noise ratio ᾱ_t / (1 − ᾱ_t) of step `t`.
    pub fn marginal_snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        ab / (1.0 - ab)
    }

    /// Step whose marginal SNR is closest to the channel's linear SNR.
    /// Ties go to the smaller step; saturates at 1 and `steps()`.
    pub fn snr_to_start_step(&self, snr_db: f64) -> usize {
        let target = 10f64.powf(snr_db / 10.0);
        let mut best = 1;
        let mut best_gap = f64::INFINITY;
        for t in 1..=self.steps() {
            let gap = (self.marginal_snr(t) - target).abs();
            if gap < best_gap {
                best_gap = gap;
                best = t;
            }
        }
        best
    }
}
