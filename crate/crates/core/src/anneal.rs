//! Windowed root timestep annealing.
//!
//! The window's upper edge decays as `t1 = t_max - (t_max - t_min) sqrt(tau/N)`,
//! with `k = t1 - window/2` and `t2 = t1 - window`. Once `t1` reaches
//! `cease_t1` the window freezes there and `v` starts decaying linearly.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Fixed threshold of the deterministic-timestep ablation mode.
pub const HIFA_K: f64 = 600.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealConfig {
    pub t_max: f64,
    pub t_min: f64,
    pub window: f64,
    pub iterations: usize,
    pub cease_t1: f64,
    pub v0: f64,
    pub v_end: f64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self { t_max: 980.0, t_min: 20.0, window: 500.0, iterations: 3000, cease_t1: 500.0, v0: 0.3, v_end: 0.0 }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_min < self.cease_t1 && self.cease_t1 < self.t_max) {
            return Err(Error::Invalid(format!(
                "need t_min < cease_t1 < t_max, got {} < {} < {}",
                self.t_min, self.cease_t1, self.t_max
            )));
        }
        if self.t_min < 1.0 {
            return Err(Error::Range { what: "anneal.t_min", value: self.t_min, lo: 1.0, hi: self.t_max });
        }
        if !(self.window > 0.0) {
            return Err(Error::Range { what: "anneal.window", value: self.window, lo: 0.0, hi: f64::INFINITY });
        }
        if self.iterations == 0 {
            return Err(Error::Invalid("anneal.iterations must be at least 1".into()));
        }
        Ok(())
    }

    /// Iteration at which the raw upper edge reaches `cease_t1`.
    pub fn cease_iteration(&self) -> f64 {
        let r = (self.t_max - self.cease_t1) / (self.t_max - self.t_min);
        self.iterations as f64 * r * r
    }

    fn raw_t1(&self, tau: usize) -> f64 {
        self.t_max - (self.t_max - self.t_min) * (tau as f64 / self.iterations as f64).sqrt()
    }

    fn check_tau(&self, tau: usize) -> Result<()> {
        if tau > self.iterations {
            return Err(Error::Range { what: "tau", value: tau as f64, lo: 0.0, hi: self.iterations as f64 });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealState {
    pub tau: usize,
    pub t1: f64,
    pub k: f64,
    pub t2: f64,
    pub v: f64,
    pub ceased: bool,
}

/// Window bounds at iteration `tau` (frozen and clamped as described above).
pub fn window_at(tau: usize, cfg: &AnnealConfig) -> Result<AnnealState> {
    cfg.check_tau(tau)?;
    let raw = cfg.raw_t1(tau);
    let (t1, ceased) = if raw <= cfg.cease_t1 { (cfg.cease_t1, true) } else { (raw, false) };
    let k = (t1 - cfg.window / 2.0).max(cfg.t_min);
    let t2 = (t1 - cfg.window).max(cfg.t_min);
    Ok(AnnealState { tau, t1, k, t2, v: v_at(tau, cfg)?, ceased })
}

/// Personalized-model weight: `v0` until the cease point, then linear to `v_end` at `N`.
pub fn v_at(tau: usize, cfg: &AnnealConfig) -> Result<f64> {
    cfg.check_tau(tau)?;
    let tc = cfg.cease_iteration();
    let n = cfg.iterations as f64;
    let tau = tau as f64;
    if tau <= tc || n <= tc {
        return Ok(cfg.v0);
    }
    Ok(cfg.v0 + (cfg.v_end - cfg.v0) * (tau - tc) / (n - tc))
}

/// Integer timestep uniform on `[max(ceil t2, t_min), min(floor t1, t_max)]`.
pub fn sample_t(state: &AnnealState, cfg: &AnnealConfig, rng: &mut SplitMix64) -> Result<usize> {
    let lo = state.t2.max(cfg.t_min).ceil() as u64;
    let hi = state.t1.min(cfg.t_max).floor() as u64;
    if lo > hi {
        return Err(Error::Invalid(format!("empty timestep window [{lo}, {hi}]")));
    }
    Ok(rng.range_inclusive(lo, hi) as usize)
}

/// Deterministic-timestep mode: `t` follows the raw decaying edge all the way
/// to `t_min` (no freeze) and the threshold is fixed at [`HIFA_K`].
pub fn hifa_at(tau: usize, cfg: &AnnealConfig) -> Result<(usize, f64)> {
    cfg.check_tau(tau)?;
    Ok((cfg.raw_t1(tau).round() as usize, HIFA_K))
}

/// Writes `tau,t1,k,t2,v` for every iteration.
pub fn write_schedule_csv(cfg: &AnnealConfig, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "tau,t1,k,t2,v")?;
    for tau in 0..=cfg.iterations {
        let s = window_at(tau, cfg)?;
        writeln!(f, "{},{},{},{},{}", tau, s.t1, s.k, s.t2, s.v)?;
    }
    f.flush()?;
    Ok(())
}
