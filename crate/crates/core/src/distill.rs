//! The edit loop: render a pose, noise it, score it with the blended guidance
//! and push the residual texture along `mu(t) (psi - eps)`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anneal::{hifa_at, sample_t, v_at, window_at, AnnealConfig};
use crate::canvas::{Canvas, PoseView};
use crate::diffusion::{add_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::guidance::{blended_score, effective_v, GuidanceConfig};
use crate::rng::SplitMix64;
use crate::scalar::{lit, Scalar};
use crate::scorenet::{EpsModel, TokenId, CLASS_TOKEN, HAT_TOKEN, SKS_TOKEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuMode {
    Constant,
    OneMinusAlphaBar,
    Fantasia,
}

/// How the diffusion timestep is chosen each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepMode {
    /// Uniform on `[anneal.t_min, anneal.t_max]` throughout.
    Uniform,
    /// Uniform inside the decaying window.
    Annealed,
    /// Deterministically the window's raw upper edge, threshold fixed at 600.
    Hifa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VMode {
    /// Personalized branch never used.
    Off,
    /// `guidance.v0` throughout.
    Constant,
    /// `anneal.v0`, decaying after the window freezes.
    Annealed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KMode {
    /// `guidance.k`.
    Static,
    /// The window's midpoint.
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfig {
    pub prompt_edit: Vec<TokenId>,
    pub prompt_id: Vec<TokenId>,
    pub iterations: usize,
    pub lr: f64,
    pub mu_mode: MuMode,
    pub guidance: GuidanceConfig,
    pub anneal: AnnealConfig,
    pub seed: u64,
    pub timestep: TimestepMode,
    pub v_mode: VMode,
    pub k_mode: KMode,
    /// When false both structure scales are forced to 0.
    pub structure: bool,
    /// Monitor callback period in iterations (0 disables).
    pub trace_every: usize,
    pub divergence_threshold: f64,
    pub divergence_patience: usize,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            prompt_edit: vec![CLASS_TOKEN, HAT_TOKEN],
            prompt_id: vec![CLASS_TOKEN, SKS_TOKEN],
            iterations: 3000,
            lr: 1e-2,
            mu_mode: MuMode::OneMinusAlphaBar,
            guidance: GuidanceConfig::default(),
            anneal: AnnealConfig::default(),
            seed: 0,
            timestep: TimestepMode::Annealed,
            v_mode: VMode::Annealed,
            k_mode: KMode::Dynamic,
            structure: true,
            trace_every: 100,
            divergence_threshold: 1e6,
            divergence_patience: 100,
        }
    }
}

impl EditConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.v_mode != VMode::Off && !self.prompt_id.contains(&SKS_TOKEN) {
            return Err(Error::MissingToken("sks"));
        }
        if self.anneal.iterations != self.iterations.max(1) {
            return Err(Error::Invalid(format!(
                "anneal.iterations ({}) must equal iterations ({})",
                self.anneal.iterations, self.iterations
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Range { what: "lr", value: self.lr, lo: 0.0, hi: f64::INFINITY });
        }
        self.anneal.validate()?;
        self.guidance.validate(steps)?;
        if self.anneal.t_max > steps as f64 {
            return Err(Error::Range { what: "anneal.t_max", value: self.anneal.t_max, lo: 1.0, hi: steps as f64 });
        }
        Ok(())
    }

    /// Sets `iterations` and the annealing horizon together.
    pub fn with_iterations(mut self, n: usize) -> Self {
        self.iterations = n;
        self.anneal.iterations = n.max(1);
        self
    }
}

/// The ablation ladder, from plain score distillation to the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    Sds,
    NaSds,
    PSds,
    PnaSds,
    PnaHifa,
    Ours,
}

impl Arm {
    pub const ALL: [Arm; 6] = [Arm::Sds, Arm::NaSds, Arm::PSds, Arm::PnaSds, Arm::PnaHifa, Arm::Ours];

    pub fn label(self) -> &'static str {
        match self {
            Arm::Sds => "SDS",
            Arm::NaSds => "NA-SDS",
            Arm::PSds => "P-SDS",
            Arm::PnaSds => "PNA-SDS",
            Arm::PnaHifa => "PNA+HiFA",
            Arm::Ours => "Ours",
        }
    }

    pub fn from_label(s: &str) -> Option<Arm> {
        Arm::ALL.into_iter().find(|a| a.label().eq_ignore_ascii_case(s))
    }

    /// `base` with this arm's switches applied.
    pub fn configure(self, base: &EditConfig) -> EditConfig {
        let mut c = base.clone();
        let (timestep, v_mode, k_mode, structure) = match self {
            Arm::Sds => (TimestepMode::Uniform, VMode::Off, KMode::Static, false),
            Arm::NaSds => (TimestepMode::Uniform, VMode::Off, KMode::Static, true),
            Arm::PSds => (TimestepMode::Uniform, VMode::Constant, KMode::Static, false),
            Arm::PnaSds => (TimestepMode::Uniform, VMode::Constant, KMode::Static, true),
            Arm::PnaHifa => (TimestepMode::Hifa, VMode::Constant, KMode::Static, true),
            Arm::Ours => (TimestepMode::Annealed, VMode::Annealed, KMode::Dynamic, true),
        };
        c.timestep = timestep;
        c.v_mode = v_mode;
        c.k_mode = k_mode;
        c.structure = structure;
        c
    }
}

pub fn mu_at(mode: MuMode, sched: &NoiseSchedule, t: usize) -> f64 {
    let a = sched.alpha_bar(t);
    match mode {
        MuMode::Constant => 1.0,
        MuMode::OneMinusAlphaBar => 1.0 - a,
        MuMode::Fantasia => (1.0 - a) * a.sqrt(),
    }
}

/// `mu (psi - eps)`; the score networks' Jacobian is deliberately absent.
pub fn sds_gradient<S: Scalar>(psi: &Grid<S>, eps: &Grid<S>, mu: f64) -> Result<Grid<S>> {
    let m = lit::<S>(mu);
    psi.zip_map(eps, |p, e| m * (p - e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub pose: usize,
    pub t: usize,
    pub k: f64,
    pub v: f64,
    pub grad_norm: f64,
    pub edit_score: Option<f64>,
    pub identity_score: Option<f64>,
}

pub fn write_trace_csv(rows: &[TraceRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,pose,t,k,v,grad_norm,edit_score,identity_score")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{:.6e},{},{}",
            r.iteration,
            r.pose,
            r.t,
            r.k,
            r.v,
            r.grad_norm,
            opt(r.edit_score),
            opt(r.identity_score)
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Periodic observer of the canvas, returning `(edit score, identity score)`.
pub type Monitor<'a, S> = dyn FnMut(&Canvas<S>, &[PoseView<S>]) -> Result<(f64, f64)> + 'a;

/// `(t, k, v)` for iteration `tau`.
pub fn timestep_plan(cfg: &EditConfig, tau: usize, rng: &mut SplitMix64) -> Result<(usize, f64, f64)> {
    let a = &cfg.anneal;
    let tau_a = tau.min(a.iterations);
    let (t, window_k) = match cfg.timestep {
        TimestepMode::Uniform => (rng.range_inclusive(a.t_min.ceil() as u64, a.t_max.floor() as u64) as usize, None),
        TimestepMode::Annealed => {
            let s = window_at(tau_a, a)?;
            (sample_t(&s, a, rng)?, Some(s.k))
        }
        TimestepMode::Hifa => {
            let (t, k) = hifa_at(tau_a, a)?;
            (t, Some(k))
        }
    };
    let k = match (cfg.timestep, cfg.k_mode, window_k) {
        (TimestepMode::Hifa, _, Some(k)) => k,
        (_, KMode::Dynamic, Some(k)) => k,
        _ => cfg.guidance.k,
    };
    let v = match cfg.v_mode {
        VMode::Off => 0.0,
        VMode::Constant => cfg.guidance.v0,
        VMode::Annealed => v_at(tau_a, a)?,
    };
    Ok((t, k, v))
}

/// Runs `cfg.iterations` score-distillation steps on `canvas` over `poses`.
pub fn edit<S: Scalar, B: EpsModel<S> + ?Sized, P: EpsModel<S> + ?Sized>(
    canvas: &mut Canvas<S>,
    base: &B,
    pers: &P,
    sched: &NoiseSchedule,
    poses: &[f64],
    cfg: &EditConfig,
    mut monitor: Option<&mut Monitor<'_, S>>,
) -> Result<Vec<TraceRow>> {
    cfg.validate(sched.steps())?;
    if poses.is_empty() {
        return Err(Error::Invalid("edit needs at least one pose".into()));
    }
    let views: Vec<PoseView<S>> = poses.iter().map(|&p| canvas.view(p)).collect::<Result<_>>()?;
    let mut gcfg = cfg.guidance;
    if !cfg.structure {
        gcfg.cond_scale_base = 0.0;
        gcfg.cond_scale_personalized = 0.0;
    }
    let mut rng = SplitMix64::new(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut over = 0usize;
    let res = canvas.resolution;
    for tau in 0..cfg.iterations {
        let pi = rng.index(views.len());
        let view = &views[pi];
        let rendered = canvas.render(view);
        let (t, k, v) = timestep_plan(cfg, tau, &mut rng)?;
        let eps = Grid::from_vec(res, res, rng.normal_vec::<S>(res * res))?;
        let noised = add_noise(&rendered.image, t, &eps, sched)?;
        gcfg.k = k;
        let psi = blended_score(
            base,
            pers,
            &noised.z_t,
            t,
            &cfg.prompt_edit,
            &cfg.prompt_id,
            Some(&view.structure),
            &gcfg,
            v,
        )?;
        let pixel_grad = sds_gradient(&psi, &eps, mu_at(cfg.mu_mode, sched, t))?;
        let tex_grad = canvas.backprop_to_texture(&pixel_grad, view, &rendered)?;
        let grad_norm = tex_grad.norm().as_f64();
        over = if grad_norm > cfg.divergence_threshold { over + 1 } else { 0 };
        if over >= cfg.divergence_patience || !grad_norm.is_finite() {
            return Err(Error::Divergence {
                iteration: tau,
                detail: format!("texture grad norm {grad_norm:.3e} at t={t}, pose {pi}"),
            });
        }
        canvas.step(&tex_grad, cfg.lr)?;
        let mut row = TraceRow { iteration: tau, pose: pi, t, k, v: effective_v(t, k, v), grad_norm, edit_score: None, identity_score: None };
        if cfg.trace_every > 0 && (tau + 1) % cfg.trace_every == 0 {
            if let Some(m) = monitor.as_mut() {
                let (e, i) = m(canvas, &views)?;
                row.edit_score = Some(e);
                row.identity_score = Some(i);
            }
        }
        trace.push(row);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::scorenet::Condition;
    use crate::synthdata::{make_subject, Attributes, TEXTURE_RES};

    /// Predicts exactly the noise that was added to the unedited render.
    struct Oracle {
        base: Vec<Grid<f64>>,
        sched: NoiseSchedule,
    }

    impl EpsModel<f64> for Oracle {
        fn resolution(&self) -> usize {
            self.base[0].h
        }

        fn predict_eps(&self, z: &Grid<f64>, t: usize, _: &Condition<'_, f64>, _: f64) -> Result<Grid<f64>> {
            let a = self.sched.alpha_bar(t);
            // any of the base renders: with a single pose this is exact
            z.zip_map(&self.base[0], |z, x| (z - a.sqrt() * x) / (1.0 - a).sqrt())
        }
    }

    #[test]
    fn mu_modes() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert!((mu_at(MuMode::OneMinusAlphaBar, &s, 1) - 1e-4).abs() < 1e-15);
        assert_eq!(mu_at(MuMode::Constant, &s, 500), 1.0);
        let a = s.alpha_bar(500);
        assert!((mu_at(MuMode::Fantasia, &s, 500) - (1.0 - a) * a.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sds_gradient_cases() {
        let psi = Grid::from_vec(1, 2, vec![0.5f64, -0.5]).unwrap();
        let zero = Grid::zeros(1, 2);
        assert_eq!(sds_gradient(&psi, &psi, 3.0).unwrap().data, vec![0.0, 0.0]);
        assert_eq!(sds_gradient(&psi, &zero, 1.0).unwrap().data, vec![0.5, -0.5]);
        assert!(sds_gradient(&psi, &Grid::zeros(2, 2), 1.0).is_err());
    }

    #[test]
    fn zero_direction_keeps_texture_at_zero() {
        let mut canvas = Canvas::<f64>::new(make_subject(3), Attributes::NONE, 16, 2);
        let pose = 0.2;
        let base = vec![canvas.render_pose(pose).unwrap()];
        let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
        let oracle = Oracle { base, sched: sched.clone() };
        let cfg = EditConfig::default().with_iterations(40);
        let trace = edit(&mut canvas, &oracle, &oracle, &sched, &[pose], &cfg, None).unwrap();
        assert_eq!(trace.len(), 40);
        // at the unedited render psi == eps up to rounding
        assert!(trace[0].grad_norm < 1e-12, "{}", trace[0].grad_norm);
        // afterwards Adam's normalised jitter is pulled back: texels stay well inside one step size
        let worst = canvas.texture.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < cfg.lr, "{worst}");
    }

    #[test]
    fn no_iterations_is_a_no_op() {
        let mut canvas = Canvas::<f64>::new(make_subject(3), Attributes::NONE, 16, 2);
        let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
        let oracle = Oracle { base: vec![Grid::zeros(16, 16)], sched: sched.clone() };
        let cfg = EditConfig::default().with_iterations(0);
        let trace = edit(&mut canvas, &oracle, &oracle, &sched, &[0.0], &cfg, None).unwrap();
        assert!(trace.is_empty());
        assert!(canvas.texture.data.iter().all(|&v| v == 0.0));
        assert_eq!(canvas.texture.len(), TEXTURE_RES * TEXTURE_RES);
    }

    #[test]
    fn arms_are_config_switches() {
        let base = EditConfig::default();
        let labels: Vec<&str> = Arm::ALL.iter().map(|a| a.label()).collect();
        assert_eq!(labels, ["SDS", "NA-SDS", "P-SDS", "PNA-SDS", "PNA+HiFA", "Ours"]);
        assert_eq!(Arm::Ours.configure(&base), base);
        let sds = Arm::Sds.configure(&base);
        assert!(!sds.structure && sds.v_mode == VMode::Off && sds.timestep == TimestepMode::Uniform);
        let hifa = Arm::PnaHifa.configure(&base);
        let mut rng = SplitMix64::new(0);
        assert_eq!(timestep_plan(&hifa, 0, &mut rng).unwrap(), (980, 600.0, 0.3));
        let ours = base.clone();
        let (t, k, v) = timestep_plan(&ours, 0, &mut rng).unwrap();
        assert!((480..=980).contains(&t) && k == 730.0 && v == 0.3);
        let p = Arm::PnaSds.configure(&base);
        let (_, k, _) = timestep_plan(&p, 0, &mut rng).unwrap();
        assert_eq!(k, 750.0);
        assert_eq!(Arm::from_label("pna+hifa"), Some(Arm::PnaHifa));
    }

    #[test]
    fn validation() {
        let sched_steps = 1000;
        assert!(EditConfig::default().validate(sched_steps).is_ok());
        let mut c = EditConfig::default();
        c.iterations = 10;
        assert!(c.validate(sched_steps).is_err());
        let c = EditConfig { prompt_id: vec![CLASS_TOKEN], ..EditConfig::default() };
        assert!(matches!(c.validate(sched_steps), Err(Error::MissingToken("sks"))));
    }
}
