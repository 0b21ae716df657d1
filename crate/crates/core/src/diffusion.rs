//! Discrete-time diffusion: linear noise schedule, forward noising, denoiser
//! training and ancestral sampling.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::Tensor4;
use crate::optim::{Adam, AdamConfig};
use crate::rng::SplitMix64;
use crate::scalar::{lit, Scalar};
use crate::scorenet::{prompt_tokens, Condition, EpsModel, NetInput, Objective, ScoreNet, TokenId, TrainBatch, NULL_TOKEN};
use crate::synthdata::Corpus;

/// Parameters from which a [`NoiseSchedule`] is rebuilt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { steps: 1000, beta_min: 1e-4, beta_max: 0.02 }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

/// Tables indexed by timestep `t` in `1..=steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub spec: ScheduleSpec,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Invalid(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::Invalid(format!("need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")));
    }
    let beta: Vec<f64> =
        (0..steps).map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for b in &beta {
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { spec: ScheduleSpec { steps, beta_min, beta_max }, beta, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// `alpha_bar` with the convention `alpha_bar(0) = 1`.
    pub fn alpha_bar_or_one(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar(t)
        }
    }

    pub fn snr(&self, t: usize) -> f64 {
        let a = self.alpha_bar(t);
        a / (1.0 - a)
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Range { what: "timestep", value: t as f64, lo: 1.0, hi: self.steps() as f64 });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisedState<S> {
    pub z_t: Grid<S>,
    pub t: usize,
    pub eps: Grid<S>,
}

/// `z_t = sqrt(alpha_bar_t) z + sqrt(1 - alpha_bar_t) eps`.
pub fn add_noise<S: Scalar>(z: &Grid<S>, t: usize, eps: &Grid<S>, sched: &NoiseSchedule) -> Result<NoisedState<S>> {
    sched.check_t(t)?;
    let a = sched.alpha_bar(t);
    let (sa, sn) = (lit::<S>(a.sqrt()), lit::<S>((1.0 - a).sqrt()));
    let z_t = z.zip_map(eps, |x, e| sa * x + sn * e)?;
    Ok(NoisedState { z_t, t, eps: eps.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Probability of replacing the text condition with the null prompt.
    pub null_prob: f64,
    /// Probability of dropping the structure channel entirely.
    pub structure_dropout: f64,
    /// Lower end of the uniform structure scale drawn when it is kept.
    pub structure_scale_min: f64,
    pub grad_clip: Option<f64>,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            null_prob: 0.1,
            structure_dropout: 0.2,
            structure_scale_min: 0.5,
            grad_clip: Some(1.0),
            objective: Objective::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
}

pub fn write_loss_csv(trace: &[LossRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,loss")?;
    for r in trace {
        writeln!(f, "{},{:.9e}", r.iteration, r.loss)?;
    }
    f.flush()?;
    Ok(())
}

/// One labelled training example: image, structure map and prompt.
#[derive(Debug, Clone)]
pub struct Example<'a, S> {
    pub image: &'a Grid<S>,
    pub structure: &'a Grid<S>,
    pub tokens: Vec<TokenId>,
}

/// Draws a noised minibatch from `examples` following `cfg`'s conditioning dropout.
pub fn draw_batch<S: Scalar>(
    examples: &[Example<'_, S>],
    batch: usize,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut SplitMix64,
) -> TrainBatch<S> {
    let res = examples[0].image.h;
    let px = res * res;
    let mut input = NetInput {
        z: Tensor4::zeros(batch, 1, res, res),
        structure: Tensor4::zeros(batch, 1, res, res),
        scale: Vec::with_capacity(batch),
        t: Vec::with_capacity(batch),
        tokens: Vec::with_capacity(batch),
    };
    let mut eps = Tensor4::zeros(batch, 1, res, res);
    let mut x0 = Tensor4::zeros(batch, 1, res, res);
    for b in 0..batch {
        let ex = &examples[rng.index(examples.len())];
        let t = rng.range_inclusive(1, sched.steps() as u64) as usize;
        let a = sched.alpha_bar(t);
        let (sa, sn) = (lit::<S>(a.sqrt()), lit::<S>((1.0 - a).sqrt()));
        let noise: Vec<S> = rng.normal_vec(px);
        for p in 0..px {
            let x = ex.image.data[p];
            x0.data[b * px + p] = x;
            eps.data[b * px + p] = noise[p];
            input.z.data[b * px + p] = sa * x + sn * noise[p];
        }
        let tokens = if rng.bernoulli(cfg.null_prob) { vec![NULL_TOKEN] } else { ex.tokens.clone() };
        let scale = if rng.bernoulli(cfg.structure_dropout) {
            0.0
        } else {
            rng.uniform(cfg.structure_scale_min, 1.0)
        };
        input.structure.data[b * px..(b + 1) * px].copy_from_slice(&ex.structure.data);
        input.scale.push(lit(scale));
        input.t.push(t);
        input.tokens.push(tokens);
    }
    TrainBatch { input, eps, x0 }
}

/// Runs Adam on the denoising objective over `examples`; returns the loss trace.
pub fn fit<S: Scalar>(
    net: &mut ScoreNet<S>,
    examples: &[Example<'_, S>],
    cfg: &TrainConfig,
    mut extra: impl FnMut(&ScoreNet<S>, &mut SplitMix64, &mut [S]) -> Result<f64>,
) -> Result<Vec<LossRecord>> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let sched = net.config.schedule.build()?;
    let mut rng = SplitMix64::new(cfg.seed);
    let mut opt = Adam::new(net.num_params(), AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch = draw_batch(examples, cfg.batch_size, &sched, cfg, &mut rng);
        let (loss, mut grads) = net.loss_and_gradients(&batch, &cfg.objective)?;
        let loss = loss.as_f64() + extra(net, &mut rng, &mut grads)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration: it, detail: format!("loss = {loss}") });
        }
        if let Some(c) = cfg.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        opt.step(&mut net.params, &grads, None);
        trace.push(LossRecord { iteration: it, loss });
    }
    net.trained_iterations += cfg.iterations;
    Ok(trace)
}

pub fn clip_global_norm<S: Scalar>(grads: &mut [S], max_norm: f64) {
    let norm = grads.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = lit::<S>(max_norm / norm);
        grads.iter_mut().for_each(|g| *g *= k);
    }
}

/// Trains the conditional denoiser on every sample of `corpus` with prompts
/// `{class} + attribute tokens`.
pub fn train_denoiser<S: Scalar>(
    net: &ScoreNet<S>,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<(ScoreNet<S>, Vec<LossRecord>)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if corpus.resolution() != net.config.resolution {
        return Err(Error::Shape {
            context: "train_denoiser resolution",
            expected: vec![net.config.resolution],
            got: vec![corpus.resolution()],
        });
    }
    let images: Vec<Grid<S>> = corpus.samples.iter().map(|s| s.image.cast()).collect();
    let structures: Vec<Grid<S>> = corpus.samples.iter().map(|s| s.structure.cast()).collect();
    let examples: Vec<Example<'_, S>> = corpus
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| Example { image: &images[i], structure: &structures[i], tokens: prompt_tokens(s.attrs, false) })
        .collect();
    train_examples(net, &examples, cfg)
}

/// [`train_denoiser`] over arbitrary labelled images.
pub fn train_examples<S: Scalar>(
    net: &ScoreNet<S>,
    examples: &[Example<'_, S>],
    cfg: &TrainConfig,
) -> Result<(ScoreNet<S>, Vec<LossRecord>)> {
    let mut out = net.clone();
    let trace = fit(&mut out, examples, cfg, |_, _, _| Ok(0.0))?;
    Ok((out, trace))
}

/// Ancestral DDPM sampling of `n` images from `t = T` down to 1, clamped to
/// `[0,1]` only at the end. All samples share `tokens`; `structures` gives
/// one map per sample (or none).
pub fn sample_batch<S: Scalar, M: EpsModel<S> + ?Sized>(
    net: &M,
    tokens: &[TokenId],
    structures: Option<&[Grid<S>]>,
    cond_scale: S,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<Vec<Grid<S>>> {
    let res = net.resolution();
    if let Some(st) = structures {
        if st.len() != n {
            return Err(Error::Shape { context: "sample structures", expected: vec![n], got: vec![st.len()] });
        }
        if let Some(bad) = st.iter().find(|g| g.h != res || g.w != res) {
            return Err(Error::Shape { context: "sample structure", expected: vec![res, res], got: bad.shape().to_vec() });
        }
    }
    let px = res * res;
    let mut rng = SplitMix64::new(seed);
    let mut x = Tensor4::from_vec(n, 1, res, res, rng.normal_vec(n * px));
    let conds: Vec<Condition<'_, S>> =
        (0..n).map(|i| Condition { tokens, structure: structures.map(|s| &s[i]) }).collect();
    for t in (1..=sched.steps()).rev() {
        let eps = net.predict_eps_batch(&x, t, &conds, cond_scale)?;
        let beta = sched.beta(t);
        let a_bar = sched.alpha_bar(t);
        let a_bar_prev = sched.alpha_bar_or_one(t - 1);
        let inv_sqrt_alpha = lit::<S>(1.0 / (1.0 - beta).sqrt());
        let eps_coef = lit::<S>(beta / (1.0 - a_bar).sqrt());
        let sigma = lit::<S>(((1.0 - a_bar_prev) / (1.0 - a_bar) * beta).sqrt());
        for (xv, &e) in x.data.iter_mut().zip(&eps.data) {
            *xv = inv_sqrt_alpha * (*xv - eps_coef * e);
        }
        if t > 1 {
            for xv in x.data.iter_mut() {
                *xv += sigma * lit::<S>(rng.normal());
            }
        }
    }
    Ok((0..n)
        .map(|i| Grid { h: res, w: res, data: x.sample(i).iter().map(|v| v.max(S::zero()).min(S::one())).collect() })
        .collect())
}

/// Single ancestral sample; see [`sample_batch`].
pub fn sample<S: Scalar, M: EpsModel<S> + ?Sized>(
    net: &M,
    cond: &Condition<'_, S>,
    cond_scale: S,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Grid<S>> {
    let structures = cond.structure.map(|s| vec![s.clone()]);
    Ok(sample_batch(net, cond.tokens, structures.as_deref(), cond_scale, sched, 1, seed)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_sched() -> NoiseSchedule {
        make_schedule(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn first_alpha_bar_is_one_minus_beta_min() {
        assert!((default_sched().alpha_bar(1) - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn last_alpha_bar_matches_log_sum_oracle() {
        // independent route: exp(sum log(1 - beta_i)) in double precision
        let log_sum: f64 = (0..1000).map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln()).sum();
        let oracle = log_sum.exp();
        let got = default_sched().alpha_bar(1000);
        assert!((got - oracle).abs() / oracle < 1e-9);
        assert!((got - 4.0e-5).abs() / 4.0e-5 < 0.10, "alpha_bar_T = {got}");
    }

    #[test]
    fn schedule_is_monotone() {
        let s = default_sched();
        for t in 2..=1000 {
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.snr(t) < s.snr(t - 1));
        }
        assert!(s.alpha_bar(1000) < s.alpha_bar(1) && s.alpha_bar(1) <= 1.0 - s.beta(1));
    }

    #[test]
    fn schedule_parameter_errors() {
        assert!(make_schedule(1, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn add_noise_zero_image_and_scalar_case() {
        let s = default_sched();
        let mut r = SplitMix64::new(1);
        let eps = Grid::from_vec(2, 2, r.normal_vec::<f64>(4)).unwrap();
        let st = add_noise(&Grid::zeros(2, 2), 500, &eps, &s).unwrap();
        let k = (1.0 - s.alpha_bar(500)).sqrt();
        for (a, e) in st.z_t.data.iter().zip(&eps.data) {
            assert!((a - k * e).abs() < 1e-15);
        }
        let one = Grid::filled(1, 1, 1.0f64);
        let st = add_noise(&one, 1, &one, &s).unwrap();
        assert!((st.z_t.data[0] - (0.9999f64.sqrt() + 0.0001f64.sqrt())).abs() < 1e-12);
        assert!((st.z_t.data[0] - 1.00995).abs() < 1e-5);
    }

    #[test]
    fn add_noise_errors() {
        let s = default_sched();
        let z = Grid::<f32>::zeros(2, 2);
        assert!(add_noise(&z, 0, &z, &s).is_err());
        assert!(add_noise(&z, 1001, &z, &s).is_err());
        assert!(add_noise(&z, 3, &Grid::zeros(3, 2), &s).is_err());
    }

    #[test]
    fn noising_identity_recovers_signal() {
        let s = default_sched();
        let mut r = SplitMix64::new(5);
        let z = Grid::from_vec(4, 4, r.normal_vec::<f64>(16)).unwrap();
        let eps = Grid::from_vec(4, 4, r.normal_vec::<f64>(16)).unwrap();
        for t in [1, 250, 999] {
            let st = add_noise(&z, t, &eps, &s).unwrap();
            let a = s.alpha_bar(t);
            for i in 0..16 {
                let rec = (st.z_t.data[i] - (1.0 - a).sqrt() * eps.data[i]) / a.sqrt();
                assert!((rec - z.data[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn noised_mean_matches_statistical_oracle() {
        let s = default_sched();
        let t = 300;
        let a = s.alpha_bar(t);
        let z = Grid::filled(1, 1, 0.7f64);
        let mut r = SplitMix64::new(77);
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let eps = Grid::filled(1, 1, r.normal());
            sum += add_noise(&z, t, &eps, &s).unwrap().z_t.data[0];
        }
        let mean = sum / n as f64;
        let se = (1.0 - a).sqrt() / (n as f64).sqrt();
        assert!((mean - a.sqrt() * 0.7).abs() < 3.0 * se);
    }
}
