//! Subject personalization: fine-tune a copy of the base net on one identity
//! with an identifier token, regularized by a prior-preservation term on
//! samples drawn from the frozen base net.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, TensorEntry};
use crate::diffusion::{clip_global_norm, draw_batch, sample_batch, Example, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{frechet_distance, Probe};
use crate::grid::Grid;
use crate::optim::{Adam, AdamConfig};
use crate::rng::SplitMix64;
use crate::scalar::{lit, Scalar};
use crate::scorenet::{prompt_tokens, Objective, Prediction, ScoreNet, Target, TokenId, Weighting, SKS_TOKEN};
use crate::synthdata::Corpus;

/// Class samples from the frozen base net with the structure maps they were drawn under.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorCorpus<S> {
    pub images: Vec<Grid<S>>,
    pub structures: Vec<Grid<S>>,
    pub tokens: Vec<TokenId>,
    pub seed: u64,
    /// Set when the base net had never been trained.
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorManifest {
    pub n_samples: usize,
    pub resolution: usize,
    pub tokens: Vec<TokenId>,
    pub seed: u64,
    pub warning: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

impl<S: Scalar> PriorCorpus<S> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        container::ensure_dir(dir)?;
        let r = self.images.first().map_or(0, |g| g.h);
        let flat = |gs: &[Grid<S>]| -> Vec<f32> { gs.iter().flat_map(|g| g.data.iter().map(|v| v.as_f64() as f32)).collect() };
        container::write_f32(&dir.join("image.f32"), &flat(&self.images))?;
        container::write_f32(&dir.join("structure.f32"), &flat(&self.structures))?;
        container::write_json(
            &dir.join("prior.json"),
            &PriorManifest {
                n_samples: self.len(),
                resolution: r,
                tokens: self.tokens.clone(),
                seed: self.seed,
                warning: self.warning.clone(),
                tensors: vec![
                    TensorEntry::f32("image", vec![self.len(), r, r]),
                    TensorEntry::f32("structure", vec![self.len(), r, r]),
                ],
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: PriorManifest = container::read_json(&dir.join("prior.json"))?;
        let px = m.resolution * m.resolution;
        let unflat = |v: Vec<f32>| -> Vec<Grid<S>> {
            v.chunks_exact(px.max(1))
                .map(|c| Grid { h: m.resolution, w: m.resolution, data: c.iter().map(|&x| lit(x as f64)).collect() })
                .collect()
        };
        Ok(Self {
            images: unflat(container::read_f32(&dir.join("image.f32"), m.n_samples * px)?),
            structures: unflat(container::read_f32(&dir.join("structure.f32"), m.n_samples * px)?),
            tokens: m.tokens,
            seed: m.seed,
            warning: m.warning,
        })
    }
}

/// `n` ancestral samples of the class prompt, each under a structure map drawn
/// uniformly from `structure_pool`.
pub fn make_prior_corpus<S: Scalar>(
    base: &ScoreNet<S>,
    class_tokens: &[TokenId],
    n: usize,
    structure_pool: &[Grid<S>],
    seed: u64,
) -> Result<PriorCorpus<S>> {
    if n == 0 {
        return Err(Error::Invalid("prior corpus size must be at least 1".into()));
    }
    if structure_pool.is_empty() {
        return Err(Error::MissingStructure);
    }
    let warning = (base.trained_iterations == 0)
        .then(|| "base net has no recorded training; prior samples are from an untrained model".to_string());
    let mut rng = SplitMix64::new(seed);
    let structures: Vec<Grid<S>> = (0..n).map(|_| structure_pool[rng.index(structure_pool.len())].clone()).collect();
    let mut images = Vec::with_capacity(n);
    for (chunk_i, chunk) in structures.chunks(16).enumerate() {
        let s = rng.next_u64() ^ chunk_i as u64;
        images.extend(sample_batch(base, class_tokens, Some(chunk), base.cond_scale(), base.schedule(), chunk.len(), s)?);
    }
    Ok(PriorCorpus { images, structures, tokens: class_tokens.to_vec(), seed, warning })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    /// Weight of the prior-preservation term.
    pub lambda: f64,
    pub identity_token: TokenId,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                iterations: 2000,
                batch_size: 16,
                lr: 1e-4,
                objective: Objective { target: Target::Eps, weighting: Weighting::Fantasia, scale: 1.0 },
                ..TrainConfig::default()
            },
            lambda: 1.0,
            identity_token: SKS_TOKEN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub iteration: usize,
    pub subject: f64,
    pub prior: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct PersonalizedNet<S> {
    pub net: ScoreNet<S>,
    pub trace: Vec<FinetuneRecord>,
}

pub fn write_finetune_csv(trace: &[FinetuneRecord], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,subject_loss,prior_loss,total_loss")?;
    for r in trace {
        writeln!(f, "{},{:.9e},{:.9e},{:.9e}", r.iteration, r.subject, r.prior, r.total)?;
    }
    f.flush()?;
    Ok(())
}

/// Fine-tunes a copy of `base` on `subject` (one identity, prompt `{class, sks}`
/// plus its attribute tokens) with `lambda` times the class-prior loss.
pub fn finetune<S: Scalar>(
    base: &ScoreNet<S>,
    subject: &Corpus,
    prior: &PriorCorpus<S>,
    cfg: &FinetuneConfig,
) -> Result<PersonalizedNet<S>> {
    if cfg.identity_token as usize >= base.config.n_tokens {
        return Err(Error::MissingToken("sks"));
    }
    if subject.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if subject.subject_index.iter().any(|&s| s != subject.subject_index[0]) {
        return Err(Error::Invalid("subject corpus must hold a single identity".into()));
    }
    if cfg.lambda > 0.0 && prior.is_empty() {
        return Err(Error::Invalid("prior corpus is empty but lambda > 0".into()));
    }
    let mut net = base.clone();
    if cfg.train.objective.target == Target::Sample {
        net.config.prediction = Prediction::Sample;
    }
    let images: Vec<Grid<S>> = subject.samples.iter().map(|s| s.image.cast()).collect();
    let structures: Vec<Grid<S>> = subject.samples.iter().map(|s| s.structure.cast()).collect();
    let subject_ex: Vec<Example<'_, S>> = subject
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut tokens = prompt_tokens(s.attrs, false);
            tokens.insert(1, cfg.identity_token);
            Example { image: &images[i], structure: &structures[i], tokens }
        })
        .collect();
    let prior_ex: Vec<Example<'_, S>> = prior
        .images
        .iter()
        .zip(&prior.structures)
        .map(|(image, structure)| Example { image, structure, tokens: prior.tokens.clone() })
        .collect();

    let sched = net.config.schedule.build()?;
    let mut rng = SplitMix64::new(cfg.train.seed);
    let mut opt = Adam::new(net.num_params(), AdamConfig { lr: cfg.train.lr, ..AdamConfig::default() });
    let mut trace = Vec::with_capacity(cfg.train.iterations);
    let lambda = lit::<S>(cfg.lambda);
    for it in 0..cfg.train.iterations {
        let batch = draw_batch(&subject_ex, cfg.train.batch_size, &sched, &cfg.train, &mut rng);
        let (ls, mut grads) = net.loss_and_gradients(&batch, &cfg.train.objective)?;
        let mut lp = S::zero();
        if cfg.lambda > 0.0 {
            let pb = draw_batch(&prior_ex, cfg.train.batch_size, &sched, &cfg.train, &mut rng);
            let (l, g) = net.loss_and_gradients(&pb, &cfg.train.objective)?;
            lp = l;
            grads.iter_mut().zip(g).for_each(|(a, b)| *a += lambda * b);
        }
        let total = ls + lambda * lp;
        if !total.as_f64().is_finite() {
            return Err(Error::Divergence { iteration: it, detail: format!("fine-tune loss = {total}") });
        }
        if let Some(c) = cfg.train.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        opt.step(&mut net.params, &grads, None);
        trace.push(FinetuneRecord { iteration: it, subject: ls.as_f64(), prior: lp.as_f64(), total: total.as_f64() });
    }
    net.trained_iterations += cfg.train.iterations;
    net.identity_token = Some(cfg.identity_token);
    Ok(PersonalizedNet { net, trace })
}

/// Fréchet distance (probe features) between class-prompt samples of `base`
/// and of `tuned`, drawn with identical structures and noise.
pub fn class_drift<S: Scalar>(
    probe: &Probe,
    base: &ScoreNet<S>,
    tuned: &ScoreNet<S>,
    class_tokens: &[TokenId],
    structure_pool: &[Grid<S>],
    n: usize,
    seed: u64,
) -> Result<f64> {
    let before = make_prior_corpus(base, class_tokens, n, structure_pool, seed)?;
    let after = make_prior_corpus(tuned, class_tokens, n, structure_pool, seed)?;
    frechet_distance(probe, &before.images, &after.images)
}
