//! Conditional noise-prediction network: a two-level convolutional
//! encoder-decoder with a global conditioning vector built from the timestep
//! and a bag of prompt tokens, plus a structure input channel.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, TensorEntry};
use crate::diffusion::{NoiseSchedule, ScheduleSpec};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::{self, Tensor4};
use crate::rng::SplitMix64;
use crate::scalar::{lit, Scalar};
use crate::synthdata::Attributes;

pub type TokenId = u32;

pub const NULL_TOKEN: TokenId = 0;
pub const CLASS_TOKEN: TokenId = 1;
/// Rare identifier bound to the personalized subject.
pub const SKS_TOKEN: TokenId = 2;
pub const HAT_TOKEN: TokenId = 3;
pub const STRIPES_TOKEN: TokenId = 4;
pub const HELD_TOKEN: TokenId = 5;
/// Never used in training; stands in for an unseen identifier.
pub const FRESH_TOKEN: TokenId = 6;
pub const MIN_TOKENS: usize = 7;

pub const ATTRIBUTE_TOKENS: [TokenId; 3] = [HAT_TOKEN, STRIPES_TOKEN, HELD_TOKEN];

pub fn token_name(id: TokenId) -> Option<&'static str> {
    Some(match id {
        NULL_TOKEN => "<null>",
        CLASS_TOKEN => "figure",
        SKS_TOKEN => "sks",
        HAT_TOKEN => "hat",
        STRIPES_TOKEN => "stripes",
        HELD_TOKEN => "held_item",
        FRESH_TOKEN => "xqz",
        _ => return None,
    })
}

pub fn token_by_name(name: &str) -> Option<TokenId> {
    (0..MIN_TOKENS as TokenId).find(|&id| token_name(id) == Some(name))
}

/// `{class}` plus one token per present attribute, with `sks` when `identity`.
pub fn prompt_tokens(attrs: Attributes, identity: bool) -> Vec<TokenId> {
    let mut t = vec![CLASS_TOKEN];
    if identity {
        t.push(SKS_TOKEN);
    }
    for (on, tok) in attrs.as_array().into_iter().zip(ATTRIBUTE_TOKENS) {
        if on {
            t.push(tok);
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Epsilon,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub resolution: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub time_dim: usize,
    pub n_tokens: usize,
    pub prediction: Prediction,
    pub schedule: ScheduleSpec,
    pub zero_init_output: bool,
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            channels: 16,
            embed_dim: 64,
            time_dim: 32,
            n_tokens: 8,
            prediction: Prediction::Epsilon,
            schedule: ScheduleSpec::default(),
            zero_init_output: true,
            init_seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        if self.resolution == 0 || self.resolution % 4 != 0 {
            return bad(format!("resolution must be a positive multiple of 4, got {}", self.resolution));
        }
        if self.channels == 0 || self.embed_dim == 0 {
            return bad("channels and embed_dim must be positive".into());
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return bad(format!("time_dim must be even and >= 2, got {}", self.time_dim));
        }
        if self.n_tokens < MIN_TOKENS {
            return bad(format!("token table needs at least {MIN_TOKENS} entries, got {}", self.n_tokens));
        }
        self.schedule.build().map(|_| ())
    }
}

/// A prompt (bag of token ids, empty meaning null) and an optional structure map.
#[derive(Debug, Clone, Copy)]
pub struct Condition<'a, S> {
    pub tokens: &'a [TokenId],
    pub structure: Option<&'a Grid<S>>,
}

impl<'a, S> Condition<'a, S> {
    pub fn new(tokens: &'a [TokenId], structure: Option<&'a Grid<S>>) -> Self {
        Self { tokens, structure }
    }

    pub fn null() -> Self {
        Self { tokens: &[], structure: None }
    }
}

/// Anything that predicts the injected noise for a noisy image.
pub trait EpsModel<S: Scalar> {
    fn resolution(&self) -> usize;

    fn predict_eps(&self, z_t: &Grid<S>, t: usize, cond: &Condition<'_, S>, cond_scale: S) -> Result<Grid<S>>;

    /// One prediction per sample of `z`, all at timestep `t`.
    fn predict_eps_batch(
        &self,
        z: &Tensor4<S>,
        t: usize,
        conds: &[Condition<'_, S>],
        cond_scale: S,
    ) -> Result<Tensor4<S>> {
        let mut out = Tensor4::zeros(z.n, 1, z.h, z.w);
        for (i, cond) in conds.iter().enumerate() {
            let g = Grid { h: z.h, w: z.w, data: z.sample(i).to_vec() };
            out.sample_mut(i).copy_from_slice(&self.predict_eps(&g, t, cond, cond_scale)?.data);
        }
        Ok(out)
    }
}

/// Batched network input. `structure` holds raw maps; `scale` multiplies each.
#[derive(Debug, Clone)]
pub struct NetInput<S> {
    pub z: Tensor4<S>,
    pub structure: Tensor4<S>,
    pub scale: Vec<S>,
    pub t: Vec<usize>,
    pub tokens: Vec<Vec<TokenId>>,
}

impl<S: Scalar> NetInput<S> {
    pub fn from_conditions(z: &Tensor4<S>, t: usize, conds: &[Condition<'_, S>], cond_scale: S) -> Result<Self> {
        if conds.len() != z.n {
            return Err(Error::Shape { context: "conditions per batch", expected: vec![z.n], got: vec![conds.len()] });
        }
        let mut structure = Tensor4::zeros(z.n, 1, z.h, z.w);
        let mut scale = Vec::with_capacity(z.n);
        for (i, c) in conds.iter().enumerate() {
            match c.structure {
                Some(g) => {
                    if g.h != z.h || g.w != z.w {
                        return Err(Error::Shape {
                            context: "structure map",
                            expected: vec![z.h, z.w],
                            got: vec![g.h, g.w],
                        });
                    }
                    structure.sample_mut(i).copy_from_slice(&g.data);
                    scale.push(cond_scale);
                }
                None => scale.push(S::zero()),
            }
        }
        Ok(Self {
            z: z.clone(),
            structure,
            scale,
            t: vec![t; z.n],
            tokens: conds.iter().map(|c| c.tokens.to_vec()).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Eps,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    /// `sigma^2 sqrt(1 - sigma^2)` with `sigma^2 = 1 - alpha_bar_t`.
    Fantasia,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    pub target: Target,
    pub weighting: Weighting,
    pub scale: f64,
}

impl Default for Objective {
    fn default() -> Self {
        Self { target: Target::Eps, weighting: Weighting::Uniform, scale: 1.0 }
    }
}

impl Objective {
    pub fn weight(&self, sched: &NoiseSchedule, t: usize) -> f64 {
        match self.weighting {
            Weighting::Uniform => 1.0,
            Weighting::Fantasia => {
                let a = sched.alpha_bar(t);
                (1.0 - a) * a.sqrt()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainBatch<S> {
    pub input: NetInput<S>,
    pub eps: Tensor4<S>,
    pub x0: Tensor4<S>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    off: usize,
    cout: usize,
    cin: usize,
    taps: usize,
}

impl Block {
    fn wlen(&self) -> usize {
        self.cout * self.cin * self.taps
    }

    fn len(&self) -> usize {
        self.wlen() + self.cout
    }

    fn w<'a, S>(&self, p: &'a [S]) -> &'a [S] {
        &p[self.off..self.off + self.wlen()]
    }

    fn b<'a, S>(&self, p: &'a [S]) -> &'a [S] {
        &p[self.off + self.wlen()..self.off + self.len()]
    }

    fn grads<'a, S>(&self, g: &'a mut [S]) -> (&'a mut [S], &'a mut [S]) {
        g[self.off..self.off + self.len()].split_at_mut(self.wlen())
    }

    fn conv<S: Scalar>(&self, p: &[S], x: &Tensor4<S>) -> Tensor4<S> {
        nn::conv3x3(x, self.w(p), self.b(p), self.cout)
    }

    fn conv_back<S: Scalar>(&self, p: &[S], g: &mut [S], x: &Tensor4<S>, dy: &Tensor4<S>, need_dx: bool) -> Option<Tensor4<S>> {
        let (dw, db) = self.grads(g);
        nn::conv3x3_backward(x, self.w(p), dy, dw, db, need_dx)
    }

    fn dense<S: Scalar>(&self, p: &[S], x: &[S], n: usize) -> Vec<S> {
        nn::dense(x, n, self.cin, self.w(p), self.b(p), self.cout)
    }

    fn dense_back<S: Scalar>(&self, p: &[S], g: &mut [S], x: &[S], n: usize, dy: &[S]) -> Vec<S> {
        let (dw, db) = self.grads(g);
        nn::dense_backward(x, n, self.cin, self.w(p), dy, self.cout, dw, db)
    }
}

#[derive(Debug, Clone)]
struct Arch {
    time: Block,
    tokens: usize,
    conv_in: Block,
    emb_in: Block,
    skip: Block,
    down: Block,
    emb_down: Block,
    mid: Block,
    emb_mid: Block,
    up2: Block,
    emb_up2: Block,
    up1: Block,
    emb_up1: Block,
    out: Block,
    total: usize,
    layout: Vec<ParamEntry>,
    groups: Vec<(String, usize, usize)>,
}

impl Arch {
    fn new(cfg: &NetConfig) -> Self {
        let (c, d) = (cfg.channels, cfg.embed_dim);
        let mut off = 0;
        let mut layout = Vec::new();
        let mut groups = Vec::new();
        let mut block = |name: &str, cout: usize, cin: usize, taps: usize| {
            let b = Block { off, cout, cin, taps };
            let mut wshape = vec![cout, cin];
            if taps == 9 {
                wshape.extend([3, 3]);
            }
            layout.push(ParamEntry { name: format!("{name}.weight"), shape: wshape, offset: off });
            layout.push(ParamEntry { name: format!("{name}.bias"), shape: vec![cout], offset: off + b.wlen() });
            groups.push((name.to_string(), off, b.len()));
            off += b.len();
            b
        };
        let time = block("time", d, cfg.time_dim, 1);
        let conv_in = block("conv_in", c, 2, 9);
        let emb_in = block("emb_in", c, d, 1);
        let skip = block("conv_skip", c, c, 9);
        let down = block("conv_down", 2 * c, c, 9);
        let emb_down = block("emb_down", 2 * c, d, 1);
        let mid = block("conv_mid", 2 * c, 2 * c, 9);
        let emb_mid = block("emb_mid", 2 * c, d, 1);
        let up2 = block("conv_up2", 2 * c, 4 * c, 9);
        let emb_up2 = block("emb_up2", 2 * c, d, 1);
        let up1 = block("conv_up1", c, 3 * c, 9);
        let emb_up1 = block("emb_up1", c, d, 1);
        let out = block("conv_out", 1, c, 9);
        let tokens = off;
        layout.push(ParamEntry { name: "token_table".into(), shape: vec![cfg.n_tokens, d], offset: tokens });
        groups.push(("token_table".into(), tokens, cfg.n_tokens * d));
        let total = tokens + cfg.n_tokens * d;
        Self {
            time,
            tokens,
            conv_in,
            emb_in,
            skip,
            down,
            emb_down,
            mid,
            emb_mid,
            up2,
            emb_up2,
            up1,
            emb_up1,
            out,
            total,
            layout,
            groups,
        }
    }

    fn blocks(&self) -> [&Block; 13] {
        [
            &self.time,
            &self.conv_in,
            &self.emb_in,
            &self.skip,
            &self.down,
            &self.emb_down,
            &self.mid,
            &self.emb_mid,
            &self.up2,
            &self.emb_up2,
            &self.up1,
            &self.emb_up1,
            &self.out,
        ]
    }
}

struct Cache<S> {
    n: usize,
    temb: Vec<S>,
    a: Vec<S>,
    g: Vec<S>,
    ga: Vec<S>,
    x0: Tensor4<S>,
    p1: Tensor4<S>,
    h1: Tensor4<S>,
    p1b: Tensor4<S>,
    d1: Tensor4<S>,
    p2: Tensor4<S>,
    d2: Tensor4<S>,
    p3: Tensor4<S>,
    c4: Tensor4<S>,
    p4: Tensor4<S>,
    c5: Tensor4<S>,
    p5: Tensor4<S>,
    h5: Tensor4<S>,
}

fn silu_t<S: Scalar>(x: &Tensor4<S>) -> Tensor4<S> {
    Tensor4 { n: x.n, c: x.c, h: x.h, w: x.w, data: nn::silu_vec(&x.data) }
}

fn silu_back_t<S: Scalar>(pre: &Tensor4<S>, mut dy: Tensor4<S>) -> Tensor4<S> {
    nn::silu_backward(&pre.data, &mut dy.data);
    dy
}

/// Sinusoidal timestep features, `[sin(t f_k), cos(t f_k)]` with geometric `f_k`.
pub fn time_features<S: Scalar>(t: usize, dim: usize) -> Vec<S> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(dim);
    for k in 0..half {
        let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        v.push(lit((t as f64 * f).sin()));
    }
    for k in 0..half {
        let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        v.push(lit((t as f64 * f).cos()));
    }
    v
}

#[derive(Debug, Clone)]
pub struct ScoreNet<S> {
    pub config: NetConfig,
    pub params: Vec<S>,
    /// Token the net was personalized on, if any.
    pub identity_token: Option<TokenId>,
    /// Denoising iterations this parameter vector has seen.
    pub trained_iterations: usize,
    cond_scale: S,
    schedule: NoiseSchedule,
    arch: Arch,
}

impl<S: Scalar> ScoreNet<S> {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let arch = Arch::new(&config);
        let schedule = config.schedule.build()?;
        let mut rng = SplitMix64::new(config.init_seed);
        let mut params = vec![S::zero(); arch.total];
        for b in arch.blocks() {
            if std::ptr::eq(b, &arch.out) && config.zero_init_output {
                continue;
            }
            let a = (3.0 / (b.cin * b.taps) as f64).sqrt();
            for p in &mut params[b.off..b.off + b.wlen()] {
                *p = lit(rng.uniform(-a, a));
            }
        }
        for p in &mut params[arch.tokens..] {
            *p = lit(0.5 * rng.normal());
        }
        Ok(Self { config, params, identity_token: None, trained_iterations: 0, cond_scale: S::one(), schedule, arch })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn layout(&self) -> &[ParamEntry] {
        &self.arch.layout
    }

    /// `(name, offset, len)` for each layer, used for per-layer reports.
    pub fn layer_groups(&self) -> &[(String, usize, usize)] {
        &self.arch.groups
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn cond_scale(&self) -> S {
        self.cond_scale
    }

    pub fn set_cond_scale(&mut self, s: S) -> Result<()> {
        let v = s.as_f64();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Range { what: "cond_scale", value: v, lo: 0.0, hi: 1.0 });
        }
        self.cond_scale = s;
        Ok(())
    }

    pub fn token_embedding(&self, id: TokenId) -> Result<&[S]> {
        self.check_token(id)?;
        let d = self.config.embed_dim;
        let o = self.arch.tokens + id as usize * d;
        Ok(&self.params[o..o + d])
    }

    fn check_token(&self, id: TokenId) -> Result<()> {
        if id as usize >= self.config.n_tokens {
            return Err(Error::UnknownToken(id));
        }
        Ok(())
    }

    /// Adds `scale * N(0,1)` to every parameter.
    pub fn perturb(&mut self, seed: u64, scale: f64) {
        let mut rng = SplitMix64::new(seed);
        for p in &mut self.params {
            *p += lit::<S>(scale * rng.normal());
        }
    }

    pub fn cast<T: Scalar>(&self) -> ScoreNet<T> {
        ScoreNet {
            config: self.config.clone(),
            params: self.params.iter().map(|p| lit::<T>(p.as_f64())).collect(),
            identity_token: self.identity_token,
            trained_iterations: self.trained_iterations,
            cond_scale: lit(self.cond_scale.as_f64()),
            schedule: self.schedule.clone(),
            arch: self.arch.clone(),
        }
    }

    fn check_input(&self, x: &NetInput<S>) -> Result<()> {
        let r = self.config.resolution;
        let n = x.z.n;
        if [x.z.c, x.z.h, x.z.w] != [1, r, r] {
            return Err(Error::Shape { context: "net input", expected: vec![n, 1, r, r], got: x.z.shape().to_vec() });
        }
        if x.structure.shape() != x.z.shape() {
            return Err(Error::Shape {
                context: "structure input",
                expected: x.z.shape().to_vec(),
                got: x.structure.shape().to_vec(),
            });
        }
        if x.scale.len() != n || x.t.len() != n || x.tokens.len() != n {
            return Err(Error::Shape {
                context: "per-sample conditioning",
                expected: vec![n],
                got: vec![x.scale.len(), x.t.len(), x.tokens.len()],
            });
        }
        for &t in &x.t {
            self.schedule.check_t(t)?;
        }
        for &id in x.tokens.iter().flatten() {
            self.check_token(id)?;
        }
        Ok(())
    }

    fn forward_cached(&self, x: &NetInput<S>) -> Result<(Tensor4<S>, Cache<S>)> {
        self.check_input(x)?;
        let p = &self.params;
        let ar = &self.arch;
        let n = x.z.n;
        let d = self.config.embed_dim;
        let mut temb = Vec::with_capacity(n * self.config.time_dim);
        for &t in &x.t {
            temb.extend(time_features::<S>(t, self.config.time_dim));
        }
        let a = ar.time.dense(p, &temb, n);
        let mut g = nn::silu_vec(&a);
        for (i, toks) in x.tokens.iter().enumerate() {
            let row = &mut g[i * d..(i + 1) * d];
            let ids: &[TokenId] = if toks.is_empty() { &[NULL_TOKEN] } else { toks };
            for &id in ids {
                let o = ar.tokens + id as usize * d;
                for (r, e) in row.iter_mut().zip(&p[o..o + d]) {
                    *r += *e;
                }
            }
        }
        let ga = nn::silu_vec(&g);

        let hw = x.z.plane();
        let mut x0 = Tensor4::zeros(n, 2, x.z.h, x.z.w);
        for i in 0..n {
            let s = x.scale[i];
            let dst = x0.sample_mut(i);
            dst[..hw].copy_from_slice(x.z.sample(i));
            for (o, v) in dst[hw..].iter_mut().zip(x.structure.sample(i)) {
                *o = s * *v;
            }
        }
        let mut p1 = ar.conv_in.conv(p, &x0);
        nn::add_channel_bias(&mut p1, &ar.emb_in.dense(p, &ga, n));
        let h1 = silu_t(&p1);
        let p1b = ar.skip.conv(p, &h1);
        let s1 = silu_t(&p1b);
        let d1 = nn::avg_pool2(&s1);
        let mut p2 = ar.down.conv(p, &d1);
        nn::add_channel_bias(&mut p2, &ar.emb_down.dense(p, &ga, n));
        let s2 = silu_t(&p2);
        let d2 = nn::avg_pool2(&s2);
        let mut p3 = ar.mid.conv(p, &d2);
        nn::add_channel_bias(&mut p3, &ar.emb_mid.dense(p, &ga, n));
        let h3 = silu_t(&p3);
        let c4 = nn::concat(&nn::upsample2(&h3), &s2);
        let mut p4 = ar.up2.conv(p, &c4);
        nn::add_channel_bias(&mut p4, &ar.emb_up2.dense(p, &ga, n));
        let h4 = silu_t(&p4);
        let c5 = nn::concat(&nn::upsample2(&h4), &s1);
        let mut p5 = ar.up1.conv(p, &c5);
        nn::add_channel_bias(&mut p5, &ar.emb_up1.dense(p, &ga, n));
        let h5 = silu_t(&p5);
        let out = ar.out.conv(p, &h5);
        Ok((out, Cache { n, temb, a, g, ga, x0, p1, h1, p1b, d1, p2, d2, p3, c4, p4, c5, p5, h5 }))
    }

    /// Raw network output (noise or clean-image estimate, per `config.prediction`).
    pub fn forward_batch(&self, x: &NetInput<S>) -> Result<Tensor4<S>> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Noise prediction for one image using the net's own `cond_scale`.
    pub fn forward(&self, z_t: &Grid<S>, t: usize, cond: &Condition<'_, S>) -> Result<Grid<S>> {
        self.predict_eps(z_t, t, cond, self.cond_scale)
    }

    fn backward(&self, cache: &Cache<S>, tokens: &[Vec<TokenId>], dout: &Tensor4<S>, grads: &mut [S]) {
        let p = &self.params;
        let ar = &self.arch;
        let n = cache.n;
        let c = self.config.channels;
        let d = self.config.embed_dim;
        let dh5 = ar.out.conv_back(p, grads, &cache.h5, dout, true).unwrap();
        let dp5 = silu_back_t(&cache.p5, dh5);
        let de5 = nn::channel_sums(&dp5);
        let dc5 = ar.up1.conv_back(p, grads, &cache.c5, &dp5, true).unwrap();
        let (du4, mut ds1) = nn::split_channels(&dc5, 2 * c);
        let dp4 = silu_back_t(&cache.p4, nn::upsample2_backward(&du4));
        let de4 = nn::channel_sums(&dp4);
        let dc4 = ar.up2.conv_back(p, grads, &cache.c4, &dp4, true).unwrap();
        let (du3, mut ds2) = nn::split_channels(&dc4, 2 * c);
        let dp3 = silu_back_t(&cache.p3, nn::upsample2_backward(&du3));
        let de3 = nn::channel_sums(&dp3);
        let dd2 = ar.mid.conv_back(p, grads, &cache.d2, &dp3, true).unwrap();
        for (a, b) in ds2.data.iter_mut().zip(nn::avg_pool2_backward(&dd2).data) {
            *a += b;
        }
        let dp2 = silu_back_t(&cache.p2, ds2);
        let de2 = nn::channel_sums(&dp2);
        let dd1 = ar.down.conv_back(p, grads, &cache.d1, &dp2, true).unwrap();
        for (a, b) in ds1.data.iter_mut().zip(nn::avg_pool2_backward(&dd1).data) {
            *a += b;
        }
        let dp1b = silu_back_t(&cache.p1b, ds1);
        let dh1 = ar.skip.conv_back(p, grads, &cache.h1, &dp1b, true).unwrap();
        let dp1 = silu_back_t(&cache.p1, dh1);
        let de1 = nn::channel_sums(&dp1);
        ar.conv_in.conv_back(p, grads, &cache.x0, &dp1, false);

        let mut dga = vec![S::zero(); n * d];
        for (blk, de) in [(&ar.emb_in, de1), (&ar.emb_down, de2), (&ar.emb_mid, de3), (&ar.emb_up2, de4), (&ar.emb_up1, de5)] {
            let dx = blk.dense_back(p, grads, &cache.ga, n, &de);
            for (a, b) in dga.iter_mut().zip(dx) {
                *a += b;
            }
        }
        let mut dg = dga;
        nn::silu_backward(&cache.g, &mut dg);
        for (i, toks) in tokens.iter().enumerate() {
            let ids: &[TokenId] = if toks.is_empty() { &[NULL_TOKEN] } else { toks };
            for &id in ids {
                let o = ar.tokens + id as usize * d;
                for (gr, v) in grads[o..o + d].iter_mut().zip(&dg[i * d..(i + 1) * d]) {
                    *gr += *v;
                }
            }
        }
        let mut da = dg;
        nn::silu_backward(&cache.a, &mut da);
        ar.time.dense_back(p, grads, &cache.temb, n, &da);
    }

    /// Scaled, timestep-weighted mean squared error of the raw output against
    /// the objective's target, and its exact gradient.
    pub fn loss_and_gradients(&self, batch: &TrainBatch<S>, objective: &Objective) -> Result<(S, Vec<S>)> {
        let mut grads = vec![S::zero(); self.params.len()];
        let loss = self.accumulate_gradients(batch, objective, &mut grads)?;
        Ok((loss, grads))
    }

    /// Adds the objective's gradient to `grads` and returns the loss.
    pub fn accumulate_gradients(&self, batch: &TrainBatch<S>, objective: &Objective, grads: &mut [S]) -> Result<S> {
        let (out, cache) = self.forward_cached(&batch.input)?;
        let target = self.target_tensor(batch, objective)?;
        let (loss, dout) = self.loss_terms(&out, target, &batch.input.t, objective);
        if !loss.as_f64().is_finite() {
            return Err(Error::NonFinite(format!("denoising loss = {loss}")));
        }
        self.backward(&cache, &batch.input.tokens, &dout, grads);
        Ok(loss)
    }

    pub fn loss(&self, batch: &TrainBatch<S>, objective: &Objective) -> Result<S> {
        let out = self.forward_batch(&batch.input)?;
        let target = self.target_tensor(batch, objective)?;
        Ok(self.loss_terms(&out, target, &batch.input.t, objective).0)
    }

    pub fn param_gradients(&self, batch: &TrainBatch<S>, objective: &Objective) -> Result<Vec<S>> {
        Ok(self.loss_and_gradients(batch, objective)?.1)
    }

    fn target_tensor<'b>(&self, batch: &'b TrainBatch<S>, objective: &Objective) -> Result<&'b Tensor4<S>> {
        let matches = matches!(
            (objective.target, self.config.prediction),
            (Target::Eps, Prediction::Epsilon) | (Target::Sample, Prediction::Sample)
        );
        if !matches {
            return Err(Error::Invalid(format!(
                "objective target {:?} does not match network prediction {:?}",
                objective.target, self.config.prediction
            )));
        }
        let t = match objective.target {
            Target::Eps => &batch.eps,
            Target::Sample => &batch.x0,
        };
        if t.shape() != batch.input.z.shape() {
            return Err(Error::Shape {
                context: "training target",
                expected: batch.input.z.shape().to_vec(),
                got: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    fn loss_terms(&self, out: &Tensor4<S>, target: &Tensor4<S>, ts: &[usize], objective: &Objective) -> (S, Tensor4<S>) {
        let n = out.n;
        let m = out.sample_len();
        let mut dout = Tensor4::zeros(out.n, out.c, out.h, out.w);
        let mut loss = S::zero();
        for i in 0..n {
            let w = lit::<S>(objective.scale * objective.weight(&self.schedule, ts[i]) / (n * m) as f64);
            let two_w = w + w;
            let (o, y) = (out.sample(i), target.sample(i));
            let dst = dout.sample_mut(i);
            for j in 0..m {
                let r = o[j] - y[j];
                loss += w * r * r;
                dst[j] = two_w * r;
            }
        }
        (loss, dout)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        container::ensure_dir(dir)?;
        let manifest = ModelManifest {
            format: MODEL_FORMAT.into(),
            config: self.config.clone(),
            cond_scale: self.cond_scale.as_f64(),
            personalized: self.identity_token.is_some(),
            identity_token: self.identity_token,
            trained_iterations: self.trained_iterations,
            num_params: self.params.len(),
            parameters: self.arch.layout.clone(),
            tensors: vec![TensorEntry::f32("params", vec![self.params.len()])],
        };
        let flat: Vec<f32> = self.params.iter().map(|p| p.as_f64() as f32).collect();
        container::write_f32(&dir.join("params.f32"), &flat)?;
        container::write_json(&dir.join(MODEL_MANIFEST), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: ModelManifest = container::read_json(&dir.join(MODEL_MANIFEST))?;
        if manifest.format != MODEL_FORMAT {
            return Err(Error::Container {
                path: dir.to_path_buf(),
                detail: format!("unknown model format {:?}", manifest.format),
            });
        }
        let mut net = Self::new(manifest.config)?;
        if manifest.parameters != net.arch.layout || manifest.num_params != net.params.len() {
            return Err(Error::Container {
                path: dir.to_path_buf(),
                detail: "parameter layout does not match the configured architecture".into(),
            });
        }
        let flat = container::read_f32(&dir.join("params.f32"), net.params.len())?;
        net.params = flat.into_iter().map(|v| lit(v as f64)).collect();
        net.set_cond_scale(lit(manifest.cond_scale))?;
        net.identity_token = manifest.identity_token;
        net.trained_iterations = manifest.trained_iterations;
        Ok(net)
    }
}

impl<S: Scalar> EpsModel<S> for ScoreNet<S> {
    fn resolution(&self) -> usize {
        self.config.resolution
    }

    fn predict_eps(&self, z_t: &Grid<S>, t: usize, cond: &Condition<'_, S>, cond_scale: S) -> Result<Grid<S>> {
        let z = Tensor4::from_vec(1, 1, z_t.h, z_t.w, z_t.data.clone());
        let out = self.predict_eps_batch(&z, t, std::slice::from_ref(cond), cond_scale)?;
        Ok(Grid { h: z_t.h, w: z_t.w, data: out.data })
    }

    fn predict_eps_batch(
        &self,
        z: &Tensor4<S>,
        t: usize,
        conds: &[Condition<'_, S>],
        cond_scale: S,
    ) -> Result<Tensor4<S>> {
        let input = NetInput::from_conditions(z, t, conds, cond_scale)?;
        let mut out = self.forward_batch(&input)?;
        if self.config.prediction == Prediction::Sample {
            let a = self.schedule.alpha_bar(t);
            let (sa, inv) = (lit::<S>(a.sqrt()), lit::<S>(1.0 / (1.0 - a).sqrt()));
            for (o, &zv) in out.data.iter_mut().zip(&z.data) {
                *o = (zv - sa * *o) * inv;
            }
        }
        Ok(out)
    }
}

pub const MODEL_MANIFEST: &str = "model_manifest.json";
pub const MODEL_FORMAT: &str = "figedit-model-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format: String,
    pub config: NetConfig,
    pub cond_scale: f64,
    #[serde(default)]
    pub personalized: bool,
    pub identity_token: Option<TokenId>,
    pub trained_iterations: usize,
    pub num_params: usize,
    pub parameters: Vec<ParamEntry>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Entries checked per layer (evenly spaced); `None` checks all.
    pub max_per_layer: Option<usize>,
    pub batch: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, max_per_layer: Some(24), batch: 2, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub layer: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub layers: Vec<LayerCheck>,
}

impl GradCheckReport {
    pub fn failing_layers(&self) -> Vec<&str> {
        self.layers.iter().filter(|l| !l.passed).map(|l| l.layer.as_str()).collect()
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

const REL_FLOOR: f64 = 1e-7;

/// A seeded random batch touching every token and both structure states.
pub fn random_batch<S: Scalar>(cfg: &NetConfig, n: usize, seed: u64) -> TrainBatch<S> {
    let r = cfg.resolution;
    let mut rng = SplitMix64::new(seed);
    let sched = cfg.schedule.build().expect("validated schedule");
    let x0 = Tensor4::from_vec(n, 1, r, r, (0..n * r * r).map(|_| lit(rng.next_f64())).collect());
    let eps = Tensor4::from_vec(n, 1, r, r, rng.normal_vec(n * r * r));
    let structure = Tensor4::from_vec(n, 1, r, r, (0..n * r * r).map(|_| lit(rng.bernoulli(0.4) as u8 as f64)).collect());
    let mut z = Tensor4::zeros(n, 1, r, r);
    let mut t = Vec::new();
    let mut tokens = Vec::new();
    let mut scale = Vec::new();
    for i in 0..n {
        let ti = rng.range_inclusive(1, sched.steps() as u64) as usize;
        let a = sched.alpha_bar(ti);
        for j in 0..r * r {
            let k = i * r * r + j;
            z.data[k] = lit::<S>(a.sqrt()) * x0.data[k] + lit::<S>((1.0 - a).sqrt()) * eps.data[k];
        }
        t.push(ti);
        let toks: Vec<TokenId> = if i % 3 == 2 {
            vec![]
        } else {
            (0..cfg.n_tokens as TokenId).filter(|_| rng.bernoulli(0.5)).collect()
        };
        tokens.push(toks);
        scale.push(lit(if i % 2 == 0 { rng.uniform(0.5, 1.0) } else { 0.0 }));
    }
    TrainBatch { input: NetInput { z, structure, scale, t, tokens }, eps, x0 }
}

/// Central finite differences of the objective against `analytic`, per layer.
pub fn grad_check_against<S: Scalar>(
    net: &ScoreNet<S>,
    batch: &TrainBatch<S>,
    objective: &Objective,
    analytic: &[S],
    tolerance: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut probe = net.clone();
    let mut layers = Vec::new();
    for (name, off, len) in net.layer_groups() {
        let count = opts.max_per_layer.map_or(*len, |m| m.min(*len));
        let mut max_err: f64 = 0.0;
        for j in 0..count {
            let idx = off + j * len / count;
            let orig = probe.params[idx];
            probe.params[idx] = lit(orig.as_f64() + opts.h);
            let lp = probe.loss(batch, objective)?.as_f64();
            probe.params[idx] = lit(orig.as_f64() - opts.h);
            let lm = probe.loss(batch, objective)?.as_f64();
            probe.params[idx] = orig;
            let numeric = (lp - lm) / (2.0 * opts.h);
            max_err = max_err.max(relative_error(analytic[idx].as_f64(), numeric, REL_FLOOR));
        }
        layers.push(LayerCheck { layer: name.clone(), checked: count, max_rel_error: max_err, passed: max_err <= tolerance });
    }
    let max_rel_error = layers.iter().map(|l| l.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { tolerance, max_rel_error, passed: layers.iter().all(|l| l.passed), layers })
}

/// Checks the net's analytic gradients on a seeded random batch.
pub fn grad_check<S: Scalar>(net: &ScoreNet<S>, tolerance: f64) -> Result<GradCheckReport> {
    grad_check_with(net, tolerance, &GradCheckOptions::default())
}

pub fn grad_check_with<S: Scalar>(net: &ScoreNet<S>, tolerance: f64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let batch = random_batch::<S>(&net.config, opts.batch, opts.seed);
    let objective = Objective {
        target: match net.config.prediction {
            Prediction::Epsilon => Target::Eps,
            Prediction::Sample => Target::Sample,
        },
        ..Objective::default()
    };
    let (_, analytic) = net.loss_and_gradients(&batch, &objective)?;
    grad_check_against(net, &batch, &objective, &analytic, tolerance, opts)
}
