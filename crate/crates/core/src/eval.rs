//! Metrics on the synthetic domain, computed through a small supervised probe:
//! attribute and identity heads over a penultimate feature layer.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::container::{self, TensorEntry};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::{self, Tensor4};
use crate::optim::{Adam, AdamConfig};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::synthdata::Corpus;

pub const N_ATTRS: usize = 3;
const C1: usize = 8;
const C2: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub features: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Training inputs get Gaussian noise with a std drawn from `[0, noise_max]`.
    pub noise_max: f64,
    pub min_accuracy: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { features: 32, iterations: 1500, batch_size: 32, lr: 3e-3, seed: 0, noise_max: 0.05, min_accuracy: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Held-out accuracy per attribute head; `None` when the split has one class only.
    pub attr_accuracy: [Option<f64>; N_ATTRS],
    pub identity_accuracy: f64,
    pub n_validation: usize,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    off: usize,
    cout: usize,
    cin: usize,
    taps: usize,
}

impl Layer {
    fn wlen(&self) -> usize {
        self.cout * self.cin * self.taps
    }
    fn len(&self) -> usize {
        self.wlen() + self.cout
    }
    fn w<'a>(&self, p: &'a [f32]) -> &'a [f32] {
        &p[self.off..self.off + self.wlen()]
    }
    fn b<'a>(&self, p: &'a [f32]) -> &'a [f32] {
        &p[self.off + self.wlen()..self.off + self.len()]
    }
    fn grads<'a>(&self, g: &'a mut [f32]) -> (&'a mut [f32], &'a mut [f32]) {
        g[self.off..self.off + self.len()].split_at_mut(self.wlen())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeManifest {
    pub resolution: usize,
    pub n_subjects: usize,
    pub features: usize,
    pub report: Option<ProbeReport>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Probe {
    pub resolution: usize,
    pub n_subjects: usize,
    pub features: usize,
    pub params: Vec<f32>,
    pub report: Option<ProbeReport>,
    layers: [Layer; 5],
}

/// Features and head probabilities for a batch.
#[derive(Debug, Clone)]
pub struct ProbeOutput {
    pub features: Vec<Vec<f64>>,
    pub attr_prob: Vec<[f64; N_ATTRS]>,
    pub identity_prob: Vec<Vec<f64>>,
}

struct Cache {
    x: Tensor4<f32>,
    p1: Tensor4<f32>,
    d1: Tensor4<f32>,
    p2: Tensor4<f32>,
    flat: Vec<f32>,
    pf: Vec<f32>,
    feat: Vec<f32>,
    attr_logits: Vec<f32>,
    id_logits: Vec<f32>,
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&l| (l as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl Probe {
    pub fn new(resolution: usize, n_subjects: usize, features: usize, seed: u64) -> Result<Self> {
        if resolution == 0 || resolution % 4 != 0 {
            return Err(Error::Invalid(format!("probe resolution must be a multiple of 4, got {resolution}")));
        }
        if n_subjects == 0 || features == 0 {
            return Err(Error::Invalid("probe needs at least one subject and one feature".into()));
        }
        let flat = C2 * (resolution / 4) * (resolution / 4);
        let mut off = 0;
        let mut mk = |cout, cin, taps| {
            let l = Layer { off, cout, cin, taps };
            off += l.len();
            l
        };
        let layers = [mk(C1, 1, 9), mk(C2, C1, 9), mk(features, flat, 1), mk(N_ATTRS, features, 1), mk(n_subjects, features, 1)];
        let mut rng = SplitMix64::new(seed);
        let mut params = vec![0.0f32; off];
        for l in &layers {
            let a = (3.0 / (l.cin * l.taps) as f64).sqrt();
            for p in &mut params[l.off..l.off + l.wlen()] {
                *p = rng.uniform(-a, a) as f32;
            }
        }
        Ok(Self { resolution, n_subjects, features, params, report: None, layers })
    }

    fn forward_cached(&self, x: Tensor4<f32>) -> Cache {
        let p = &self.params;
        let [l1, l2, lf, la, li] = self.layers;
        let n = x.n;
        let p1 = nn::conv3x3(&x, l1.w(p), l1.b(p), l1.cout);
        let d1 = nn::avg_pool2(&silu4(&p1));
        let p2 = nn::conv3x3(&d1, l2.w(p), l2.b(p), l2.cout);
        let flat = nn::avg_pool2(&silu4(&p2)).data;
        let pf = nn::dense(&flat, n, lf.cin, lf.w(p), lf.b(p), lf.cout);
        let feat = nn::silu_vec(&pf);
        let attr_logits = nn::dense(&feat, n, la.cin, la.w(p), la.b(p), la.cout);
        let id_logits = nn::dense(&feat, n, li.cin, li.w(p), li.b(p), li.cout);
        Cache { x, p1, d1, p2, flat, pf, feat, attr_logits, id_logits }
    }

    fn to_batch<S: Scalar>(&self, images: &[Grid<S>]) -> Result<Tensor4<f32>> {
        let r = self.resolution;
        let mut x = Tensor4::zeros(images.len(), 1, r, r);
        for (i, g) in images.iter().enumerate() {
            if g.h != r || g.w != r {
                return Err(Error::Shape { context: "probe input", expected: vec![r, r], got: vec![g.h, g.w] });
            }
            for (d, v) in x.sample_mut(i).iter_mut().zip(&g.data) {
                *d = v.as_f64() as f32;
            }
        }
        Ok(x)
    }

    pub fn evaluate<S: Scalar>(&self, images: &[Grid<S>]) -> Result<ProbeOutput> {
        let mut out = ProbeOutput { features: vec![], attr_prob: vec![], identity_prob: vec![] };
        for chunk in images.chunks(64) {
            let c = self.forward_cached(self.to_batch(chunk)?);
            let f = self.features;
            for i in 0..chunk.len() {
                out.features.push(c.feat[i * f..(i + 1) * f].iter().map(|&v| v as f64).collect());
                let mut a = [0.0; N_ATTRS];
                for (k, v) in a.iter_mut().enumerate() {
                    *v = nn::sigmoid(c.attr_logits[i * N_ATTRS + k] as f64);
                }
                out.attr_prob.push(a);
                out.identity_prob.push(softmax(&c.id_logits[i * self.n_subjects..(i + 1) * self.n_subjects]));
            }
        }
        Ok(out)
    }

    pub fn features<S: Scalar>(&self, images: &[Grid<S>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.evaluate(images)?.features)
    }

    /// Summed BCE (attributes) + CE (identity) per sample, averaged, and its gradient.
    fn loss_and_grad(&self, x: Tensor4<f32>, attrs: &[[bool; N_ATTRS]], ids: &[usize]) -> (f64, Vec<f32>) {
        let p = &self.params;
        let [l1, l2, lf, la, li] = self.layers;
        let n = x.n;
        let c = self.forward_cached(x);
        let inv_n = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut d_attr = vec![0.0f32; n * N_ATTRS];
        let mut d_id = vec![0.0f32; n * self.n_subjects];
        for i in 0..n {
            for k in 0..N_ATTRS {
                let z = c.attr_logits[i * N_ATTRS + k] as f64;
                let y = attrs[i][k] as u8 as f64;
                loss += inv_n * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p());
                d_attr[i * N_ATTRS + k] = (inv_n * (nn::sigmoid(z) - y)) as f32;
            }
            let pr = softmax(&c.id_logits[i * self.n_subjects..(i + 1) * self.n_subjects]);
            loss -= inv_n * pr[ids[i]].max(1e-300).ln();
            for (s, &q) in pr.iter().enumerate() {
                d_id[i * self.n_subjects + s] = (inv_n * (q - (s == ids[i]) as u8 as f64)) as f32;
            }
        }
        let mut g = vec![0.0f32; p.len()];
        let mut dfeat = {
            let (dw, db) = la.grads(&mut g);
            nn::dense_backward(&c.feat, n, la.cin, la.w(p), &d_attr, la.cout, dw, db)
        };
        {
            let (dw, db) = li.grads(&mut g);
            let d2 = nn::dense_backward(&c.feat, n, li.cin, li.w(p), &d_id, li.cout, dw, db);
            dfeat.iter_mut().zip(d2).for_each(|(a, b)| *a += b);
        }
        nn::silu_backward(&c.pf, &mut dfeat);
        let dflat = {
            let (dw, db) = lf.grads(&mut g);
            nn::dense_backward(&c.flat, n, lf.cin, lf.w(p), &dfeat, lf.cout, dw, db)
        };
        let r4 = self.resolution / 4;
        let mut dh2 = nn::avg_pool2_backward(&Tensor4::from_vec(n, C2, r4, r4, dflat));
        nn::silu_backward(&c.p2.data, &mut dh2.data);
        let dd1 = {
            let (dw, db) = l2.grads(&mut g);
            nn::conv3x3_backward(&c.d1, l2.w(p), &dh2, dw, db, true).expect("dx requested")
        };
        let mut dh1 = nn::avg_pool2_backward(&dd1);
        nn::silu_backward(&c.p1.data, &mut dh1.data);
        let (dw, db) = l1.grads(&mut g);
        nn::conv3x3_backward(&c.x, l1.w(p), &dh1, dw, db, false);
        (loss, g)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        container::ensure_dir(dir)?;
        container::write_f32(&dir.join("probe.f32"), &self.params)?;
        container::write_json(
            &dir.join("probe.json"),
            &ProbeManifest {
                resolution: self.resolution,
                n_subjects: self.n_subjects,
                features: self.features,
                report: self.report.clone(),
                tensors: vec![TensorEntry::f32("probe", vec![self.params.len()])],
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: ProbeManifest = container::read_json(&dir.join("probe.json"))?;
        let mut p = Self::new(m.resolution, m.n_subjects, m.features, 0)?;
        p.params = container::read_f32(&dir.join("probe.f32"), p.params.len())?;
        p.report = m.report;
        Ok(p)
    }
}

fn silu4(x: &Tensor4<f32>) -> Tensor4<f32> {
    Tensor4 { n: x.n, c: x.c, h: x.h, w: x.w, data: nn::silu_vec(&x.data) }
}

/// Trains the probe on `train` and gates it on held-out `val` accuracy.
pub fn train_probe(train: &Corpus, val: &Corpus, cfg: &ProbeConfig) -> Result<Probe> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n_subjects = train.manifest.subjects.len();
    let mut probe = Probe::new(train.resolution(), n_subjects, cfg.features, cfg.seed)?;
    let mut rng = SplitMix64::new(cfg.seed ^ 0x5052_4F42);
    let mut opt = Adam::new(probe.params.len(), AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let r = probe.resolution;
    let px = r * r;
    for it in 0..cfg.iterations {
        let mut x = Tensor4::zeros(cfg.batch_size, 1, r, r);
        let mut attrs = Vec::with_capacity(cfg.batch_size);
        let mut ids = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let k = rng.index(train.len());
            let s = &train.samples[k];
            let sigma = rng.uniform(0.0, cfg.noise_max);
            for (d, &v) in x.data[b * px..(b + 1) * px].iter_mut().zip(&s.image.data) {
                *d = v + (sigma * rng.normal()) as f32;
            }
            attrs.push(s.attrs.as_array());
            ids.push(train.subject_index[k]);
        }
        let (loss, g) = probe.loss_and_grad(x, &attrs, &ids);
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration: it, detail: format!("probe loss = {loss}") });
        }
        opt.step(&mut probe.params, &g, None);
    }
    let report = validate_probe(&probe, val)?;
    let mut failures = vec![];
    for (k, acc) in report.attr_accuracy.iter().enumerate() {
        if let Some(a) = acc {
            if *a < cfg.min_accuracy {
                failures.push((crate::synthdata::Attributes::NAMES[k], *a));
            }
        }
    }
    if report.identity_accuracy < cfg.min_accuracy {
        failures.push(("identity", report.identity_accuracy));
    }
    if let Some(&(head, accuracy)) = failures.first() {
        return Err(Error::ProbeAccuracy { head: head.to_string(), accuracy, floor: cfg.min_accuracy });
    }
    probe.report = Some(report);
    Ok(probe)
}

pub fn validate_probe(probe: &Probe, val: &Corpus) -> Result<ProbeReport> {
    let images: Vec<Grid<f32>> = val.samples.iter().map(|s| s.image.clone()).collect();
    let out = probe.evaluate(&images)?;
    let n = val.len() as f64;
    let mut attr_accuracy = [None; N_ATTRS];
    for (k, acc) in attr_accuracy.iter_mut().enumerate() {
        let positives = val.samples.iter().filter(|s| s.attrs.as_array()[k]).count();
        if positives == 0 || positives == val.len() {
            continue;
        }
        let correct = val.samples.iter().zip(&out.attr_prob).filter(|(s, p)| (p[k] > 0.5) == s.attrs.as_array()[k]).count();
        *acc = Some(correct as f64 / n);
    }
    let correct_id = out
        .identity_prob
        .iter()
        .zip(&val.subject_index)
        .filter(|(p, &s)| p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i) == Some(s))
        .count();
    Ok(ProbeReport { attr_accuracy, identity_accuracy: correct_id as f64 / n, n_validation: val.len() })
}

/// Mean predicted probability of attribute `attr` (index into `Attributes::NAMES`).
pub fn edit_alignment<S: Scalar>(probe: &Probe, renders: &[Grid<S>], attr: usize) -> Result<f64> {
    if renders.is_empty() {
        return Err(Error::Invalid("edit_alignment needs at least one render".into()));
    }
    let out = probe.evaluate(renders)?;
    Ok(out.attr_prob.iter().map(|p| p[attr]).sum::<f64>() / renders.len() as f64)
}

/// Mean identity-head probability of `subject`.
pub fn identity_score<S: Scalar>(probe: &Probe, renders: &[Grid<S>], subject: usize) -> Result<f64> {
    if renders.is_empty() {
        return Err(Error::Invalid("identity_score needs at least one render".into()));
    }
    if subject >= probe.n_subjects {
        return Err(Error::Range { what: "subject", value: subject as f64, lo: 0.0, hi: (probe.n_subjects - 1) as f64 });
    }
    let out = probe.evaluate(renders)?;
    Ok(out.identity_prob.iter().map(|p| p[subject]).sum::<f64>() / renders.len() as f64)
}

/// Sample mean and (n-1)-normalized covariance.
pub fn gaussian_fit(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Invalid(format!("need at least 2 feature vectors, got {n}")));
    }
    let f = features[0].len();
    let mut mu = DVector::zeros(f);
    for v in features {
        if v.len() != f {
            return Err(Error::Shape { context: "feature vector", expected: vec![f], got: vec![v.len()] });
        }
        mu += DVector::from_column_slice(v);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(f, f);
    for v in features {
        let d = DVector::from_column_slice(v) - &mu;
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, 1e-12, 10_000)?;
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    Some(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + tr(A + B - 2 (A^1/2 B A^1/2)^1/2)`, clamped at 0.
pub fn frechet_gaussian(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    let f = mu_a.len();
    let mut shrink = 0.0;
    for _ in 0..3 {
        let eye = DMatrix::<f64>::identity(f, f) * shrink;
        let (a, b) = (cov_a + &eye, cov_b + &eye);
        let Some(sa) = psd_sqrt(&a) else {
            shrink = if shrink == 0.0 { 1e-6 } else { shrink * 100.0 };
            continue;
        };
        let Some(cross) = psd_sqrt(&(&sa * &b * &sa)) else {
            shrink = if shrink == 0.0 { 1e-6 } else { shrink * 100.0 };
            continue;
        };
        let d = (mu_a - mu_b).norm_squared() + a.trace() + b.trace() - 2.0 * cross.trace();
        return Ok(d.max(0.0));
    }
    Err(Error::Sqrtm("eigendecomposition failed after shrinkage".into()))
}

pub fn frechet_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = gaussian_fit(a)?;
    let (mb, cb) = gaussian_fit(b)?;
    frechet_gaussian(&ma, &ca, &mb, &cb)
}

/// Fréchet distance between Gaussian fits of the probe's penultimate features.
pub fn frechet_distance<S: Scalar>(probe: &Probe, set_a: &[Grid<S>], set_b: &[Grid<S>]) -> Result<f64> {
    frechet_from_features(&probe.features(set_a)?, &probe.features(set_b)?)
}

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.1;

/// IoU of `render > threshold` against `structure_ref > 0`; 1 when both are empty.
pub fn structure_iou<S: Scalar>(render: &Grid<S>, structure_ref: &Grid<S>, threshold: f64) -> Result<f64> {
    render.check_same_shape(structure_ref, "structure_iou")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (r, s) in render.data.iter().zip(&structure_ref.data) {
        let a = r.as_f64() > threshold;
        let b = s.as_f64() > 0.0;
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// IoU of two masks given as `> 0` grids.
pub fn mask_iou<S: Scalar>(a: &Grid<S>, b: &Grid<S>) -> Result<f64> {
    structure_iou(a, b, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_hand_cases() {
        let a = Grid::from_vec(3, 1, vec![1.0f64, 1.0, 0.0]).unwrap();
        let b = Grid::from_vec(3, 1, vec![0.0f64, 1.0, 1.0]).unwrap();
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let c = Grid::from_vec(3, 1, vec![0.0f64, 0.0, 1.0]).unwrap();
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
        let z = Grid::<f64>::zeros(3, 1);
        assert_eq!(mask_iou(&z, &z).unwrap(), 1.0);
        assert!(mask_iou(&z, &Grid::zeros(2, 2)).is_err());
    }

    #[test]
    fn frechet_identity_covariances_is_mean_gap() {
        let f = 5;
        let eye = DMatrix::<f64>::identity(f, f);
        let ma = DVector::from_vec(vec![0.0, 1.0, 2.0, 0.5, -1.0]);
        let m = DVector::from_vec(vec![0.3, -0.2, 1.0, 0.0, 2.0]);
        let mb = &ma + &m;
        let d = frechet_gaussian(&ma, &eye, &mb, &eye).unwrap();
        assert!((d - m.norm_squared()).abs() < 1e-10);
    }

    #[test]
    fn frechet_scalar_case_matches_closed_form() {
        // 1-D: (m1-m2)^2 + (s1-s2)^2
        let d = frechet_gaussian(
            &DVector::from_vec(vec![1.0]),
            &DMatrix::from_vec(1, 1, vec![4.0]),
            &DVector::from_vec(vec![-1.0]),
            &DMatrix::from_vec(1, 1, vec![9.0]),
        )
        .unwrap();
        assert!((d - (4.0 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn frechet_same_set_zero_and_symmetric() {
        let mut r = SplitMix64::new(3);
        let a: Vec<Vec<f64>> = (0..12).map(|_| r.normal_vec(8)).collect();
        let b: Vec<Vec<f64>> = (0..20).map(|_| r.normal_vec::<f64>(8).iter().map(|v| 2.0 * v + 0.5).collect()).collect();
        assert!(frechet_from_features(&a, &a).unwrap() < 1e-6);
        let (ab, ba) = (frechet_from_features(&a, &b).unwrap(), frechet_from_features(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-8 && ab > 0.0);
    }
}
