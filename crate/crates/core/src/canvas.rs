//! Differentiable image parameterization: a canonical residual texture warped
//! onto each pose through texture coordinates and added to the base render.

use serde::{Deserialize, Serialize};

use crate::container::{self, TensorEntry};
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::{lit, Scalar};
use crate::synthdata::{bilinear_taps, render_figure, warp_field, Attributes, SubjectSpec, TEXTURE_RES};
use std::path::Path;

/// Width of the soft tails outside `[0, 1]`.
pub const CLAMP_MARGIN: f64 = 0.05;

/// Identity on `[0,1]`, `tanh` tails of width [`CLAMP_MARGIN`] outside, so the
/// output lies in `(-m, 1+m)` and the derivative is continuous and nonzero.
pub fn smooth_clamp<S: Scalar>(x: S) -> (S, S) {
    let m = lit::<S>(CLAMP_MARGIN);
    let one = S::one();
    if x > one {
        let th = ((x - one) / m).tanh();
        (one + m * th, one - th * th)
    } else if x < S::zero() {
        let th = (x / m).tanh();
        (m * th, one - th * th)
    } else {
        (x, one)
    }
}

pub type Taps = [(usize, f64); 4];

/// Per-pose warp: base render plus bilinear taps for each editable pixel.
#[derive(Debug, Clone)]
pub struct PoseView<S> {
    pub pose: f64,
    pub base: Grid<S>,
    pub structure: Grid<S>,
    pub taps: Vec<Option<Taps>>,
}

impl<S> PoseView<S> {
    pub fn editable(&self) -> Mask {
        Mask { h: self.base.h, w: self.base.w, data: self.taps.iter().map(Option::is_some).collect() }
    }
}

/// A render and the clamp derivative at every pixel.
#[derive(Debug, Clone)]
pub struct Rendered<S> {
    pub image: Grid<S>,
    pub clamp_grad: Vec<S>,
}

#[derive(Debug, Clone)]
pub struct Canvas<S> {
    pub texture: Grid<S>,
    pub subject: SubjectSpec,
    pub base_attrs: Attributes,
    pub mask_dilation: usize,
    pub resolution: usize,
    reachable: Vec<bool>,
    opt: Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanvasManifest {
    pub subject: SubjectSpec,
    pub base_attrs: Attributes,
    pub mask_dilation: usize,
    pub resolution: usize,
    pub texture_resolution: usize,
    pub tensors: Vec<TensorEntry>,
}

impl<S: Scalar> Canvas<S> {
    pub fn new(subject: SubjectSpec, base_attrs: Attributes, resolution: usize, mask_dilation: usize) -> Self {
        let n = TEXTURE_RES * TEXTURE_RES;
        Self {
            texture: Grid::zeros(TEXTURE_RES, TEXTURE_RES),
            subject,
            base_attrs,
            mask_dilation,
            resolution,
            reachable: vec![false; n],
            opt: Adam::new(n, AdamConfig::default()),
        }
    }

    /// Base render and warp for `pose`; also marks the texels it reaches.
    pub fn view(&mut self, pose: f64) -> Result<PoseView<S>> {
        let v = self.view_of(pose)?;
        for taps in v.taps.iter().flatten() {
            for &(i, w) in taps {
                if w > 0.0 {
                    self.reachable[i] = true;
                }
            }
        }
        Ok(v)
    }

    /// Like [`Canvas::view`] without touching the reachable set.
    pub fn view_of(&self, pose: f64) -> Result<PoseView<S>> {
        let fig = render_figure(&self.subject, pose, self.base_attrs, self.resolution)?;
        let uv = warp_field(&self.subject, pose, self.mask_dilation, self.resolution)?;
        let taps = uv.data.iter().map(|c| c.map(|c| bilinear_taps(c, TEXTURE_RES))).collect();
        Ok(PoseView { pose, base: fig.image.cast(), structure: fig.structure.cast(), taps })
    }

    pub fn reachable(&self) -> &[bool] {
        &self.reachable
    }

    /// Residual value seen by each editable pixel, before adding the base.
    pub fn residual(&self, view: &PoseView<S>) -> Vec<Option<S>> {
        view.taps
            .iter()
            .map(|t| t.map(|taps| taps.iter().map(|&(i, w)| self.texture.data[i] * lit::<S>(w)).sum()))
            .collect()
    }

    pub fn render(&self, view: &PoseView<S>) -> Rendered<S> {
        let mut image = view.base.clone();
        let mut clamp_grad = vec![S::zero(); image.len()];
        for (p, r) in self.residual(view).into_iter().enumerate() {
            if let Some(r) = r {
                let (v, d) = smooth_clamp(view.base.data[p] + r);
                image.data[p] = v;
                clamp_grad[p] = d;
            }
        }
        Rendered { image, clamp_grad }
    }

    /// Renders `pose` directly.
    pub fn render_pose(&self, pose: f64) -> Result<Grid<S>> {
        Ok(self.render(&self.view_of(pose)?).image)
    }

    /// Chain rule through the smooth clamp and bilinear weights.
    pub fn backprop_to_texture(&self, pixel_grad: &Grid<S>, view: &PoseView<S>, rendered: &Rendered<S>) -> Result<Grid<S>> {
        pixel_grad.check_same_shape(&view.base, "pixel gradient")?;
        if rendered.clamp_grad.len() != view.taps.len() || view.taps.len() != pixel_grad.len() {
            return Err(Error::MissingWarp(pixel_grad.len()));
        }
        let mut g = Grid::zeros(self.texture.h, self.texture.w);
        for (p, taps) in view.taps.iter().enumerate() {
            let Some(taps) = taps else { continue };
            let gp = pixel_grad.data[p] * rendered.clamp_grad[p];
            for &(i, w) in taps {
                g.data[i] += gp * lit::<S>(w);
            }
        }
        Ok(g)
    }

    /// Adam update restricted to reachable texels.
    pub fn step(&mut self, grad: &Grid<S>, lr: f64) -> Result<()> {
        grad.check_same_shape(&self.texture, "texture gradient")?;
        if let Some(i) = grad.data.iter().position(|g| !g.as_f64().is_finite()) {
            return Err(Error::NonFinite(format!(
                "texture gradient at texel ({}, {}) is {}",
                i / grad.w,
                i % grad.w,
                grad.data[i]
            )));
        }
        self.opt.cfg.lr = lr;
        self.opt.step(&mut self.texture.data, &grad.data, Some(&self.reachable));
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        container::ensure_dir(dir)?;
        let flat: Vec<f32> = self.texture.data.iter().map(|v| v.as_f64() as f32).collect();
        container::write_f32(&dir.join("texture.f32"), &flat)?;
        let manifest = CanvasManifest {
            subject: self.subject,
            base_attrs: self.base_attrs,
            mask_dilation: self.mask_dilation,
            resolution: self.resolution,
            texture_resolution: TEXTURE_RES,
            tensors: vec![TensorEntry::f32("texture", vec![TEXTURE_RES, TEXTURE_RES])],
        };
        container::write_json(&dir.join("canvas.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: CanvasManifest = container::read_json(&dir.join("canvas.json"))?;
        if m.texture_resolution != TEXTURE_RES {
            return Err(Error::Container {
                path: dir.to_path_buf(),
                detail: format!("texture resolution {} != {TEXTURE_RES}", m.texture_resolution),
            });
        }
        let mut c = Self::new(m.subject, m.base_attrs, m.resolution, m.mask_dilation);
        let flat = container::read_f32(&dir.join("texture.f32"), TEXTURE_RES * TEXTURE_RES)?;
        c.texture.data = flat.into_iter().map(|v| lit(v as f64)).collect();
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::make_subject;

    fn canvas() -> Canvas<f64> {
        Canvas::new(make_subject(42), Attributes::NONE, 32, 2)
    }

    #[test]
    fn zero_texture_reproduces_base() {
        let c = canvas();
        for pose in [-1.0, 0.0, 0.4] {
            let fig = render_figure(&c.subject, pose, Attributes::NONE, 32).unwrap();
            let img = c.render_pose(pose).unwrap();
            assert_eq!(img, fig.image.cast::<f64>());
        }
    }

    #[test]
    fn constant_texture_shifts_interior_pixels() {
        let mut c = canvas();
        c.texture = Grid::filled(TEXTURE_RES, TEXTURE_RES, 0.1);
        let v = c.view_of(0.3).unwrap();
        let img = c.render(&v).image;
        let mut shifted = 0;
        for p in 0..img.len() {
            let b = v.base.data[p];
            if v.taps[p].is_some() {
                if b + 0.1 <= 1.0 {
                    assert!((img.data[p] - b - 0.1).abs() < 1e-12);
                    shifted += 1;
                }
            } else {
                assert_eq!(img.data[p], b);
            }
        }
        assert!(shifted > 100);
    }

    #[test]
    fn texel_edit_is_consistent_across_poses() {
        let mut c = canvas();
        let mut r = crate::rng::SplitMix64::new(4);
        c.texture.data = r.normal_vec(TEXTURE_RES * TEXTURE_RES);
        let (a, b) = (c.view_of(-0.5).unwrap(), c.view_of(0.6).unwrap());
        let fa = render_figure(&c.subject, -0.5, Attributes::NONE, 32).unwrap();
        let fb = render_figure(&c.subject, 0.6, Attributes::NONE, 32).unwrap();
        let (ra, rb) = (c.residual(&a), c.residual(&b));
        let mut matched = 0;
        for pa in 0..fa.uv.data.len() {
            let Some(ua) = fa.uv.data[pa] else { continue };
            for pb in 0..fb.uv.data.len() {
                if fb.uv.data[pb] == Some(ua) {
                    assert!((ra[pa].unwrap() - rb[pb].unwrap()).abs() < 1e-6);
                    matched += 1;
                }
            }
        }
        assert!(matched > 10, "{matched}");
    }

    #[test]
    fn outside_mask_never_changes() {
        let mut c = canvas();
        c.texture = Grid::filled(TEXTURE_RES, TEXTURE_RES, 5.0);
        let v = c.view_of(0.1).unwrap();
        let img = c.render(&v).image;
        let band = v.editable();
        for p in 0..img.len() {
            if !band.data[p] {
                assert_eq!(img.data[p], v.base.data[p]);
            } else {
                assert!(img.data[p] <= 1.0 + CLAMP_MARGIN);
            }
        }
    }

    #[test]
    fn hand_chain_rule_two_pixels_one_texel() {
        let c = canvas();
        let view = PoseView {
            pose: 0.0,
            base: Grid::filled(1, 2, 0.5),
            structure: Grid::zeros(1, 2),
            taps: vec![Some([(7, 0.25), (8, 0.75), (9, 0.0), (10, 0.0)]), Some([(7, 0.75), (8, 0.25), (9, 0.0), (10, 0.0)])],
        };
        let r = c.render(&view);
        let g = c.backprop_to_texture(&Grid::from_vec(1, 2, vec![0.5, -0.5]).unwrap(), &view, &r).unwrap();
        assert!((g.data[7] - (-0.25)).abs() < 1e-15);
        assert!((g.data[8] - 0.25).abs() < 1e-15);
        assert!(g.data.iter().enumerate().all(|(i, &v)| i == 7 || i == 8 || v == 0.0));
    }

    #[test]
    fn zero_pixel_grad_gives_zero_texture_grad() {
        let c = canvas();
        let v = c.view_of(0.0).unwrap();
        let r = c.render(&v);
        let g = c.backprop_to_texture(&Grid::zeros(32, 32), &v, &r).unwrap();
        assert!(g.data.iter().all(|&x| x == 0.0));
        assert!(c.backprop_to_texture(&Grid::zeros(16, 16), &v, &r).is_err());
    }

    #[test]
    fn texture_gradient_matches_finite_differences() {
        let mut c = canvas();
        let mut rng = crate::rng::SplitMix64::new(9);
        // push some pixels into the soft tails
        c.texture.data = rng.normal_vec::<f64>(TEXTURE_RES * TEXTURE_RES).iter().map(|v| 0.6 * v).collect();
        let v = c.view_of(0.2).unwrap();
        let weights: Vec<f64> = rng.normal_vec(32 * 32);
        let objective = |c: &Canvas<f64>| -> f64 { c.render(&v).image.data.iter().zip(&weights).map(|(a, b)| a * b).sum() };
        let r = c.render(&v);
        let g = c.backprop_to_texture(&Grid::from_vec(32, 32, weights.clone()).unwrap(), &v, &r).unwrap();
        let h = 1e-4;
        let mut checked = 0;
        for i in (0..g.len()).step_by(7) {
            if g.data[i] == 0.0 {
                continue;
            }
            let o = c.texture.data[i];
            c.texture.data[i] = o + h;
            let lp = objective(&c);
            c.texture.data[i] = o - h;
            let lm = objective(&c);
            c.texture.data[i] = o;
            let num = (lp - lm) / (2.0 * h);
            let rel = (num - g.data[i]).abs() / num.abs().max(g.data[i].abs()).max(1e-6);
            assert!(rel < 1e-3, "texel {i}: {num} vs {}", g.data[i]);
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn step_is_local_and_monotone() {
        let mut c = canvas();
        c.view(0.0).unwrap();
        let idx = c.reachable().iter().position(|&r| r).unwrap();
        let mut g = Grid::zeros(TEXTURE_RES, TEXTURE_RES);
        g.data[idx] = 2.0;
        let mut prev = 0.0;
        for _ in 0..5 {
            c.step(&g, 1e-2).unwrap();
            assert!(c.texture.data[idx] < prev);
            prev = c.texture.data[idx];
        }
        assert!(c.texture.data.iter().enumerate().all(|(i, &v)| i == idx || v == 0.0));
        c.step(&Grid::zeros(TEXTURE_RES, TEXTURE_RES), 1e-2).unwrap();
        let unreachable = c.reachable().iter().position(|&r| !r).unwrap();
        let mut g = Grid::zeros(TEXTURE_RES, TEXTURE_RES);
        g.data[unreachable] = 1.0;
        c.step(&g, 1e-2).unwrap();
        assert_eq!(c.texture.data[unreachable], 0.0);
        g.data[0] = f64::NAN;
        assert!(matches!(c.step(&g, 1e-2), Err(Error::NonFinite(_))));
    }

    #[test]
    fn smooth_clamp_is_c1() {
        for x in [-0.3f64, -1e-9, 0.0, 0.5, 1.0, 1.0 + 1e-9, 1.7] {
            let (_, d) = smooth_clamp(x);
            let h = 1e-7;
            let num = (smooth_clamp(x + h).0 - smooth_clamp(x - h).0) / (2.0 * h);
            assert!((num - d).abs() < 1e-5, "{x}");
        }
        assert_eq!(smooth_clamp(0.25f64).0, 0.25);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Canvas::<f32>::new(make_subject(1), Attributes::NONE, 32, 2);
        c.texture.data[100] = 0.25;
        c.save(dir.path()).unwrap();
        let back = Canvas::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.texture, c.texture);
        assert_eq!(back.subject, c.subject);
    }
}
