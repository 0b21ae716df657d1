//! Classifier-free guidance and the blended personalized editing score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::Tensor4;
use crate::scalar::{lit, Scalar};
use crate::scorenet::{Condition, EpsModel, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Overall guidance weight.
    pub w: f64,
    /// Personalized-model weight while blending is active.
    pub v0: f64,
    /// Blending happens only for `t > k`.
    pub k: f64,
    pub cond_scale_base: f64,
    pub cond_scale_personalized: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { w: 20.0, v0: 0.3, k: 750.0, cond_scale_base: 0.5, cond_scale_personalized: 1.0 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        let check = |what, v: f64, lo: f64, hi: f64, hi_open: bool| {
            if v < lo || v > hi || (hi_open && v >= hi) || v.is_nan() {
                Err(Error::Range { what, value: v, lo, hi })
            } else {
                Ok(())
            }
        };
        check("guidance.w", self.w, 1.0, f64::INFINITY, false)?;
        check("guidance.v0", self.v0, 0.0, 1.0, true)?;
        check("guidance.k", self.k, 0.0, steps as f64, false)?;
        check("guidance.cond_scale_base", self.cond_scale_base, 0.0, 1.0, false)?;
        check("guidance.cond_scale_personalized", self.cond_scale_personalized, 0.0, 1.0, false)
    }
}

fn to_tensor<S: Scalar>(z: &Grid<S>) -> Tensor4<S> {
    Tensor4::from_vec(1, 1, z.h, z.w, z.data.clone())
}

/// Conditional and unconditional predictions of one net in a single batch.
fn cond_uncond<S: Scalar, M: EpsModel<S> + ?Sized>(
    net: &M,
    z_t: &Grid<S>,
    t: usize,
    tokens: &[TokenId],
    structure: Option<&Grid<S>>,
    cond_scale: S,
) -> Result<(Vec<S>, Vec<S>)> {
    let mut z = Tensor4::zeros(2, 1, z_t.h, z_t.w);
    z.sample_mut(0).copy_from_slice(&z_t.data);
    z.sample_mut(1).copy_from_slice(&z_t.data);
    let conds = [Condition::new(tokens, structure), Condition::new(&[], structure)];
    let out = net.predict_eps_batch(&z, t, &conds, cond_scale)?;
    Ok((out.sample(0).to_vec(), out.sample(1).to_vec()))
}

/// `w * net(z, text, n) + (1 - w) * net(z, null, n)`.
#[allow(clippy::too_many_arguments)]
pub fn cfg_score<S: Scalar, M: EpsModel<S> + ?Sized>(
    net: &M,
    z_t: &Grid<S>,
    t: usize,
    tokens: &[TokenId],
    structure: Option<&Grid<S>>,
    cond_scale: S,
    w: f64,
) -> Result<Grid<S>> {
    let (a, b) = cond_uncond(net, z_t, t, tokens, structure, cond_scale)?;
    let (w, w1) = (lit::<S>(w), lit::<S>(1.0 - w));
    Ok(Grid { h: z_t.h, w: z_t.w, data: a.iter().zip(&b).map(|(&a, &b)| w * a + w1 * b).collect() })
}

/// The blending weight in effect at `t`: `v_active` above the threshold, else 0.
pub fn effective_v(t: usize, k: f64, v_active: f64) -> f64 {
    if t as f64 > k {
        v_active
    } else {
        0.0
    }
}

/// `w((1-v) base(z,c_edit,n) + v pers(z,c_id,n)) + (1-w) base(z,n)` with
/// `v = v_active` only when `t > k`. Base branches use `cond_scale_base`,
/// the personalized branch `cond_scale_personalized`.
#[allow(clippy::too_many_arguments)]
pub fn blended_score<S: Scalar, B: EpsModel<S> + ?Sized, P: EpsModel<S> + ?Sized>(
    base: &B,
    pers: &P,
    z_t: &Grid<S>,
    t: usize,
    c_edit: &[TokenId],
    c_id: &[TokenId],
    structure: Option<&Grid<S>>,
    gcfg: &GuidanceConfig,
    v_active: f64,
) -> Result<Grid<S>> {
    let structure = structure.ok_or(Error::MissingStructure)?;
    let v = effective_v(t, gcfg.k, v_active);
    let sb = lit::<S>(gcfg.cond_scale_base);
    if v == 0.0 {
        return cfg_score(base, z_t, t, c_edit, Some(structure), sb, gcfg.w);
    }
    let (a, b) = cond_uncond(base, z_t, t, c_edit, Some(structure), sb)?;
    let d = pers.predict_eps_batch(
        &to_tensor(z_t),
        t,
        &[Condition::new(c_id, Some(structure))],
        lit(gcfg.cond_scale_personalized),
    )?;
    let (w, w1) = (lit::<S>(gcfg.w), lit::<S>(1.0 - gcfg.w));
    let (v, v1) = (lit::<S>(v), lit::<S>(1.0 - v));
    let data = a.iter().zip(&b).zip(&d.data).map(|((&a, &b), &d)| w * (v1 * a + v * d) + w1 * b).collect();
    Ok(Grid { h: z_t.h, w: z_t.w, data })
}
