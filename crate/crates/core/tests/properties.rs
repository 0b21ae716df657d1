use figedit_core::anneal::{sample_t, v_at, window_at, AnnealConfig};
use figedit_core::canvas::{smooth_clamp, Canvas, CLAMP_MARGIN};
use figedit_core::diffusion::{add_noise, make_schedule};
use figedit_core::distill::sds_gradient;
use figedit_core::eval::{frechet_from_features, structure_iou};
use figedit_core::grid::Grid;
use figedit_core::guidance::{blended_score, GuidanceConfig};
use figedit_core::rng::SplitMix64;
use figedit_core::scorenet::{Condition, EpsModel};
use figedit_core::synthdata::{make_subject, render_figure, Attributes, TEXTURE_RES};
use figedit_core::Result;
use proptest::prelude::*;

/// Constant prediction per prompt kind: null, identity (`sks`) or other text.
struct Const {
    null: f64,
    text: f64,
}

impl EpsModel<f64> for Const {
    fn resolution(&self) -> usize {
        4
    }

    fn predict_eps(&self, z: &Grid<f64>, _: usize, cond: &Condition<'_, f64>, _: f64) -> Result<Grid<f64>> {
        Ok(Grid::filled(z.h, z.w, if cond.tokens.is_empty() { self.null } else { self.text }))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn anneal_window_is_ordered_and_shrinking(n in 1usize..5000, frac in 0.0f64..1.0) {
        let cfg = AnnealConfig { iterations: n, ..AnnealConfig::default() };
        let tau = (frac * n as f64) as usize;
        let s = window_at(tau, &cfg).unwrap();
        prop_assert!(cfg.t_min <= s.t2 && s.t2 <= s.k && s.k <= s.t1 && s.t1 <= cfg.t_max);
        prop_assert!(s.t1 >= cfg.cease_t1);
        if tau < n {
            prop_assert!(window_at(tau + 1, &cfg).unwrap().t1 <= s.t1);
        }
        let v = v_at(tau, &cfg).unwrap();
        prop_assert!(cfg.v_end <= v && v <= cfg.v0);
        let mut rng = SplitMix64::new(tau as u64);
        let t = sample_t(&s, &cfg, &mut rng).unwrap() as f64;
        prop_assert!(s.t2.ceil() <= t && t <= s.t1.floor());
    }

    #[test]
    fn blended_score_is_affine_in_the_branches(a in -3.0f64..3.0, b in -3.0f64..3.0, d in -3.0f64..3.0,
                                                w in 1.0f64..30.0, v in 0.0f64..0.99, s in -2.0f64..2.0) {
        let z = Grid::zeros(4, 4);
        let st = Grid::zeros(4, 4);
        let g = GuidanceConfig { w, k: 100.0, ..GuidanceConfig::default() };
        let psi = |scale: f64| {
            let base = Const { null: b * scale, text: a * scale };
            let pers = Const { null: 0.0, text: d * scale };
            blended_score(&base, &pers, &z, 500, &[1, 3], &[1, 2], Some(&st), &g, v).unwrap().data[0]
        };
        let want = w * ((1.0 - v) * a + v * d) + (1.0 - w) * b;
        prop_assert!((psi(1.0) - want).abs() < 1e-9 * (1.0 + want.abs()));
        prop_assert!((psi(s) - s * psi(1.0)).abs() < 1e-9 * (1.0 + psi(1.0).abs()));
        // all branches equal: guidance is a no-op
        let same = Const { null: a, text: a };
        let r = blended_score(&same, &same, &z, 500, &[1, 3], &[1, 2], Some(&st), &g, v).unwrap().data[0];
        prop_assert!((r - a).abs() < 1e-9 * (1.0 + w));
    }

    #[test]
    fn smooth_clamp_is_bounded_monotone_identity_inside(x in -5.0f64..6.0, dx in 1e-6f64..1.0) {
        let (y, dy) = smooth_clamp(x);
        prop_assert!(-CLAMP_MARGIN <= y && y <= 1.0 + CLAMP_MARGIN);
        prop_assert!((0.0..=1.0).contains(&dy));
        prop_assert!(smooth_clamp(x + dx).0 >= y);
        if (0.0..=1.0).contains(&x) {
            prop_assert_eq!(y, x);
        }
    }

    #[test]
    fn noising_identity(x in -1.0f64..1.0, e in -3.0f64..3.0, t in 1usize..=1000) {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let a = s.alpha_bar(t);
        let z = add_noise(&Grid::filled(1, 1, x), t, &Grid::filled(1, 1, e), &s).unwrap();
        prop_assert!((z.z_t.data[0] - (a.sqrt() * x + (1.0 - a).sqrt() * e)).abs() < 1e-12);
    }

    #[test]
    fn converged_direction_gives_zero_gradient(vals in prop::collection::vec(-3.0f64..3.0, 1..20), mu in 0.0f64..2.0) {
        let g = Grid::from_vec(1, vals.len(), vals).unwrap();
        prop_assert!(sds_gradient(&g, &g, mu).unwrap().data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(seed in 0u64..1000, shift in -2.0f64..2.0) {
        let mut rng = SplitMix64::new(seed);
        let a: Vec<Vec<f64>> = (0..12).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let b: Vec<Vec<f64>> = (0..12).map(|_| (0..4).map(|_| rng.normal() + shift).collect()).collect();
        let ab = frechet_from_features(&a, &b).unwrap();
        let ba = frechet_from_features(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-8 * ab.max(1.0));
        prop_assert!(frechet_from_features(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn iou_bounds_and_symmetry(bits_a in prop::collection::vec(any::<bool>(), 16), bits_b in prop::collection::vec(any::<bool>(), 16)) {
        let g = |b: &[bool]| Grid::from_vec(4, 4, b.iter().map(|&x| if x { 1.0f64 } else { 0.0 }).collect()).unwrap();
        let (a, b) = (g(&bits_a), g(&bits_b));
        let ab = structure_iou(&a, &b, 0.5).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, structure_iou(&b, &a, 0.5).unwrap());
        prop_assert_eq!(structure_iou(&a, &a, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn canvas_edits_stay_inside_the_dilated_mask(seed in 0u64..200, pose in -1.0f64..1.0, scale in 0.0f64..3.0) {
        let subject = make_subject(seed);
        let mut c = Canvas::<f64>::new(subject, Attributes::NONE, 16, 2);
        let mut rng = SplitMix64::new(seed);
        c.texture.data = (0..TEXTURE_RES * TEXTURE_RES).map(|_| scale * rng.normal()).collect();
        let img = c.render_pose(pose).unwrap();
        let fig = render_figure(&subject, pose, Attributes::NONE, 16).unwrap();
        let keep = fig.mask.dilate(2);
        for p in 0..img.len() {
            if !keep.data[p] {
                prop_assert_eq!(img.data[p], fig.image.data[p] as f64);
            }
        }
    }
}
