use std::path::PathBuf;

use figedit_core::grid::Grid;
use figedit_core::rng::SplitMix64;
use figedit_core::scorenet::{
    grad_check_with, Condition, GradCheckOptions, NetConfig, ScoreNet, CLASS_TOKEN, HAT_TOKEN,
};
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
struct Golden {
    config: NetConfig,
    perturb_seed: u64,
    input_seed: u64,
    t: usize,
    tokens: Vec<u32>,
    cond_scale: f64,
    output: Vec<f64>,
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/scorenet_forward.json")
}

fn evaluate(g: &Golden) -> Vec<f64> {
    let mut net = ScoreNet::<f64>::new(g.config.clone()).unwrap();
    net.perturb(g.perturb_seed, 0.05);
    net.set_cond_scale(g.cond_scale).unwrap();
    let r = g.config.resolution;
    let mut rng = SplitMix64::new(g.input_seed);
    let z = Grid::from_vec(r, r, rng.normal_vec(r * r)).unwrap();
    let s = Grid::from_vec(r, r, (0..r * r).map(|_| rng.next_f64()).collect()).unwrap();
    net.forward(&z, g.t, &Condition::new(&g.tokens, Some(&s))).unwrap().data
}

#[test]
fn forward_matches_golden_vector() {
    let path = golden_path();
    if std::env::var_os("FIGEDIT_BLESS_GOLDEN").is_some() {
        let mut g = Golden {
            config: NetConfig { resolution: 8, channels: 4, embed_dim: 8, time_dim: 8, zero_init_output: false, init_seed: 21, ..NetConfig::default() },
            perturb_seed: 22,
            input_seed: 23,
            t: 417,
            tokens: vec![CLASS_TOKEN, HAT_TOKEN],
            cond_scale: 0.5,
            output: vec![],
        };
        g.output = evaluate(&g);
        std::fs::write(&path, serde_json::to_string_pretty(&g).unwrap() + "\n").unwrap();
    }
    let g: Golden = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let out = evaluate(&g);
    assert_eq!(out.len(), g.output.len());
    for (a, b) in out.iter().zip(&g.output) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn default_net_passes_gradient_check_in_double_precision() {
    let mut net = ScoreNet::<f64>::new(NetConfig { zero_init_output: false, ..NetConfig::default() }).unwrap();
    net.perturb(1, 0.02);
    let opts = GradCheckOptions { max_per_layer: Some(12), batch: 2, ..GradCheckOptions::default() };
    let report = grad_check_with(&net, 1e-4, &opts).unwrap();
    assert!(report.passed, "{report:#?}");
}
