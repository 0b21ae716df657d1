use figedit_core::eval::{
    edit_alignment, frechet_distance, identity_score, structure_iou, train_probe, ProbeConfig,
    DEFAULT_IOU_THRESHOLD,
};
use figedit_core::grid::Grid;
use figedit_core::synthdata::{generate_corpus, Attributes, CorpusConfig};

fn corpora() -> (figedit_core::synthdata::Corpus, figedit_core::synthdata::Corpus) {
    let base = CorpusConfig::default();
    let train = generate_corpus(&CorpusConfig { pose_stream: 1, ..base.clone() }).unwrap();
    let val = generate_corpus(&CorpusConfig { pose_stream: 2, ..base }).unwrap();
    (train, val)
}

#[test]
fn default_corpus_probe_meets_accuracy_and_calibration() {
    let (train, val) = corpora();
    let t0 = std::time::Instant::now();
    let probe = train_probe(&train, &val, &ProbeConfig::default()).unwrap();
    eprintln!("probe trained in {:?}: {:?}", t0.elapsed(), probe.report);
    let report = probe.report.clone().unwrap();
    assert!(report.attr_accuracy[0].unwrap() >= 0.95);

    let hat: Vec<Grid<f32>> = val.samples.iter().filter(|s| s.attrs.hat).map(|s| s.image.clone()).collect();
    let plain: Vec<Grid<f32>> = val.samples.iter().filter(|s| !s.attrs.hat).map(|s| s.image.clone()).collect();
    let on = edit_alignment(&probe, &hat, 0).unwrap();
    let off = edit_alignment(&probe, &plain, 0).unwrap();
    eprintln!("hat alignment on {on} off {off}");
    assert!(on > 0.95 && off < 0.05);

    let subj0: Vec<Grid<f32>> =
        val.samples.iter().zip(&val.subject_index).filter(|(s, &i)| i == 0 && !s.attrs.hat).map(|(s, _)| s.image.clone()).collect();
    let subj1: Vec<Grid<f32>> =
        val.samples.iter().zip(&val.subject_index).filter(|(s, &i)| i == 1 && !s.attrs.hat).map(|(s, _)| s.image.clone()).collect();
    let own = identity_score(&probe, &subj0, 0).unwrap();
    let other = identity_score(&probe, &subj1, 0).unwrap();
    eprintln!("identity own {own} other {other}");
    assert!(own > 0.95 && other < 0.2);
    let mixed: Vec<Grid<f32>> = subj0.iter().chain(&subj1).cloned().collect();
    let m = identity_score(&probe, &mixed, 0).unwrap();
    assert!((m - 0.5 * (own + other)).abs() < 0.05);

    assert!(frechet_distance(&probe, &hat, &hat).unwrap() < 1e-6);
    let d_hp = frechet_distance(&probe, &hat, &plain).unwrap();
    let d_ph = frechet_distance(&probe, &plain, &hat).unwrap();
    assert!((d_hp - d_ph).abs() < 1e-8 * d_hp.max(1.0));

    let again = train_probe(&train, &val, &ProbeConfig::default()).unwrap();
    assert_eq!(again.params, probe.params);
}

#[test]
fn unedited_renders_have_full_structure_iou() {
    let (_, val) = corpora();
    for s in val.samples.iter().filter(|s| s.attrs == Attributes::NONE) {
        assert_eq!(structure_iou(&s.image, &s.structure, DEFAULT_IOU_THRESHOLD).unwrap(), 1.0);
    }
}
