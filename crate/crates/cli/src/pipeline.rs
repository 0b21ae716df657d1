//! The subcommands as library functions. Each stage reads its inputs from the
//! run directory, writes into its own subdirectory and records a `run.json`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use figedit_core::anneal::write_schedule_csv;
use figedit_core::canvas::{Canvas, PoseView};
use figedit_core::diffusion::{train_denoiser, write_loss_csv};
use figedit_core::distill::{edit, write_trace_csv, Arm, EditConfig, TraceRow};
use figedit_core::eval::{
    edit_alignment, frechet_distance, identity_score, structure_iou, train_probe, Probe,
};
use figedit_core::grid::Grid;
use figedit_core::personalize::{class_drift, finetune as finetune_net, make_prior_corpus, write_finetune_csv, FinetuneConfig, PriorCorpus};
use figedit_core::scorenet::{ScoreNet, MODEL_MANIFEST};
use figedit_core::synthdata::{generate_corpus, read_corpus, render_figure, write_corpus, Attributes, Corpus, CorpusConfig, SubjectSpec};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::image_io::write_image;
use crate::record::{write_run_record, RunRecord};

pub const DATA_DIR: &str = "data";
pub const BASE_DIR: &str = "base";
pub const PERS_DIR: &str = "pers";
pub const EDIT_DIR: &str = "edit";
pub const EVAL_DIR: &str = "eval";
pub const ABLATE_DIR: &str = "ablate";
pub const ANNEAL_DIR: &str = "anneal";

fn stage(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

/// Fails with exit code 4 naming the subcommand that produces `path`.
pub fn require(path: &Path, producer: &'static str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact { path: path.to_path_buf(), producer })
    }
}

/// Starts a stage from an empty directory so reruns leave no stale files.
fn fresh_dir(dir: &Path) -> CliResult<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn corpus_dir(cfg: &RunConfig) -> PathBuf {
    stage(cfg, DATA_DIR).join("corpus")
}

fn probe_dir(cfg: &RunConfig) -> PathBuf {
    stage(cfg, DATA_DIR).join("probe")
}

fn stream_corpus(cfg: &RunConfig, stream: u64) -> CorpusConfig {
    CorpusConfig { pose_stream: stream, ..cfg.data.corpus.clone() }
}

pub fn build_probe(cfg: &RunConfig) -> CliResult<Probe> {
    let train = generate_corpus(&stream_corpus(cfg, cfg.data.probe_train_stream))?;
    let val = generate_corpus(&stream_corpus(cfg, cfg.data.probe_val_stream))?;
    Ok(train_probe(&train, &val, &cfg.probe)?)
}

/// `gen-data`: the diffusion corpus plus the probe, trained on held-out pose streams.
pub fn gen_data(cfg: &RunConfig) -> CliResult<RunRecord> {
    let dir = stage(cfg, DATA_DIR);
    fresh_dir(&dir)?;
    let corpus = generate_corpus(&cfg.data.corpus)?;
    write_corpus(&corpus, &corpus_dir(cfg))?;
    let probe = build_probe(cfg)?;
    probe.save(&probe_dir(cfg))?;
    write_run_record(cfg, "gen-data", &dir)
}

pub fn load_corpus(cfg: &RunConfig) -> CliResult<Corpus> {
    let d = corpus_dir(cfg);
    require(&d.join("manifest.json"), "gen-data")?;
    Ok(read_corpus(&d)?)
}

pub fn load_probe(cfg: &RunConfig) -> CliResult<Probe> {
    let d = probe_dir(cfg);
    require(&d.join("probe.json"), "gen-data")?;
    Ok(Probe::load(&d)?)
}

fn base_model_dir(cfg: &RunConfig) -> PathBuf {
    stage(cfg, BASE_DIR).join("model")
}

fn pers_model_dir(cfg: &RunConfig) -> PathBuf {
    stage(cfg, PERS_DIR).join("model")
}

pub fn train_base_net(cfg: &RunConfig, corpus: &Corpus) -> CliResult<(ScoreNet<f32>, Vec<figedit_core::diffusion::LossRecord>)> {
    let mut net = ScoreNet::<f32>::new(cfg.base.net.clone())?;
    net.set_cond_scale(cfg.edit.config.guidance.cond_scale_base as f32)?;
    Ok(train_denoiser(&net, corpus, &cfg.base.train)?)
}

/// `train-base`.
pub fn train_base(cfg: &RunConfig) -> CliResult<RunRecord> {
    let corpus = load_corpus(cfg)?;
    let dir = stage(cfg, BASE_DIR);
    fresh_dir(&dir)?;
    let (net, trace) = train_base_net(cfg, &corpus)?;
    net.save(&base_model_dir(cfg))?;
    write_loss_csv(&trace, &dir.join("loss.csv"))?;
    write_run_record(cfg, "train-base", &dir)
}

pub fn load_base(cfg: &RunConfig) -> CliResult<ScoreNet<f32>> {
    let d = base_model_dir(cfg);
    require(&d.join(MODEL_MANIFEST), "train-base")?;
    Ok(ScoreNet::load(&d)?)
}

pub fn load_pers(cfg: &RunConfig) -> CliResult<ScoreNet<f32>> {
    let d = pers_model_dir(cfg);
    require(&d.join(MODEL_MANIFEST), "finetune")?;
    Ok(ScoreNet::load(&d)?)
}

/// Unedited samples of the configured subject.
pub fn subject_corpus(cfg: &RunConfig, corpus: &Corpus) -> CliResult<Corpus> {
    let s = cfg.finetune.subject;
    let attr = cfg.attr_index();
    let sub = corpus.filter(|i, x| i == s && attr.map_or(true, |a| !x.attrs.as_array()[a]));
    if sub.is_empty() {
        return Err(CliError::Core(figedit_core::error::Error::EmptyCorpus));
    }
    Ok(sub)
}

pub fn structure_pool(corpus: &Corpus) -> Vec<Grid<f32>> {
    corpus.samples.iter().map(|s| s.structure.clone()).collect()
}

pub fn finetune_config(cfg: &RunConfig, lambda: f64) -> FinetuneConfig {
    FinetuneConfig { train: cfg.finetune.train.clone(), lambda, identity_token: cfg.finetune.identity_token }
}

pub fn prior_corpus(cfg: &RunConfig, base: &ScoreNet<f32>, corpus: &Corpus) -> CliResult<PriorCorpus<f32>> {
    Ok(make_prior_corpus(base, &cfg.finetune.prior_tokens, cfg.finetune.prior_samples.max(1), &structure_pool(corpus), cfg.prior_seed())?)
}

/// `finetune`.
pub fn finetune(cfg: &RunConfig) -> CliResult<RunRecord> {
    let corpus = load_corpus(cfg)?;
    let base = load_base(cfg)?;
    let dir = stage(cfg, PERS_DIR);
    fresh_dir(&dir)?;
    let subject = subject_corpus(cfg, &corpus)?;
    let prior = prior_corpus(cfg, &base, &corpus)?;
    prior.save(&dir.join("prior"))?;
    let mut pers = finetune_net(&base, &subject, &prior, &finetune_config(cfg, cfg.finetune.lambda))?;
    pers.net.set_cond_scale(cfg.edit.config.guidance.cond_scale_personalized as f32)?;
    pers.net.save(&pers_model_dir(cfg))?;
    write_finetune_csv(&pers.trace, &dir.join("finetune.csv"))?;
    write_run_record(cfg, "finetune", &dir)
}

/// Everything the edit loop and its metrics need about the subject.
#[derive(Debug, Clone)]
pub struct EditTask {
    pub subject_index: usize,
    pub subject: SubjectSpec,
    pub attr: usize,
    pub poses: Vec<f64>,
    pub structures: Vec<Grid<f32>>,
    /// The generator's own rendering of the edited subject at each pose.
    pub truth: Vec<Grid<f32>>,
}

pub fn edit_task(cfg: &RunConfig, corpus: &Corpus) -> CliResult<EditTask> {
    let attr = cfg.attr_index().ok_or_else(|| CliError::Config(vec![format!("edit.attr: unknown attribute {:?}", cfg.edit.attr)]))?;
    let sub = subject_corpus(cfg, corpus)?;
    let subject = corpus.manifest.subjects[cfg.finetune.subject];
    let poses: Vec<f64> = sub.samples.iter().map(|s| s.pose).collect();
    let structures = sub.samples.iter().map(|s| s.structure.clone()).collect();
    let mut edited = [false; 3];
    edited[attr] = true;
    let truth = poses
        .iter()
        .map(|&p| Ok(render_figure(&subject, p, Attributes::from_array(edited), corpus.resolution())?.image))
        .collect::<CliResult<Vec<_>>>()?;
    Ok(EditTask { subject_index: cfg.finetune.subject, subject, attr, poses, structures, truth })
}

pub fn new_canvas(cfg: &RunConfig, task: &EditTask) -> Canvas<f32> {
    Canvas::new(task.subject, Attributes::NONE, cfg.data.corpus.resolution, cfg.edit.mask_dilation)
}

pub fn render_all(canvas: &Canvas<f32>, poses: &[f64]) -> CliResult<Vec<Grid<f32>>> {
    Ok(poses.iter().map(|&p| canvas.render_pose(p)).collect::<figedit_core::error::Result<_>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditMetrics {
    pub edit_initial: f64,
    pub edit_final: f64,
    pub identity_initial: f64,
    pub identity_final: f64,
    pub iou_min: f64,
    pub iou_mean: f64,
    /// Fréchet distance of the unedited renders to the true edited renders.
    pub fd_unedited: f64,
    pub fd_edited: f64,
    /// Mean of `edit_final`, `identity_final` and `iou_mean`.
    pub combined: f64,
}

impl EditMetrics {
    pub const NAMES: [&'static str; 9] = [
        "edit_initial",
        "edit_final",
        "identity_initial",
        "identity_final",
        "iou_min",
        "iou_mean",
        "fd_unedited",
        "fd_edited",
        "combined",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.edit_initial,
            self.edit_final,
            self.identity_initial,
            self.identity_final,
            self.iou_min,
            self.iou_mean,
            self.fd_unedited,
            self.fd_edited,
            self.combined,
        ]
    }
}

pub fn evaluate_edit(probe: &Probe, canvas: &Canvas<f32>, task: &EditTask, iou_threshold: f64) -> CliResult<EditMetrics> {
    let unedited = render_all(&new_canvas_like(canvas), &task.poses)?;
    let edited = render_all(canvas, &task.poses)?;
    let ious = edited
        .iter()
        .zip(&task.structures)
        .map(|(r, s)| structure_iou(r, s, iou_threshold))
        .collect::<figedit_core::error::Result<Vec<f64>>>()?;
    let iou_min = ious.iter().copied().fold(f64::INFINITY, f64::min);
    let iou_mean = ious.iter().sum::<f64>() / ious.len() as f64;
    let edit_final = edit_alignment(probe, &edited, task.attr)?;
    let identity_final = identity_score(probe, &edited, task.subject_index)?;
    Ok(EditMetrics {
        edit_initial: edit_alignment(probe, &unedited, task.attr)?,
        edit_final,
        identity_initial: identity_score(probe, &unedited, task.subject_index)?,
        identity_final,
        iou_min,
        iou_mean,
        fd_unedited: frechet_distance(probe, &unedited, &task.truth)?,
        fd_edited: frechet_distance(probe, &edited, &task.truth)?,
        combined: (edit_final + identity_final + iou_mean) / 3.0,
    })
}

fn new_canvas_like(c: &Canvas<f32>) -> Canvas<f32> {
    Canvas::new(c.subject, c.base_attrs, c.resolution, c.mask_dilation)
}

/// Runs the edit loop with probe monitoring and optional per-pose snapshots.
#[allow(clippy::too_many_arguments)]
pub fn run_edit(
    cfg: &RunConfig,
    ecfg: &EditConfig,
    base: &ScoreNet<f32>,
    pers: &ScoreNet<f32>,
    probe: &Probe,
    task: &EditTask,
    snapshots: Option<&Path>,
) -> CliResult<(Canvas<f32>, Vec<TraceRow>)> {
    let mut canvas = new_canvas(cfg, task);
    let sched = base.schedule().clone();
    let mut calls = 0usize;
    let mut snap_err = None;
    let mut monitor = |c: &Canvas<f32>, views: &[PoseView<f32>]| {
        calls += 1;
        let it = calls * ecfg.trace_every;
        let renders: Vec<Grid<f32>> = views.iter().map(|v| c.render(v).image).collect();
        if let (Some(dir), true) = (snapshots, cfg.edit.snapshot_every > 0 && it % cfg.edit.snapshot_every == 0) {
            for (i, r) in renders.iter().enumerate() {
                if let Err(e) = write_image(&dir.join(format!("iter_{it:06}_pose_{i:02}")), r, cfg.output.png) {
                    snap_err.get_or_insert(e);
                }
            }
        }
        Ok((edit_alignment(probe, &renders, task.attr)?, identity_score(probe, &renders, task.subject_index)?))
    };
    if let Some(d) = snapshots {
        std::fs::create_dir_all(d)?;
    }
    let trace = edit(&mut canvas, base, pers, &sched, &task.poses, ecfg, Some(&mut monitor))?;
    if let Some(e) = snap_err {
        return Err(e);
    }
    Ok((canvas, trace))
}

fn edit_inputs(cfg: &RunConfig) -> CliResult<(Corpus, ScoreNet<f32>, ScoreNet<f32>, Probe)> {
    let corpus = load_corpus(cfg)?;
    let probe = load_probe(cfg)?;
    let base = load_base(cfg)?;
    let pers = load_pers(cfg)?;
    Ok((corpus, base, pers, probe))
}

fn write_renders(dir: &Path, prefix: &str, renders: &[Grid<f32>], png: bool) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    for (i, r) in renders.iter().enumerate() {
        write_image(&dir.join(format!("{prefix}pose_{i:02}")), r, png)?;
    }
    Ok(())
}

/// `edit`.
pub fn edit_stage(cfg: &RunConfig) -> CliResult<RunRecord> {
    let (corpus, base, pers, probe) = edit_inputs(cfg)?;
    let dir = stage(cfg, EDIT_DIR);
    fresh_dir(&dir)?;
    let task = edit_task(cfg, &corpus)?;
    let (canvas, trace) = run_edit(cfg, &cfg.edit_config(), &base, &pers, &probe, &task, Some(&dir.join("snapshots")))?;
    canvas.save(&dir.join("canvas"))?;
    write_trace_csv(&trace, &dir.join("trace.csv"))?;
    write_renders(&dir.join("renders"), "", &render_all(&canvas, &task.poses)?, cfg.output.png)?;
    write_run_record(cfg, "edit", &dir)
}

/// `eval`: metrics of the edited canvas, one CSV row per metric.
pub fn eval_stage(cfg: &RunConfig) -> CliResult<RunRecord> {
    let corpus = load_corpus(cfg)?;
    let probe = load_probe(cfg)?;
    let cdir = stage(cfg, EDIT_DIR).join("canvas");
    require(&cdir.join("canvas.json"), "edit")?;
    let canvas = Canvas::<f32>::load(&cdir)?;
    let task = edit_task(cfg, &corpus)?;
    let dir = stage(cfg, EVAL_DIR);
    fresh_dir(&dir)?;
    let m = evaluate_edit(&probe, &canvas, &task, cfg.eval.iou_threshold)?;
    let mut rows: Vec<(&str, f64)> = EditMetrics::NAMES.iter().copied().zip(m.values()).collect();
    let drift;
    if cfg.eval.drift_samples > 0 {
        let base = load_base(cfg)?;
        let pers = load_pers(cfg)?;
        drift = class_drift(&probe, &base, &pers, &cfg.finetune.prior_tokens, &structure_pool(&corpus), cfg.eval.drift_samples, cfg.prior_seed() ^ 1)?;
        rows.push(("class_drift", drift));
    }
    let run_id = run_id(cfg);
    let hash = cfg.hash();
    let mut csv = String::from("run_id,config_hash,metric,value\n");
    for (name, v) in rows {
        writeln!(csv, "{run_id},{hash},{name},{v:.9e}").expect("string write");
    }
    std::fs::write(dir.join("metrics.csv"), csv)?;
    write_run_record(cfg, "eval", &dir)
}

pub fn run_id(cfg: &RunConfig) -> String {
    cfg.out_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub repeat: usize,
    pub seed: u64,
    pub arm: Arm,
    pub metrics: EditMetrics,
}

/// Whether `Ours > PNA-SDS > {NA-SDS, P-SDS} > SDS` holds on the combined score
/// for one repeat; `None` when an arm of the chain is missing.
pub fn ordering_holds(rows: &[&AblationRow]) -> Option<bool> {
    let get = |a: Arm| rows.iter().find(|r| r.arm == a).map(|r| r.metrics.combined);
    let (ours, pna, na, p, sds) = (get(Arm::Ours)?, get(Arm::PnaSds)?, get(Arm::NaSds)?, get(Arm::PSds)?, get(Arm::Sds)?);
    Some(ours > pna && pna > na.max(p) && na.min(p) > sds)
}

pub fn ablation_rows(
    cfg: &RunConfig,
    base: &ScoreNet<f32>,
    pers: &ScoreNet<f32>,
    probe: &Probe,
    task: &EditTask,
    renders: Option<&Path>,
) -> CliResult<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for repeat in 0..cfg.ablate.repeats {
        let seed = cfg.repeat_seed(repeat);
        for &arm in &cfg.ablate.arms {
            let mut ecfg = arm.configure(&cfg.edit.config);
            ecfg.seed = seed;
            let (canvas, _) = run_edit(cfg, &ecfg, base, pers, probe, task, None)?;
            if let Some(d) = renders {
                let tag = arm.label().replace('+', "_");
                write_renders(d, &format!("r{repeat}_{tag}_"), &render_all(&canvas, &task.poses)?, cfg.output.png)?;
            }
            let metrics = evaluate_edit(probe, &canvas, task, cfg.eval.iou_threshold)?;
            rows.push(AblationRow { repeat, seed, arm, metrics });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(cfg: &RunConfig, rows: &[AblationRow]) -> String {
    let mut s = String::from("run_id,config_hash,repeat,seed,arm");
    for n in EditMetrics::NAMES {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    let (id, hash) = (run_id(cfg), cfg.hash());
    for r in rows {
        write!(s, "{id},{hash},{},{},{}", r.repeat, r.seed, r.arm.label()).expect("string write");
        for v in r.metrics.values() {
            write!(s, ",{v:.6}").expect("string write");
        }
        s.push('\n');
    }
    s
}

/// `ablate`: every arm for every repeat, plus the per-repeat ordering verdict.
pub fn ablate_stage(cfg: &RunConfig) -> CliResult<(RunRecord, Vec<AblationRow>)> {
    let (corpus, base, pers, probe) = edit_inputs(cfg)?;
    let dir = stage(cfg, ABLATE_DIR);
    fresh_dir(&dir)?;
    let task = edit_task(cfg, &corpus)?;
    let rows = ablation_rows(cfg, &base, &pers, &probe, &task, Some(&dir.join("renders")))?;
    std::fs::write(dir.join("ablation.csv"), ablation_csv(cfg, &rows))?;
    let mut ord = String::from("repeat,seed,ordering_holds\n");
    for r in 0..cfg.ablate.repeats {
        let rs: Vec<&AblationRow> = rows.iter().filter(|x| x.repeat == r).collect();
        let verdict = match ordering_holds(&rs) {
            Some(true) => "true",
            Some(false) => "false",
            None => "na",
        };
        writeln!(ord, "{r},{},{verdict}", cfg.repeat_seed(r)).expect("string write");
    }
    std::fs::write(dir.join("ordering.csv"), ord)?;
    Ok((write_run_record(cfg, "ablate", &dir)?, rows))
}

/// `anneal-dump`: the window schedule of the configured edit.
pub fn anneal_dump(cfg: &RunConfig) -> CliResult<RunRecord> {
    let dir = stage(cfg, ANNEAL_DIR);
    fresh_dir(&dir)?;
    write_schedule_csv(&cfg.edit.config.anneal, &dir.join("anneal.csv"))?;
    write_run_record(cfg, "anneal-dump", &dir)
}
