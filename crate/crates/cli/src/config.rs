//! Run configuration: JSON file merged over defaults, dotted `key=value`
//! overrides, schema check that reports every offending key, and seed
//! derivation from the master seed.

use std::path::{Path, PathBuf};

use figedit_core::diffusion::TrainConfig;
use figedit_core::distill::{Arm, EditConfig};
use figedit_core::eval::{ProbeConfig, DEFAULT_IOU_THRESHOLD};
use figedit_core::rng::derive_seed;
use figedit_core::scorenet::{NetConfig, Objective, TokenId, Target, Weighting, CLASS_TOKEN, SKS_TOKEN};
use figedit_core::synthdata::{Attributes, CorpusConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: CorpusConfig,
    /// Pose streams of the probe's training and validation corpora.
    pub probe_train_stream: u64,
    pub probe_val_stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneStage {
    /// Subject index into the corpus.
    pub subject: usize,
    pub prior_samples: usize,
    pub prior_tokens: Vec<TokenId>,
    pub lambda: f64,
    pub identity_token: TokenId,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditStage {
    /// Attribute being added; one of `hat`, `stripes`, `held_item`.
    pub attr: String,
    /// Applies an ablation arm's switches on top of `config`.
    pub arm: Option<Arm>,
    pub mask_dilation: usize,
    /// PGM snapshots of every pose each this many iterations (0 disables).
    pub snapshot_every: usize,
    pub config: EditConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Class samples per net for the class-drift distance (0 skips it).
    pub drift_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub arms: Vec<Arm>,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub png: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub probe: ProbeConfig,
    pub base: BaseConfig,
    pub finetune: FinetuneStage,
    pub edit: EditStage,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig { corpus: CorpusConfig::default(), probe_train_stream: 1, probe_val_stream: 2 },
            probe: ProbeConfig::default(),
            base: BaseConfig { net: NetConfig::default(), train: TrainConfig::default() },
            finetune: FinetuneStage {
                subject: 0,
                prior_samples: 64,
                prior_tokens: vec![CLASS_TOKEN],
                lambda: 1.0,
                identity_token: SKS_TOKEN,
                train: TrainConfig {
                    iterations: 2000,
                    lr: 1e-4,
                    objective: Objective { target: Target::Eps, weighting: Weighting::Fantasia, scale: 1.0 },
                    ..TrainConfig::default()
                },
            },
            edit: EditStage {
                attr: "hat".into(),
                arm: None,
                mask_dilation: 2,
                snapshot_every: 500,
                config: EditConfig::default(),
            },
            eval: EvalConfig { iou_threshold: DEFAULT_IOU_THRESHOLD, drift_samples: 64 },
            ablate: AblateConfig { arms: Arm::ALL.to_vec(), repeats: 3 },
            output: OutputConfig { png: false },
        }
    }
}

/// Seed fields filled from the master seed; setting them directly is a config error.
pub const DERIVED_SEEDS: [(&str, &str); 7] = [
    ("data.corpus.seed", "data"),
    ("probe.seed", "probe"),
    ("base.net.init_seed", "base/init"),
    ("base.train.seed", "base/train"),
    ("finetune.train.seed", "finetune/train"),
    ("edit.config.seed", "edit"),
    ("finetune.prior_seed", "finetune/prior"),
];

const ANNEAL_ITERATIONS: &str = "edit.config.anneal.iterations";

pub fn seed_for(master: u64, tag: &str) -> u64 {
    derive_seed(master, tag)
}

impl RunConfig {
    /// Seed of the prior corpus draw.
    pub fn prior_seed(&self) -> u64 {
        seed_for(self.seed, "finetune/prior")
    }

    /// Edit seed of ablation repeat `r`; repeat 0 uses the edit stage's seed.
    pub fn repeat_seed(&self, r: usize) -> u64 {
        if r == 0 {
            self.edit.config.seed
        } else {
            seed_for(self.seed, &format!("ablate/{r}"))
        }
    }

    /// Every seed in use, by name.
    pub fn seeds(&self) -> Vec<(String, u64)> {
        let mut v = vec![
            ("master".to_string(), self.seed),
            ("data.corpus.seed".into(), self.data.corpus.seed),
            ("probe.seed".into(), self.probe.seed),
            ("base.net.init_seed".into(), self.base.net.init_seed),
            ("base.train.seed".into(), self.base.train.seed),
            ("finetune.train.seed".into(), self.finetune.train.seed),
            ("finetune.prior_seed".into(), self.prior_seed()),
            ("edit.config.seed".into(), self.edit.config.seed),
        ];
        for r in 1..self.ablate.repeats {
            v.push((format!("ablate.repeat{r}"), self.repeat_seed(r)));
        }
        v
    }

    /// The edit config with the stage's arm applied.
    pub fn edit_config(&self) -> EditConfig {
        match self.edit.arm {
            Some(a) => a.configure(&self.edit.config),
            None => self.edit.config.clone(),
        }
    }

    pub fn attr_index(&self) -> Option<usize> {
        Attributes::NAMES.iter().position(|n| *n == self.edit.attr)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// sha256 of the canonical (key-sorted, compact) JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_value().to_string().as_bytes()))
    }

    /// Semantic checks, one message per offending key.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut check = |key: &str, r: figedit_core::error::Result<()>| {
            if let Err(e) = r {
                errs.push(format!("{key}: {e}"));
            }
        };
        let c = &self.data.corpus;
        if c.subjects == 0 {
            check("data.corpus.subjects", Err(invalid("must be at least 1")));
        }
        if c.poses_per_subject == 0 {
            check("data.corpus.poses_per_subject", Err(invalid("must be at least 1")));
        }
        if c.resolution != self.base.net.resolution {
            check(
                "base.net.resolution",
                Err(invalid(&format!("{} differs from data.corpus.resolution {}", self.base.net.resolution, c.resolution))),
            );
        }
        if self.data.probe_train_stream == self.data.probe_val_stream || self.data.probe_train_stream == c.pose_stream {
            check("data.probe_train_stream", Err(invalid("probe streams must differ from each other and from data.corpus.pose_stream")));
        }
        check("base.net", self.base.net.validate());
        check("base.train", train_checks(&self.base.train));
        check("finetune.train", train_checks(&self.finetune.train));
        if self.probe.iterations == 0 || self.probe.batch_size == 0 {
            check("probe.iterations", Err(invalid("iterations and batch_size must be at least 1")));
        }
        if !(0.0..=1.0).contains(&self.probe.min_accuracy) {
            check("probe.min_accuracy", Err(invalid("must lie in [0, 1]")));
        }
        if self.finetune.subject >= c.subjects {
            check("finetune.subject", Err(invalid(&format!("{} but the corpus has {} subjects", self.finetune.subject, c.subjects))));
        }
        if self.finetune.prior_samples == 0 && self.finetune.lambda > 0.0 {
            check("finetune.prior_samples", Err(invalid("must be at least 1 when lambda > 0")));
        }
        if !(self.finetune.lambda >= 0.0) {
            check("finetune.lambda", Err(invalid("must be non-negative")));
        }
        if self.finetune.identity_token as usize >= self.base.net.n_tokens {
            check("finetune.identity_token", Err(invalid("outside the token table")));
        }
        if self.attr_index().is_none() {
            check("edit.attr", Err(invalid(&format!("{:?} is not one of {:?}", self.edit.attr, Attributes::NAMES))));
        }
        let steps = self.base.net.schedule.steps;
        check("edit.config", self.edit_config().validate(steps));
        if self.edit.config.prompt_id.iter().all(|&t| t != self.finetune.identity_token) {
            check("edit.config.prompt_id", Err(invalid("must contain finetune.identity_token")));
        }
        if !(0.0..=1.0).contains(&self.eval.iou_threshold) {
            check("eval.iou_threshold", Err(invalid("must lie in [0, 1]")));
        }
        if self.eval.drift_samples == 1 {
            check("eval.drift_samples", Err(invalid("must be 0 (skip) or at least 2")));
        }
        if self.ablate.repeats == 0 {
            check("ablate.repeats", Err(invalid("must be at least 1")));
        }
        if self.ablate.arms.is_empty() {
            check("ablate.arms", Err(invalid("must list at least one arm")));
        }
        errs
    }
}

fn invalid(msg: &str) -> figedit_core::error::Error {
    figedit_core::error::Error::Invalid(msg.into())
}

fn train_checks(t: &TrainConfig) -> figedit_core::error::Result<()> {
    if t.batch_size == 0 {
        return Err(invalid("batch_size must be at least 1"));
    }
    if !(t.lr > 0.0) {
        return Err(invalid("lr must be positive"));
    }
    if !(0.0..=1.0).contains(&t.null_prob) || !(0.0..=1.0).contains(&t.structure_dropout) {
        return Err(invalid("null_prob and structure_dropout must lie in [0, 1]"));
    }
    Ok(())
}

/// Deep merge: objects merge key by key, anything else replaces.
pub fn merge(into: &mut Value, from: &Value) {
    match (into, from) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                match a.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        a.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Parses `a.b.c=value` (value as JSON, else a bare string) into a nested object.
pub fn parse_override(s: &str) -> Result<Value, String> {
    let (key, raw) = s.split_once('=').ok_or_else(|| format!("override {s:?} is not key=value"))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(format!("override {s:?} has an empty key segment"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut v = value;
    for seg in key.rsplit('.') {
        let mut m = Map::new();
        m.insert(seg.to_string(), v);
        v = Value::Object(m);
    }
    Ok(v)
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Walks `given` against the default tree and reports unknown keys, derived
/// seeds and obvious type mismatches.
fn schema_errors(default: &Value, given: &Value, path: &str, errs: &mut Vec<String>) {
    let (Value::Object(d), Value::Object(g)) = (default, given) else { return };
    for (k, v) in g {
        let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        if DERIVED_SEEDS.iter().any(|(key, _)| *key == p) {
            errs.push(format!("{p}: derived from the master seed; set `seed` instead"));
            continue;
        }
        if p == ANNEAL_ITERATIONS {
            errs.push(format!("{p}: follows edit.config.iterations"));
            continue;
        }
        match d.get(k) {
            None => errs.push(format!("{p}: unknown key")),
            Some(dv) => {
                let ok = match (dv, v) {
                    (Value::Object(_), Value::Object(_)) => {
                        schema_errors(dv, v, &p, errs);
                        true
                    }
                    (Value::Number(_), Value::Number(_)) | (Value::Bool(_), Value::Bool(_)) => true,
                    (Value::Array(_), Value::Array(_)) => true,
                    // enums may switch between unit (string) and data-carrying (object) variants
                    (Value::String(_), Value::String(_) | Value::Object(_)) => true,
                    (Value::Object(_), Value::String(_)) => true,
                    // optional fields
                    (Value::Null, _) | (_, Value::Null) => true,
                    _ => false,
                };
                if !ok {
                    errs.push(format!("{p}: expected {}, got {}", kind(dv), kind(v)));
                }
            }
        }
    }
}

fn set_path(v: &mut Value, path: &str, x: Value) {
    let mut cur = v;
    let segs: Vec<&str> = path.split('.').collect();
    for s in &segs[..segs.len() - 1] {
        cur = cur.as_object_mut().expect("object").entry(*s).or_insert_with(|| Value::Object(Map::new()));
    }
    cur.as_object_mut().expect("object").insert(segs[segs.len() - 1].to_string(), x);
}

/// Loads `path` (if any) over the defaults, applies overrides, derives seeds and validates.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let defaults = RunConfig::default().to_value();
    let mut errs = Vec::new();
    let mut layers = Vec::new();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(vec![format!("{}: {e}", p.display())]))?;
        let v: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(vec![format!("{}: {e}", p.display())]))?;
        if !v.is_object() {
            return Err(CliError::Config(vec![format!("{}: top level must be an object", p.display())]));
        }
        layers.push(v);
    }
    for o in overrides {
        match parse_override(o) {
            Ok(v) => layers.push(v),
            Err(e) => errs.push(e),
        }
    }
    let mut merged = defaults.clone();
    for l in &layers {
        schema_errors(&defaults, l, "", &mut errs);
        merge(&mut merged, l);
    }
    if !errs.is_empty() {
        return Err(CliError::Config(errs));
    }
    let master = merged.get("seed").and_then(Value::as_u64).ok_or_else(|| CliError::Config(vec!["seed: expected a non-negative integer".into()]))?;
    for (key, tag) in DERIVED_SEEDS {
        if key != "finetune.prior_seed" {
            set_path(&mut merged, key, Value::from(seed_for(master, tag)));
        }
    }
    if let Some(n) = merged.pointer("/edit/config/iterations").and_then(Value::as_u64) {
        set_path(&mut merged, ANNEAL_ITERATIONS, Value::from(n.max(1)));
    }
    // deserialize section by section so every broken section is reported
    let obj = merged.as_object().expect("object");
    for (k, v) in obj {
        let r = match k.as_str() {
            "seed" => serde_json::from_value::<u64>(v.clone()).map(drop),
            "out_dir" => serde_json::from_value::<PathBuf>(v.clone()).map(drop),
            "data" => serde_json::from_value::<DataConfig>(v.clone()).map(drop),
            "probe" => serde_json::from_value::<ProbeConfig>(v.clone()).map(drop),
            "base" => serde_json::from_value::<BaseConfig>(v.clone()).map(drop),
            "finetune" => serde_json::from_value::<FinetuneStage>(v.clone()).map(drop),
            "edit" => serde_json::from_value::<EditStage>(v.clone()).map(drop),
            "eval" => serde_json::from_value::<EvalConfig>(v.clone()).map(drop),
            "ablate" => serde_json::from_value::<AblateConfig>(v.clone()).map(drop),
            "output" => serde_json::from_value::<OutputConfig>(v.clone()).map(drop),
            _ => Ok(()),
        };
        if let Err(e) = r {
            errs.push(format!("{k}: {e}"));
        }
    }
    if !errs.is_empty() {
        return Err(CliError::Config(errs));
    }
    let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| CliError::Config(vec![e.to_string()]))?;
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(CliError::Config(errs));
    }
    Ok(cfg)
}
