//! Run configuration: an optional TOML file, then `--dotted.key value`
//! overrides, then per-stage seeds derived from the top-level `seed` for
//! every stage whose seed was not given explicitly.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use prefcap_core::policy::{DecodeConfig, MleConfig, PolicyDims};
use prefcap_core::prefdata::OracleAnnotation;
use prefcap_core::reward::RewardTrainConfig;
use prefcap_core::rng::derive_seed;
use prefcap_core::scst::RlhfConfig;
use prefcap_core::synthworld::{Vocab, WorldSpec};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// How the generated clips are divided between pipeline stages. Pretraining
/// uses the first `pretrain_clips`, RL the next `rl_clips`, and evaluation
/// the last `heldout_clips`. Preference data is drawn from the first
/// `pref_clips`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub samples: usize,
    pub pretrain_clips: usize,
    pub pref_clips: usize,
    pub rl_clips: usize,
    pub heldout_clips: usize,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { samples: 3000, pretrain_clips: 500, pref_clips: 2000, rl_clips: 2000, heldout_clips: 300, split_seed: 0 }
    }
}

impl DataConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.pretrain_clips == 0 || self.rl_clips == 0 || self.heldout_clips == 0 || self.pref_clips == 0 {
            v.push("pretrain_clips, pref_clips, rl_clips and heldout_clips must all be positive".into());
        }
        if self.pretrain_clips + self.rl_clips + self.heldout_clips > self.samples {
            v.push(format!(
                "pretrain_clips + rl_clips + heldout_clips = {} exceeds samples = {}",
                self.pretrain_clips + self.rl_clips + self.heldout_clips,
                self.samples
            ));
        }
        if self.pref_clips + self.heldout_clips > self.samples {
            v.push(format!(
                "pref_clips + heldout_clips = {} exceeds samples = {}",
                self.pref_clips + self.heldout_clips,
                self.samples
            ));
        }
        v
    }

    pub fn pretrain(&self) -> std::ops::Range<usize> {
        0..self.pretrain_clips
    }

    pub fn prefs(&self) -> std::ops::Range<usize> {
        0..self.pref_clips
    }

    pub fn rl(&self) -> std::ops::Range<usize> {
        self.pretrain_clips..self.pretrain_clips + self.rl_clips
    }

    pub fn heldout(&self) -> std::ops::Range<usize> {
        self.samples - self.heldout_clips..self.samples
    }
}

/// Candidate captions decoded from the pretrained policy for preference
/// labelling: one greedy caption and `topk_samples` top-k samples per clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CandidateConfig {
    pub topk_samples: usize,
    pub k: usize,
    /// A clip is challenging when every candidate scores below this event-F1.
    pub fail_below: f64,
    pub seed: u64,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self { topk_samples: 2, k: 5, fail_below: 0.5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub count: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { count: 500, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChallengingConfig {
    pub k: usize,
}

impl Default for ChallengingConfig {
    fn default() -> Self {
        Self { k: 250 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotateConfig {
    pub host: String,
    pub port: u16,
    pub order_seed: u64,
    pub static_dir: Option<PathBuf>,
    pub audio_dir: Option<PathBuf>,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: 8080, order_seed: 0, static_dir: None, audio_dir: None }
    }
}

/// File names. Relative paths resolve against `run_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub run_dir: PathBuf,
    pub prefs_input: PathBuf,
    pub decode_policy: PathBuf,
    pub decode_output: PathBuf,
    pub eval_system: PathBuf,
    pub eval_baseline: PathBuf,
    pub annotation_pairs: PathBuf,
    pub vote_log: PathBuf,
    pub export_output: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            run_dir: "run".into(),
            prefs_input: "prefs_oracle.jsonl".into(),
            decode_policy: "policy_rlhf.parm".into(),
            decode_output: "captions_rlhf.jsonl".into(),
            eval_system: "captions_rlhf.jsonl".into(),
            eval_baseline: "captions_pretrained.jsonl".into(),
            annotation_pairs: "annotation_pairs.jsonl".into(),
            vote_log: "votes.jsonl".into(),
            export_output: "prefs_human.jsonl".into(),
        }
    }
}

impl IoConfig {
    pub fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        let name = name.as_ref();
        if name.is_absolute() {
            name.to_path_buf()
        } else {
            self.run_dir.join(name)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub io: IoConfig,
    pub world: WorldSpec,
    pub data: DataConfig,
    pub policy: PolicyDims,
    pub mle: MleConfig,
    pub oracle: OracleAnnotation,
    pub candidates: CandidateConfig,
    pub augment: AugmentConfig,
    pub challenging: ChallengingConfig,
    pub reward: RewardTrainConfig,
    pub rlhf: RlhfConfig,
    pub decode: DecodeConfig,
    pub annotate: AnnotateConfig,
}

/// Desk-scale defaults: the library defaults except for RL fine-tuning,
/// which runs fewer epochs at a far larger step size than the full-scale
/// schedule.
impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            io: IoConfig::default(),
            world: WorldSpec::default(),
            data: DataConfig::default(),
            policy: PolicyDims::default(),
            mle: MleConfig::default(),
            oracle: OracleAnnotation::default(),
            candidates: CandidateConfig::default(),
            augment: AugmentConfig::default(),
            challenging: ChallengingConfig::default(),
            reward: RewardTrainConfig::default(),
            rlhf: RlhfConfig { epochs: 30, lr: 1e-3, weight_decay: 0.0, decay_every: 20, ..RlhfConfig::default() },
            decode: DecodeConfig::default(),
            annotate: AnnotateConfig::default(),
        }
    }
}

/// Seeds filled from the top-level seed when absent, with their streams.
const DERIVED_SEEDS: &[(&str, u64)] = &[
    ("world.seed", 1),
    ("mle.seed", 2),
    ("oracle.seed", 3),
    ("candidates.seed", 4),
    ("augment.seed", 5),
    ("reward.seed", 6),
    ("rlhf.seed", 7),
    ("decode.seed", 8),
    ("data.split_seed", 9),
];

/// Parses a command-line value as a TOML value when it is one, otherwise
/// as a bare string (`--io.run_dir out/a` needs no quoting).
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key v present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut Table, dotted: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = dotted.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("malformed key `{dotted}`");
    }
    let (last, parents) = keys.split_last().expect("non-empty split");
    let mut table = root;
    for (i, k) in parents.iter().enumerate() {
        let entry = table.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => bail!("`{}` is not a section", keys[..=i].join(".")),
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Overlays `top` onto `base`, descending into tables present in both.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn has_path(root: &Table, dotted: &str) -> bool {
    let mut table = root;
    let keys: Vec<&str> = dotted.split('.').collect();
    let (last, parents) = keys.split_last().expect("non-empty split");
    for k in parents {
        match table.get(*k) {
            Some(Value::Table(t)) => table = t,
            _ => return false,
        }
    }
    table.contains_key(*last)
}

/// Splits `--a.b value` and `--a.b=value` overrides into key/value pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            bail!("expected `--key value`, found `{arg}`");
        };
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().with_context(|| format!("missing value for `--{key}`"))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

/// Builds the resolved configuration and reports every problem at once.
pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut root = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            text.parse::<Table>().with_context(|| format!("parsing {}", path.display()))?
        }
        None => Table::new(),
    };
    for (k, v) in overrides {
        set_path(&mut root, k, parse_value(v)).with_context(|| format!("override `--{k}`"))?;
    }
    let master = match root.get("seed") {
        None => 0,
        Some(Value::Integer(s)) if *s >= 0 => *s as u64,
        Some(other) => bail!("seed must be a non-negative integer, got {other}"),
    };
    for (path, stream) in DERIVED_SEEDS {
        if !has_path(&root, path) {
            // TOML integers are signed; keep derived seeds in range.
            let seed = (derive_seed(master, *stream) >> 1) as i64;
            set_path(&mut root, path, Value::Integer(seed))?;
        }
    }
    let mut merged = Table::try_from(RunConfig::default()).expect("defaults serialise to TOML");
    merge(&mut merged, root);
    let cfg: RunConfig = Value::Table(merged).try_into().context("invalid configuration")?;
    let problems = cfg.violations();
    if !problems.is_empty() {
        bail!("invalid configuration:\n  - {}", problems.join("\n  - "));
    }
    Ok(cfg)
}

impl RunConfig {
    /// Every violated constraint across all sections, prefixed by section.
    pub fn violations(&self) -> Vec<String> {
        let mut all = Vec::new();
        let mut add = |section: &str, v: Vec<String>| all.extend(v.into_iter().map(|m| format!("{section}: {m}")));
        add("world", self.world.violations());
        add("data", self.data.violations());
        add("mle", self.mle.violations());
        add("reward", self.reward.violations());
        add("rlhf", self.rlhf.violations());
        add("decode", self.decode.violations());
        let mut extra = Vec::new();
        if self.oracle.pairs == 0 {
            extra.push("oracle: pairs must be positive".to_string());
        }
        if self.oracle.annotators == 0 {
            extra.push("oracle: annotators must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.oracle.flip_prob) {
            extra.push(format!("oracle: flip_prob must be in [0, 1], got {}", self.oracle.flip_prob));
        }
        if self.candidates.k == 0 || self.candidates.k > self.policy.vocab {
            extra.push(format!("candidates: k must be in 1..={}, got {}", self.policy.vocab, self.candidates.k));
        }
        if self.challenging.k == 0 {
            extra.push("challenging: k must be positive".to_string());
        }
        let world_vocab = Vocab::new(self.world.event_vocab_size).len();
        if self.policy.vocab != world_vocab {
            extra.push(format!(
                "policy: vocab must equal the world vocabulary size {world_vocab}, got {}",
                self.policy.vocab
            ));
        }
        all.extend(extra);
        all
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }
}
