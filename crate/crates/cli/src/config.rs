//! Run configuration: one TOML file, merged over defaults, with every key
//! checked against the schema before deserialization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sidrec::corpusgen::{MixtureSpec, TeacherConfig};
use sidrec::dataio::SynthConfig;
use sidrec::evalharness::{EvalConfig, ReasoningMode};
use sidrec::grpo::GrpoConfig;
use sidrec::policy::{PolicyConfig, SftSchedule};
use sidrec::quantizer::RqVaeConfig;
use toml::Value;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Files,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DataSource,
    /// Catalog JSON-lines (`source = "files"`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<PathBuf>,
    /// Interactions CSV or JSON-lines (`source = "files"`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interactions: Option<PathBuf>,
    pub synth: SynthConfig,
    /// Minimum interactions per user and per item; 0 disables filtering.
    pub kcore: usize,
    pub max_history: usize,
    /// Train / val / test shares.
    pub split: [f64; 3],
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            catalog: None,
            interactions: None,
            synth: SynthConfig::default(),
            kcore: 0,
            max_history: 10,
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub mixture: MixtureSpec,
    /// Words seen fewer times map to `<unk>`.
    pub min_word_freq: usize,
    /// Enrichment comes from templates unless a teacher is configured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<TeacherConfig>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            mixture: MixtureSpec::default(),
            min_word_freq: 1,
            teacher: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub model: PolicyConfig,
    pub align: SftSchedule,
    pub activate: SftSchedule,
    /// Validation examples used for early stopping during alignment.
    pub probes: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            model: PolicyConfig::default(),
            align: SftSchedule::default(),
            activate: SftSchedule {
                max_epochs: 1,
                ..SftSchedule::default()
            },
            probes: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub ns: Vec<usize>,
    pub beam_width: usize,
    pub temperature: f64,
    pub max_reasoning_tokens: usize,
    pub constrained: bool,
    /// Reasoning modes reported for every checkpoint.
    pub modes: Vec<ReasoningMode>,
    /// Rollouts per held-out example for the mean-reward comparison.
    pub reward_samples: usize,
    /// Cap on test examples (0 = all).
    pub max_examples: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            ks: e.ks,
            ns: e.ns,
            beam_width: e.beam_width,
            temperature: e.temperature,
            max_reasoning_tokens: e.max_reasoning_tokens,
            constrained: e.constrained,
            modes: vec![ReasoningMode::None, ReasoningMode::Greedy, ReasoningMode::Sampled],
            reward_samples: 4,
            max_examples: 0,
            seed: e.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; every section's `seed` is a salt mixed with it.
    pub seed: u64,
    pub run_dir: PathBuf,
    pub dataset: DatasetSection,
    pub quantizer: RqVaeConfig,
    pub corpus: CorpusSection,
    pub policy: PolicySection,
    pub rl: GrpoConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            run_dir: PathBuf::from("runs/default"),
            dataset: DatasetSection::default(),
            quantizer: RqVaeConfig::default(),
            corpus: CorpusSection::default(),
            policy: PolicySection::default(),
            rl: GrpoConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Mixes the global seed with a section salt.
pub fn derive_seed(global: u64, salt: u64) -> u64 {
    let mut z = global.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    Value::try_from(v).expect("config sections serialize to TOML")
}

/// Default values, with every optional table present, used to check keys.
fn schema() -> Value {
    let mut full = RunConfig::default();
    full.dataset.catalog = Some(PathBuf::new());
    full.dataset.interactions = Some(PathBuf::new());
    full.corpus.teacher = Some(TeacherConfig::default());
    let mut v = to_value(&full);
    if let Some(t) = v.get_mut("dataset").and_then(|d| d.get_mut("synth")).and_then(Value::as_table_mut) {
        t.insert("transition_matrix".into(), Value::Array(Vec::new()));
    }
    v
}

fn unknown_key(path: &str, key: &str, allowed: &toml::map::Map<String, Value>) -> CliError {
    let location = if path.is_empty() { key.to_string() } else { format!("{path}.{key}") };
    let best = allowed
        .keys()
        .map(|k| (strsim::jaro_winkler(key, k), k))
        .filter(|(s, _)| *s > 0.8)
        .max_by(|a, b| a.0.total_cmp(&b.0));
    let hint = match best {
        Some((_, k)) if path.is_empty() => format!("; did you mean `{k}`?"),
        Some((_, k)) => format!("; did you mean `{path}.{k}`?"),
        None => String::new(),
    };
    CliError::Validation(format!("unknown config key `{location}`{hint}"))
}

fn check_keys(user: &Value, schema: &Value, path: &str) -> Result<(), CliError> {
    let (Value::Table(u), Value::Table(s)) = (user, schema) else {
        return Ok(());
    };
    for (k, v) in u {
        let Some(sv) = s.get(k) else {
            return Err(unknown_key(path, k, s));
        };
        let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        check_keys(v, sv, &sub)?;
    }
    Ok(())
}

/// Deep merge of `over` into `base`; a table missing from `base` starts
/// from the schema's defaults.
fn merge(base: &mut Value, over: Value, schema: &Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                let sk = schema.get(&k).cloned().unwrap_or(Value::Boolean(false));
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sk),
                    None => {
                        let mut slot = if v.is_table() && sk.is_table() { sk.clone() } else { v.clone() };
                        if slot.is_table() {
                            merge(&mut slot, v, &sk);
                        }
                        b.insert(k, slot);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parses `key=value`; the value is read as a TOML literal, falling back to
/// a bare string.
fn parse_override(spec: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("--set `{spec}`: expected key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::Validation(format!("--set `{spec}`: empty key")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    Ok((key.split('.').map(str::to_string).collect(), value))
}

fn nest(path: &[String], value: Value) -> Value {
    path.iter().rev().fold(value, |acc, k| {
        let mut t = toml::map::Map::new();
        t.insert(k.clone(), acc);
        Value::Table(t)
    })
}

impl RunConfig {
    /// Loads `path` (or defaults), applies `--set` overrides and flags, and
    /// validates. Relative data paths resolve against the config's directory.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>, run_dir: Option<&Path>) -> Result<Self, CliError> {
        let schema = schema();
        let mut merged = to_value(&RunConfig::default());
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", p.display())))?;
            let user: Value = toml::from_str::<toml::Table>(&text)
                .map(Value::Table)
                .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            check_keys(&user, &schema, "")?;
            merge(&mut merged, user, &schema);
        }
        for spec in overrides {
            let (keys, value) = parse_override(spec)?;
            let v = nest(&keys, value);
            check_keys(&v, &schema, "")?;
            merge(&mut merged, v, &schema);
        }
        let mut cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(format!("invalid config: {}", e.message())))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(d) = run_dir {
            cfg.run_dir = d.to_path_buf();
        }
        if let Some(base) = path.and_then(Path::parent) {
            for p in [&mut cfg.dataset.catalog, &mut cfg.dataset.interactions].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |r: Result<(), String>| r.map_err(CliError::Validation);
        if self.dataset.source == DataSource::Files {
            for (name, p) in [("dataset.catalog", &self.dataset.catalog), ("dataset.interactions", &self.dataset.interactions)] {
                match p {
                    None => return Err(CliError::Validation(format!("`{name}` is required when dataset.source = \"files\""))),
                    Some(p) if !p.exists() => return Err(CliError::Validation(format!("`{name}`: {} does not exist", p.display()))),
                    _ => {}
                }
            }
        }
        if self.dataset.max_history == 0 {
            return Err(CliError::Validation("dataset.max_history must be positive".into()));
        }
        v(self.quantizer.validate().map_err(|e| format!("quantizer: {e}")))?;
        v(self.policy.model.validate().map_err(|e| format!("policy.model: {e}")))?;
        v(self.rl.validate().map_err(|e| format!("rl: {e}")))?;
        v(self.eval_config().validate().map_err(|e| format!("eval: {e}")))?;
        if self.eval.modes.is_empty() {
            return Err(CliError::Validation("eval.modes must name at least one mode".into()));
        }
        Ok(())
    }

    /// Seeds of every section mixed with the global seed.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        let g = self.seed;
        c.dataset.synth.seed = derive_seed(g, self.dataset.synth.seed);
        c.quantizer.seed = derive_seed(g, self.quantizer.seed);
        c.corpus.mixture.seed = derive_seed(g, self.corpus.mixture.seed);
        c.policy.model.seed = derive_seed(g, self.policy.model.seed);
        c.policy.align.seed = derive_seed(g, self.policy.align.seed);
        c.policy.activate.seed = derive_seed(g, self.policy.activate.seed);
        c.rl.seed = derive_seed(g, self.rl.seed);
        c.eval.seed = derive_seed(g, self.eval.seed);
        c
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            ks: self.eval.ks.clone(),
            ns: self.eval.ns.clone(),
            beam_width: self.eval.beam_width,
            temperature: self.eval.temperature,
            max_reasoning_tokens: self.eval.max_reasoning_tokens,
            constrained: self.eval.constrained,
            lambda: self.rl.lambda,
            seed: self.eval.seed,
        }
    }

    /// SHA-256 of the named sections (plus the global seed) as JSON; the run
    /// directory never enters a hash.
    pub fn section_hash(&self, sections: &[&str]) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("object");
        obj.remove("run_dir");
        let mut picked = serde_json::Map::new();
        picked.insert("seed".into(), obj["seed"].clone());
        for s in sections {
            let mut cur = &*obj.get(s.split('.').next().unwrap_or(s)).unwrap_or(&serde_json::Value::Null);
            for part in s.split('.').skip(1) {
                cur = cur.get(part).unwrap_or(&serde_json::Value::Null);
            }
            picked.insert((*s).to_string(), cur.clone());
        }
        sha256_hex(serde_json::to_string(&picked).expect("json").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
