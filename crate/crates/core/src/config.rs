//! Run configuration as flat `key = value` text with dotted keys.
//!
//! ```text
//! # openslot.config/1
//! seed = 0
//! ans.alpha = 0.5
//! bench.kkc = 0,1,2,3,4,5
//! ```
//!
//! Keys mirror the serialized [`RunConfig`]; arrays are comma separated.
//! Every key can also be overridden from the command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};

use crate::ans::{AnsConfig, ClsTrainConfig, LabelMode, Method};
use crate::bench::BenchmarkConfig;
use crate::error::{Error, Result};
use crate::optim::LrSchedule;
use crate::osod::OsodConfig;
use crate::pipeline::ScoringConfig;
use crate::scoring::{ScoreMetric, Scheme};
use crate::slot::{PretrainConfig, SlotModelConfig};

pub const CONFIG_SCHEMA: &str = "openslot.config/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub heads: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data/bench".into(),
            checkpoint: "runs/backbone.ckpt".into(),
            heads: "runs/heads.ckpt".into(),
            output_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    All,
    Selective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringSection {
    pub metric: ScoreMetric,
    pub scheme: SchemeKind,
    pub gamma: f64,
}

impl Default for ScoringSection {
    fn default() -> Self {
        Self {
            metric: ScoreMetric::Energy,
            scheme: SchemeKind::All,
            gamma: 0.75,
        }
    }
}

impl ScoringSection {
    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            metric: self.metric,
            scheme: match self.scheme {
                SchemeKind::All => Scheme::All,
                SchemeKind::Selective => Scheme::Selective { gamma: self.gamma },
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Single,
    Multi,
}

impl From<ModeName> for LabelMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::Single => LabelMode::Single,
            ModeName::Multi => LabelMode::Multi,
        }
    }
}

/// Classifier training section; the defaults are the single-label recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClsSection {
    pub mode: ModeName,
    pub method: Method,
    pub lr: f64,
    pub halve_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
}

impl Default for ClsSection {
    fn default() -> Self {
        Self::from_train_config(ModeName::Single, &ClsTrainConfig::single_label())
    }
}

impl ClsSection {
    pub fn from_train_config(mode: ModeName, c: &ClsTrainConfig) -> Self {
        Self {
            mode,
            method: c.method,
            lr: c.schedule.base,
            halve_every: c.schedule.halve_every,
            epochs: c.schedule.epochs,
            batch_size: c.batch_size,
            hidden: c.hidden,
        }
    }

    pub fn train_config(&self) -> ClsTrainConfig {
        ClsTrainConfig {
            schedule: LrSchedule {
                base: self.lr,
                halve_every: self.halve_every,
                epochs: self.epochs,
            },
            batch_size: self.batch_size,
            hidden: self.hidden,
            method: self.method,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub bench: BenchmarkConfig,
    pub model: SlotModelConfig,
    pub pretrain: PretrainConfig,
    pub ans: AnsConfig,
    pub cls: ClsSection,
    pub scoring: ScoringSection,
    pub osod: OsodConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ans.validate()?;
        for (k, v) in [
            ("scoring.gamma", self.scoring.gamma),
            ("osod.fg_threshold", self.osod.fg_threshold),
            ("osod.binarize", self.osod.binarize),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{k} = {v} must lie in (0, 1)")));
            }
        }
        if !(self.cls.lr > 0.0 && self.cls.lr.is_finite()) || self.cls.epochs == 0 || self.cls.batch_size == 0 {
            return Err(Error::Config("cls.lr, cls.epochs and cls.batch_size must be positive".into()));
        }
        if !(self.pretrain.learning_rate > 0.0) || self.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain.learning_rate and pretrain.batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Flattened `(key, value)` pairs in key order.
    pub fn to_pairs(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self)?, &mut out)?;
        Ok(out)
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = format!("# {CONFIG_SCHEMA}\n");
        for (k, v) in self.to_pairs()? {
            s.push_str(&format!("{k} = {v}\n"));
        }
        Ok(s)
    }

    /// Applies `key = value` overrides on top of `self`. Unknown keys and
    /// values of the wrong type are errors.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for (key, raw) in pairs {
            let slot = lookup(&mut root, key)?;
            *slot = parse_like(slot, raw.trim(), key)?;
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Parses config text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        RunConfig::default().with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(d) => Error::Format {
                path: path.to_path_buf(),
                what: "config",
                detail: d,
            },
            other => other,
        })
    }

    pub fn label_mode(&self) -> LabelMode {
        self.cls.mode.into()
    }
}

/// `key = value` lines; `#` starts a comment line. The schema line, when
/// present, must match.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(c) = line.strip_prefix('#') {
            let c = c.trim();
            if c.starts_with("openslot.config/") && c != CONFIG_SCHEMA {
                return Err(Error::Config(format!("unsupported schema `{c}`, expected {CONFIG_SCHEMA}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) -> Result<()> {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out)?;
            }
        }
        Value::Array(items) => {
            let parts: Vec<String> = items
                .iter()
                .map(|x| scalar_text(x, prefix))
                .collect::<Result<_>>()?;
            out.insert(prefix.to_string(), parts.join(","));
        }
        other => {
            out.insert(prefix.to_string(), scalar_text(other, prefix)?);
        }
    }
    Ok(())
}

fn scalar_text(v: &Value, key: &str) -> Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        _ => Err(Error::Config(format!("{key}: nested value cannot be flattened"))),
    }
}

fn lookup<'v>(root: &'v mut Value, key: &str) -> Result<&'v mut Value> {
    let mut cur = root;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(map) => map
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        };
    }
    if cur.is_object() {
        return Err(Error::Config(format!("`{key}` is a section, not a key")));
    }
    Ok(cur)
}

fn parse_like(template: &Value, raw: &str, key: &str) -> Result<Value> {
    let bad = |what: &str| Error::Config(format!("{key}: `{raw}` is not {what}"));
    match template {
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| bad("a boolean")),
        Value::Number(n) => {
            if n.is_u64() {
                raw.parse::<u64>().map(|v| Value::Number(v.into())).map_err(|_| bad("an unsigned integer"))
            } else if n.is_i64() {
                raw.parse::<i64>().map(|v| Value::Number(v.into())).map_err(|_| bad("an integer"))
            } else {
                let f: f64 = raw.parse().map_err(|_| bad("a number"))?;
                Number::from_f64(f).map(Value::Number).ok_or_else(|| bad("a finite number"))
            }
        }
        Value::Array(items) => {
            if raw.is_empty() {
                return Ok(Value::Array(Vec::new()));
            }
            let elem = items.first().cloned().unwrap_or(Value::Number(0u64.into()));
            raw.split(',')
                .map(|p| parse_like(&elem, p.trim(), key))
                .collect::<Result<Vec<_>>>()
                .map(Value::Array)
        }
        Value::Null => Ok(Value::String(raw.to_string())),
        Value::Object(_) => Err(Error::Config(format!("`{key}` is a section"))),
    }
}

/// Parses `--key value` / `--key=value` pairs, as used by the CLI.
pub fn overrides_from_args(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(k) = a.strip_prefix("--") else {
            return Err(Error::Config(format!("unexpected argument `{a}`")));
        };
        if let Some((k, v)) = k.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else {
            let v = it
                .next()
                .ok_or_else(|| Error::Config(format!("--{k} needs a value")))?;
            out.push((k.to_string(), v.clone()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_text().unwrap();
        assert!(text.starts_with("# openslot.config/1"));
        assert!(text.contains("ans.alpha = 0.5\n"));
        assert!(text.contains("bench.kkc = 0,1,2,3,4,5\n"));
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::parse("ans.beta = 0.25\nscoring.metric = msp\ncls.method = pure_slot\nbench.uuc = 6,7").unwrap();
        assert_eq!(cfg.ans.beta, 0.25);
        assert_eq!(cfg.scoring.metric, ScoreMetric::Msp);
        assert_eq!(cfg.cls.method, Method::PureSlot);
        assert_eq!(cfg.bench.uuc, vec![6, 7]);
        let u = RunConfig::parse("ans.null_target = uniform").unwrap();
        assert_eq!(u.ans.null_target, crate::ans::NullTarget::Uniform);
        assert!(RunConfig::parse("ans.nope = 1").is_err());
        assert!(RunConfig::parse("ans = 1").is_err());
        assert!(RunConfig::parse("seed = -3").is_err());
        assert!(RunConfig::parse("scoring.metric = knn").is_err());
        assert!(RunConfig::parse("# openslot.config/9\nseed = 1").is_err());
    }

    #[test]
    fn single_label_defaults() {
        let c = RunConfig::default().cls;
        assert_eq!((c.lr, c.halve_every, c.epochs), (4e-4, 40, 200));
    }

    #[test]
    fn thresholds_validated() {
        let mut c = RunConfig::default();
        c.validate().unwrap();
        c.scoring.gamma = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn arg_overrides() {
        let args: Vec<String> = ["--ans.alpha", "0.25", "--seed=4"].iter().map(|s| s.to_string()).collect();
        let o = overrides_from_args(&args).unwrap();
        assert_eq!(o, vec![("ans.alpha".into(), "0.25".into()), ("seed".into(), "4".into())]);
        assert!(overrides_from_args(&["--x".to_string()]).is_err());
    }
}
