//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dfl_core::network::NetworkSpec;
use dfl_core::training::{Criterion, LossWeights, OptimizerKind, TrainConfig};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Every accepted key with its default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("deterministic", "false"),
    ("out", "dfl-run"),
    ("data.source", "synth:biased"),
    ("data.path", ""),
    ("data.schema", ""),
    ("data.lenient", "false"),
    ("data.standardize", "true"),
    ("data.seed", "1"),
    ("data.n", "8000"),
    ("data.p", "8"),
    ("data.bias", "2.0"),
    ("data.noise_sd", "0.1"),
    ("data.split", "0.8,0.1,0.1"),
    ("data.stratify", "true"),
    ("data.test", "split"),
    ("data.test_n", "2000"),
    ("net.kind", "dense"),
    ("net.growth_rate", "8"),
    ("net.depth", "7"),
    ("net.reduction", "0.5"),
    ("net.hidden", "64"),
    ("train.criterion", "separation"),
    ("train.form", "alpha"),
    ("train.alpha", "0.5"),
    ("train.retain_target", "true"),
    ("train.lambda", "1.0"),
    ("train.mu", "1.0"),
    ("train.lr", "0.001"),
    ("train.epochs", "100"),
    ("train.batch_size", "128"),
    ("train.optimizer", "adam"),
    ("train.stratified_batches", "false"),
    ("eval.dc_max_samples", "2000"),
    ("sweep.alphas", "0.1,0.3,0.5,0.7,0.9"),
];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    SynthBiased,
    SynthToy,
    Csv { path: PathBuf, schema: PathBuf },
    Matrix { path: PathBuf },
}

/// Where the test split comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestSet {
    /// The third part of the seeded split.
    Split,
    /// A separate draw from the biased generator with a balanced (Z, Y)
    /// composition, so Y and Z are independent on the test data.
    Balanced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub lenient: bool,
    pub standardize: bool,
    pub seed: u64,
    pub n: usize,
    pub p: usize,
    pub bias: f64,
    pub noise_sd: f64,
    pub split: [f64; 3],
    pub stratify: bool,
    pub test: TestSet,
    pub test_n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    Dense,
    /// One-hidden-layer classifier trained with plain cross-entropy.
    Standard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub out: PathBuf,
    pub data: DataConfig,
    pub net_kind: NetKind,
    pub growth_rate: usize,
    pub depth: usize,
    pub reduction: f64,
    pub hidden: usize,
    pub train: TrainConfig,
    pub dc_max_samples: usize,
    pub sweep_alphas: Vec<f64>,
    resolved: BTreeMap<String, String>,
    base: PathBuf,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("line {}: expected `key = value`, got {line:?}", i + 1)))?;
        let k = k.trim();
        if !DEFAULTS.iter().any(|(d, _)| *d == k) {
            return Err(config_err(format!("line {}: unknown key {k:?}", i + 1)));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(config_err(format!("line {}: duplicate key {k:?}", i + 1)));
        }
    }
    Ok(out)
}

fn value<'a>(m: &'a BTreeMap<String, String>, key: &str) -> &'a str {
    m.get(key).map(String::as_str).expect("defaults cover every key")
}

fn num<T: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T, CliError> {
    let v = value(m, key);
    v.parse()
        .map_err(|_| config_err(format!("{key}: cannot parse {v:?}")))
}

fn flag(m: &BTreeMap<String, String>, key: &str) -> Result<bool, CliError> {
    match value(m, key) {
        "true" => Ok(true),
        "false" => Ok(false),
        v => Err(config_err(format!("{key}: expected true or false, got {v:?}"))),
    }
}

pub fn parse_list(key: &str, v: &str) -> Result<Vec<f64>, CliError> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| config_err(format!("{key}: cannot parse {s:?} as a number")))
        })
        .collect()
}

impl RunConfig {
    /// Reads a config file. Relative data paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::from_text(&text, base)
    }

    pub fn from_text(text: &str, base: &Path) -> Result<RunConfig, CliError> {
        RunConfig::from_pairs(parse_pairs(text)?, base)
    }

    pub fn from_pairs(pairs: BTreeMap<String, String>, base: &Path) -> Result<RunConfig, CliError> {
        let mut m: BTreeMap<String, String> = DEFAULTS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        for (k, v) in pairs {
            if !m.contains_key(&k) {
                return Err(config_err(format!("unknown key {k:?}")));
            }
            m.insert(k, v);
        }
        let resolve = |p: &str| -> PathBuf {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let need_path = |key: &str| -> Result<PathBuf, CliError> {
            let v = value(&m, key);
            if v.is_empty() {
                Err(config_err(format!("{key} is required for data.source = {}", value(&m, "data.source"))))
            } else {
                Ok(resolve(v))
            }
        };
        let source = match value(&m, "data.source") {
            "synth:biased" => DataSource::SynthBiased,
            "synth:toy" => DataSource::SynthToy,
            "csv" => DataSource::Csv {
                path: need_path("data.path")?,
                schema: need_path("data.schema")?,
            },
            "matrix" => DataSource::Matrix {
                path: need_path("data.path")?,
            },
            other => {
                return Err(config_err(format!(
                    "data.source: unknown source {other:?} (expected synth:biased, synth:toy, csv or matrix)"
                )))
            }
        };
        let split = parse_list("data.split", value(&m, "data.split"))?;
        let split: [f64; 3] = split
            .try_into()
            .map_err(|_| config_err("data.split needs three fractions"))?;
        let test = match value(&m, "data.test") {
            "split" => TestSet::Split,
            "balanced" => TestSet::Balanced,
            v => return Err(config_err(format!("data.test: expected split or balanced, got {v:?}"))),
        };
        if test == TestSet::Balanced && source != DataSource::SynthBiased {
            return Err(config_err("data.test = balanced requires data.source = synth:biased"));
        }
        let data = DataConfig {
            source,
            lenient: flag(&m, "data.lenient")?,
            standardize: flag(&m, "data.standardize")?,
            seed: num(&m, "data.seed")?,
            n: num(&m, "data.n")?,
            p: num(&m, "data.p")?,
            bias: num(&m, "data.bias")?,
            noise_sd: num(&m, "data.noise_sd")?,
            split,
            stratify: flag(&m, "data.stratify")?,
            test,
            test_n: num(&m, "data.test_n")?,
        };
        let net_kind = match value(&m, "net.kind") {
            "dense" => NetKind::Dense,
            "standard" => NetKind::Standard,
            v => return Err(config_err(format!("net.kind: expected dense or standard, got {v:?}"))),
        };
        let criterion = match value(&m, "train.criterion") {
            "independence" => Criterion::Independence,
            "separation" => Criterion::Separation,
            v => {
                return Err(config_err(format!(
                    "train.criterion: expected independence or separation, got {v:?}"
                )))
            }
        };
        let weights = match value(&m, "train.form") {
            "alpha" => LossWeights::Alpha {
                alpha: num(&m, "train.alpha")?,
                retain_target: flag(&m, "train.retain_target")?,
            },
            "lambda_mu" => LossWeights::LambdaMu {
                lambda: num(&m, "train.lambda")?,
                mu: num(&m, "train.mu")?,
            },
            v => return Err(config_err(format!("train.form: expected alpha or lambda_mu, got {v:?}"))),
        };
        let optimizer = match value(&m, "train.optimizer") {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd,
            v => return Err(config_err(format!("train.optimizer: expected adam or sgd, got {v:?}"))),
        };
        let seed: u64 = num(&m, "seed")?;
        let train = TrainConfig {
            criterion,
            weights,
            lr: num(&m, "train.lr")?,
            epochs: num(&m, "train.epochs")?,
            batch_size: num(&m, "train.batch_size")?,
            optimizer,
            seed,
            stratified_batches: flag(&m, "train.stratified_batches")?,
        };
        if net_kind == NetKind::Dense {
            train.validate().map_err(|e| config_err(e.to_string()))?;
        }
        let cfg = RunConfig {
            seed,
            deterministic: flag(&m, "deterministic")?,
            out: resolve(value(&m, "out")),
            data,
            net_kind,
            growth_rate: num(&m, "net.growth_rate")?,
            depth: num(&m, "net.depth")?,
            reduction: num(&m, "net.reduction")?,
            hidden: num(&m, "net.hidden")?,
            train,
            dc_max_samples: num(&m, "eval.dc_max_samples")?,
            sweep_alphas: parse_list("sweep.alphas", value(&m, "sweep.alphas"))?,
            resolved: m,
            base: base.to_path_buf(),
        };
        if cfg.hidden == 0 {
            return Err(config_err("net.hidden must be positive"));
        }
        Ok(cfg)
    }

    /// Applies a command-line override and re-validates.
    pub fn with_override(&self, key: &str, v: &str) -> Result<RunConfig, CliError> {
        let mut pairs = self.resolved.clone();
        if !pairs.contains_key(key) {
            return Err(config_err(format!("unknown key {key:?}")));
        }
        pairs.insert(key.to_string(), v.to_string());
        RunConfig::from_pairs(pairs, &self.base)
    }

    /// Every key with its effective value, one `key = value` line each,
    /// sorted by key.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.resolved {
            let v = match (k.as_str(), &self.data.source) {
                ("out", _) => self.out.display().to_string(),
                ("data.path", DataSource::Csv { path, .. } | DataSource::Matrix { path }) => path.display().to_string(),
                ("data.schema", DataSource::Csv { schema, .. }) => schema.display().to_string(),
                _ => v.clone(),
            };
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// SHA-256 of the resolved configuration excluding the output directory.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for line in self.resolved_text().lines() {
            if !line.starts_with("out = ") {
                h.update(line.as_bytes());
                h.update(b"\n");
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn network_spec(&self, p: usize, k: usize) -> NetworkSpec {
        NetworkSpec {
            input_dim: p,
            output_classes: k,
            growth_rate: self.growth_rate,
            depth: self.depth,
            reduction: self.reduction,
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.resolved.get(key).map(String::as_str)
    }
}

/// Default configuration text, as written by `dfl init`-style tooling and
/// used in docs.
pub fn default_text() -> String {
    DEFAULTS.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = RunConfig::from_text("", Path::new("/base")).unwrap();
        assert_eq!(cfg.data.source, DataSource::SynthBiased);
        assert_eq!(cfg.train.epochs, 100);
        assert_eq!(cfg.out, PathBuf::from("/base/dfl-run"));
        let again = RunConfig::from_text(&cfg.resolved_text(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again.resolved_text(), cfg.resolved_text());
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn unknown_and_malformed_keys() {
        let err = RunConfig::from_text("train.alpah = 0.3\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("train.alpah"));
        assert!(RunConfig::from_text("seed 3\n", Path::new(".")).is_err());
        assert!(RunConfig::from_text("seed = x\n", Path::new(".")).is_err());
        assert!(RunConfig::from_text("seed = 1\nseed = 2\n", Path::new(".")).is_err());
        assert!(RunConfig::from_text("train.alpha = 0\n", Path::new(".")).is_err());
        assert!(RunConfig::from_text("data.source = csv\n", Path::new(".")).is_err());
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = RunConfig::from_text("# run\nseed = 4 # trailing\ntrain.alpha = 0.25\n", Path::new(".")).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.seed, 4);
        let o = cfg.with_override("seed", "9").unwrap();
        assert_eq!(o.train.seed, 9);
        assert_ne!(o.hash(), cfg.hash());
        assert!(o.resolved_text().contains("train.alpha = 0.25\n"));
    }

    #[test]
    fn output_directory_does_not_change_hash() {
        let a = RunConfig::from_text("out = a\n", Path::new(".")).unwrap();
        let b = RunConfig::from_text("out = b\n", Path::new(".")).unwrap();
        assert_eq!(a.hash(), b.hash());
    }
}
