//! Flat `key=value` run configuration with dotted section keys.
//!
//! Every key has a default, so an empty file is a valid config. Values are
//! applied in order (defaults, file, `--set`, dedicated flags) and the fully
//! resolved set is written back as a snapshot that replays the run.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use poems_core::data::SynthSpec;
use poems_core::objective::TrainConfig;
use poems_core::verify::BenchSpec;
use poems_core::{Error, Result};

pub const DEFAULT_OUT: &str = "poems-out";
/// Cluster count for latent export when the data carry no labels.
pub const DEFAULT_CLUSTERS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// `(omic name, csv path)` in model order.
    pub omics: Vec<(String, PathBuf)>,
    pub labels: Option<PathBuf>,
    pub out: PathBuf,
    /// Model directory; `<out>/model` when unset.
    pub model_dir: Option<PathBuf>,
    pub train: TrainConfig,
    /// Split seed; follows `train.seed` when unset.
    pub split_seed: Option<u64>,
    pub eval_seeds: Vec<u64>,
    pub knn_k: usize,
    pub top_k: usize,
    pub clusters: usize,
    /// K-means seed for the latent export; follows `train.seed` when unset.
    pub interpret_seed: Option<u64>,
    pub synth: SynthSpec,
    pub bench: BenchSpec,
    /// Fail `bench` when the median speedup falls below this (0 disables).
    pub min_speedup: f64,
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            omics: Vec::new(),
            labels: None,
            out: PathBuf::from(DEFAULT_OUT),
            model_dir: None,
            train: TrainConfig::default(),
            split_seed: None,
            eval_seeds: poems_core::eval::DEFAULT_SEEDS.to_vec(),
            knn_k: poems_core::eval::DEFAULT_KNN_K,
            top_k: poems_core::interpret::DEFAULT_TOP_K,
            clusters: DEFAULT_CLUSTERS,
            interpret_seed: None,
            synth: SynthSpec::default(),
            bench: BenchSpec::default(),
            min_speedup: 0.0,
            parallel: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped; a
/// repeated key keeps the last value.
pub fn parse_kv(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("{origin}:{}: expected key=value, got {line:?}", i + 1)));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_kv_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_kv(&text, &path.display().to_string())
}

impl RunConfig {
    pub fn apply_all<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in pairs {
            self.apply(k, v)?;
        }
        Ok(())
    }

    /// Sets one key. Unknown keys are rejected so typos do not pass silently.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "data.omics" => {
                self.omics = Vec::new();
                for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let Some((name, path)) = item.split_once(':') else {
                        return Err(Error::Config(format!("data.omics: expected name:path, got {item:?}")));
                    };
                    self.omics.push((name.trim().to_string(), PathBuf::from(path.trim())));
                }
            }
            "data.labels" => self.labels = opt_path(value),
            "out" => self.out = PathBuf::from(value.trim()),
            "model.dir" => self.model_dir = opt_path(value),
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.latent_dim" => t.model.latent_dim = parse(key, value)?,
            "train.encoder_hidden" => t.model.encoder_hidden = parse_list(key, value)?,
            "train.gating_hidden" => t.model.gating_hidden = parse_list(key, value)?,
            "train.decoder_hidden" => t.model.decoder_hidden = parse_list(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.learning_rate" => t.learning_rate = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.patience" => t.patience = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.obs_variance_mode" => {
                t.learn_obs_variance = match value.trim() {
                    "fixed" => false,
                    "learned" => true,
                    other => {
                        return Err(Error::Config(format!(
                            "train.obs_variance_mode: expected fixed or learned, got {other:?}"
                        )))
                    }
                }
            }
            "train.obs_variance" => t.obs_variance = parse(key, value)?,
            "train.penalty_weight" => {
                t.penalty_weight = match value.trim() {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "train.log_every" => t.log_every = parse(key, value)?,
            "ssl.lambda0" => t.ssl.lambda0 = parse(key, value)?,
            "ssl.lambda1" => t.ssl.lambda1 = parse(key, value)?,
            "ssl.a" => t.ssl.a = parse(key, value)?,
            "ssl.b" => t.ssl.b = parse(key, value)?,
            "ssl.eta_init" => t.ssl.eta_init = parse(key, value)?,
            "split.seed" => {
                self.split_seed = match value.trim() {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "eval.seeds" => self.eval_seeds = parse_list(key, value)?,
            "eval.knn_k" => self.knn_k = parse(key, value)?,
            "interpret.top_k" => self.top_k = parse(key, value)?,
            "interpret.clusters" => self.clusters = parse(key, value)?,
            "interpret.seed" => {
                self.interpret_seed = match value.trim() {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "synth.samples" => self.synth.samples = parse(key, value)?,
            "synth.features" => self.synth.features = parse_list(key, value)?,
            "synth.latent_dim" => self.synth.latent_dim = parse(key, value)?,
            "synth.block_width" => self.synth.block_width = parse_list(key, value)?,
            "synth.classes" => self.synth.classes = parse(key, value)?,
            "synth.separation" => self.synth.separation = parse(key, value)?,
            "synth.noise_scale" => self.synth.noise_scale = parse(key, value)?,
            "synth.seed" => self.synth.seed = parse(key, value)?,
            "bench.samples" => self.bench.samples = parse(key, value)?,
            "bench.features" => self.bench.features = parse(key, value)?,
            "bench.latent_dim" => self.bench.latent_dim = parse(key, value)?,
            "bench.hidden" => self.bench.hidden = parse(key, value)?,
            "bench.repetitions" => self.bench.repetitions = parse(key, value)?,
            "bench.seed" => self.bench.seed = parse(key, value)?,
            "bench.min_speedup" => self.min_speedup = parse(key, value)?,
            "exec.parallel" => self.parallel = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let omics: Vec<String> = self.omics.iter().map(|(n, p)| format!("{n}:{}", p.display())).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("data.omics", omics.join(",")),
            ("data.labels", path_text(&self.labels)),
            ("out", self.out.display().to_string()),
            ("model.dir", path_text(&self.model_dir)),
            ("train.epochs", t.epochs.to_string()),
            ("train.latent_dim", t.model.latent_dim.to_string()),
            ("train.encoder_hidden", join(&t.model.encoder_hidden)),
            ("train.gating_hidden", join(&t.model.gating_hidden)),
            ("train.decoder_hidden", join(&t.model.decoder_hidden)),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.seed", t.seed.to_string()),
            (
                "train.obs_variance_mode",
                if t.learn_obs_variance { "learned" } else { "fixed" }.to_string(),
            ),
            ("train.obs_variance", t.obs_variance.to_string()),
            (
                "train.penalty_weight",
                t.penalty_weight.map_or("auto".to_string(), |w| w.to_string()),
            ),
            ("train.log_every", t.log_every.to_string()),
            ("ssl.lambda0", t.ssl.lambda0.to_string()),
            ("ssl.lambda1", t.ssl.lambda1.to_string()),
            ("ssl.a", t.ssl.a.to_string()),
            ("ssl.b", t.ssl.b.to_string()),
            ("ssl.eta_init", t.ssl.eta_init.to_string()),
            ("split.seed", self.split_seed.map_or("auto".to_string(), |s| s.to_string())),
            ("eval.seeds", join(&self.eval_seeds)),
            ("eval.knn_k", self.knn_k.to_string()),
            ("interpret.top_k", self.top_k.to_string()),
            ("interpret.clusters", self.clusters.to_string()),
            ("interpret.seed", self.interpret_seed.map_or("auto".to_string(), |s| s.to_string())),
            ("synth.samples", self.synth.samples.to_string()),
            ("synth.features", join(&self.synth.features)),
            ("synth.latent_dim", self.synth.latent_dim.to_string()),
            ("synth.block_width", join(&self.synth.block_width)),
            ("synth.classes", self.synth.classes.to_string()),
            ("synth.separation", self.synth.separation.to_string()),
            ("synth.noise_scale", self.synth.noise_scale.to_string()),
            ("synth.seed", self.synth.seed.to_string()),
            ("bench.samples", self.bench.samples.to_string()),
            ("bench.features", self.bench.features.to_string()),
            ("bench.latent_dim", self.bench.latent_dim.to_string()),
            ("bench.hidden", self.bench.hidden.to_string()),
            ("bench.repetitions", self.bench.repetitions.to_string()),
            ("bench.seed", self.bench.seed.to_string()),
            ("bench.min_speedup", self.min_speedup.to_string()),
            ("exec.parallel", self.parallel.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn snapshot(&self) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn model_dir(&self) -> PathBuf {
        self.model_dir.clone().unwrap_or_else(|| self.out.join("model"))
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.train.seed)
    }

    pub fn interpret_seed(&self) -> u64 {
        self.interpret_seed.unwrap_or(self.train.seed)
    }

    /// Checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.knn_k == 0 {
            return Err(Error::Config("eval.knn_k must be positive".into()));
        }
        if self.eval_seeds.is_empty() {
            return Err(Error::Config("eval.seeds must not be empty".into()));
        }
        if self.top_k == 0 || self.clusters == 0 {
            return Err(Error::Config("interpret.top_k and interpret.clusters must be positive".into()));
        }
        Ok(())
    }
}

/// Loads a config: defaults, then `base` (e.g. a stored snapshot), then the
/// file at `path`, then `overrides` in order.
pub fn resolve(base: &[(String, String)], path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let as_str = |v: &[(String, String)]| v.iter().map(|(k, v)| (k.clone(), v.clone())).collect::<Vec<_>>();
    let mut pairs = as_str(base);
    if let Some(p) = path {
        pairs.extend(read_kv_file(p)?);
    }
    pairs.extend(as_str(overrides));
    cfg.apply_all(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    Ok(cfg)
}

/// Stored snapshot keys that describe the run rather than where it was
/// written; a later command with a different `--out` should not inherit them.
pub fn replayable(stored: &BTreeMap<String, String>) -> Vec<(String, String)> {
    stored
        .iter()
        .filter(|(k, _)| !matches!(k.as_str(), "out" | "model.dir"))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}
