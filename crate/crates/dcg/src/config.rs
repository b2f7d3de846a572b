//! Flat `key = value` configuration with dotted section prefixes.
//!
//! Every key has a default. The canonical rendering lists all keys sorted,
//! and its SHA-256 is the config hash stamped into every output file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dcg_core::corpus::WorldConfig;
use dcg_core::encoder::SimilarityMode;
use dcg_core::oracle::TheoremConfig;
use dcg_core::samplers::ProposalKind;
use dcg_core::trainer::{TrainConfig, TrainMode};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: cannot parse {value:?}: {message}")]
    Value {
        key: String,
        value: String,
        message: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Full,
    Sampled,
    Both,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Full => "full",
            Protocol::Sampled => "sampled",
            Protocol::Both => "both",
        }
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Protocol::Full),
            "sampled" => Ok(Protocol::Sampled),
            "both" => Ok(Protocol::Both),
            _ => Err("expected full, sampled or both".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    pub protocol: Protocol,
    /// Popularity-sampled negatives per user in the sampled protocol.
    pub sampled_negatives: usize,
    /// Clicks drawn per test user from true relevance under uniform exposure.
    pub truth_clicks: usize,
    pub histogram_buckets: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 50,
            protocol: Protocol::Both,
            sampled_negatives: 100,
            truth_clicks: 10,
            histogram_buckets: 10,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub coordinates: usize,
    pub epsilon: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 3,
            coordinates: 100,
            epsilon: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub items: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            items: 10_000,
            steps: 3,
            seed: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub theorem: TheoremConfig,
    pub gradcheck: GradcheckConfig,
    pub bench: BenchConfig,
    /// Directory holding `catalog.tsv`, `interactions.tsv` and `truth.jsonl`.
    /// Defaults to the output directory.
    pub data_dir: Option<PathBuf>,
    pub workers: usize,
    /// Exponent used when `sampler.kind = popularity`.
    pub sampler_alpha: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            theorem: TheoremConfig::default(),
            gradcheck: GradcheckConfig::default(),
            bench: BenchConfig::default(),
            data_dir: None,
            workers: 1,
            sampler_alpha: 0.75,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        message: e.to_string(),
    })
}

fn similarity_name(s: &str) -> Result<SimilarityMode, String> {
    match s {
        "inner_product" => Ok(SimilarityMode::InnerProduct),
        "cosine" => Ok(SimilarityMode::Cosine),
        _ => Err("expected inner_product or cosine".into()),
    }
}

fn sampler_name(kind: ProposalKind) -> &'static str {
    match kind {
        ProposalKind::Uniform => "uniform",
        ProposalKind::Unigram => "unigram",
        ProposalKind::Popularity { .. } => "popularity",
    }
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Seed override: every seeded section takes the same seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.world.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self.theorem.seed = seed;
        self.gradcheck.seed = seed;
        self.bench.seed = seed;
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let w = &mut self.world;
        let t = &mut self.train;
        let th = &mut self.theorem;
        match key {
            "world.num_items" => w.num_items = parse(key, v)?,
            "world.num_users" => w.num_users = parse(key, v)?,
            "world.relevance_rank" => w.relevance_rank = parse(key, v)?,
            "world.relevance_sharpness" => w.relevance_sharpness = parse(key, v)?,
            "world.exposure_skew" => w.exposure_skew = parse(key, v)?,
            "world.slate_size" => w.slate_size = parse(key, v)?,
            "world.interactions_per_user" => w.interactions_per_user = parse(key, v)?,
            "world.seed" => w.seed = parse(key, v)?,
            "train.mode" => t.mode = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.negatives" => t.negatives = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.max_prefix_len" => t.max_prefix_len = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.workers" => self.workers = parse(key, v)?,
            "optimizer.kind" => t.optimizer.kind = parse(key, v)?,
            "optimizer.learning_rate" => t.optimizer.learning_rate = parse(key, v)?,
            "optimizer.beta1" => t.optimizer.beta1 = parse(key, v)?,
            "optimizer.beta2" => t.optimizer.beta2 = parse(key, v)?,
            "optimizer.eps" => t.optimizer.eps = parse(key, v)?,
            "encoder.dim" => t.encoder.dim = parse(key, v)?,
            "encoder.similarity" => {
                t.encoder.similarity = similarity_name(v).map_err(|message| ConfigError::Value {
                    key: key.into(),
                    value: v.into(),
                    message,
                })?
            }
            "encoder.temperature" => t.encoder.temperature = parse(key, v)?,
            "encoder.decay" => t.encoder.decay = parse(key, v)?,
            "encoder.init_scale" => t.encoder.init_scale = parse(key, v)?,
            "sampler.kind" => {
                t.proposal = match v {
                    "uniform" => ProposalKind::Uniform,
                    "unigram" => ProposalKind::Unigram,
                    "popularity" => ProposalKind::Popularity {
                        alpha: self.sampler_alpha,
                    },
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            value: v.into(),
                            message: "expected uniform, unigram or popularity".into(),
                        })
                    }
                }
            }
            "sampler.alpha" => {
                self.sampler_alpha = parse(key, v)?;
                if let ProposalKind::Popularity { alpha } = &mut t.proposal {
                    *alpha = self.sampler_alpha;
                }
            }
            "queue.capacity" => t.queue_capacity = parse(key, v)?,
            "queue.cached" => {
                let cached: bool = parse(key, v)?;
                if t.mode.uses_queue() {
                    t.mode = if cached {
                        TrainMode::ClrecQueueCached
                    } else {
                        TrainMode::ClrecQueue
                    };
                }
            }
            "u2u.enabled" => t.u2u.enabled = parse(key, v)?,
            "u2u.weight" => t.u2u.weight = parse(key, v)?,
            "u2u.min_prefix" => t.u2u.min_prefix = parse(key, v)?,
            "u2u.min_suffix" => t.u2u.min_suffix = parse(key, v)?,
            "u2u.queue_capacity" => t.u2u.queue_capacity = parse(key, v)?,
            "ipw.clip_floor" => t.clip_floor = parse(key, v)?,
            "eval.k" => {
                self.eval.k = parse(key, v)?;
                t.eval_k = self.eval.k;
            }
            "eval.protocol" => self.eval.protocol = parse(key, v)?,
            "eval.sampled_negatives" => self.eval.sampled_negatives = parse(key, v)?,
            "eval.truth_clicks" => self.eval.truth_clicks = parse(key, v)?,
            "eval.histogram_buckets" => self.eval.histogram_buckets = parse(key, v)?,
            "eval.seed" => self.eval.seed = parse(key, v)?,
            "theorem.instances" => th.instances = parse(key, v)?,
            "theorem.contexts" => th.contexts = parse(key, v)?,
            "theorem.items" => th.items = parse(key, v)?,
            "theorem.min_prob" => th.min_prob = parse(key, v)?,
            "theorem.negatives" => th.negatives = parse(key, v)?,
            "theorem.steps" => th.steps = parse(key, v)?,
            "theorem.lr_start" => th.lr_start = parse(key, v)?,
            "theorem.lr_end" => th.lr_end = parse(key, v)?,
            "theorem.average_from" => th.average_from = parse(key, v)?,
            "theorem.tv_tolerance" => th.tv_tolerance = parse(key, v)?,
            "theorem.agreement_tolerance" => th.agreement_tolerance = parse(key, v)?,
            "theorem.ipw_kl_tolerance" => th.ipw_kl_tolerance = parse(key, v)?,
            "theorem.seed" => th.seed = parse(key, v)?,
            "gradcheck.seed" => self.gradcheck.seed = parse(key, v)?,
            "gradcheck.coordinates" => self.gradcheck.coordinates = parse(key, v)?,
            "gradcheck.epsilon" => self.gradcheck.epsilon = parse(key, v)?,
            "gradcheck.tolerance" => self.gradcheck.tolerance = parse(key, v)?,
            "bench.items" => self.bench.items = parse(key, v)?,
            "bench.steps" => self.bench.steps = parse(key, v)?,
            "bench.seed" => self.bench.seed = parse(key, v)?,
            "data.dir" => self.data_dir = Some(PathBuf::from(v)),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Every key with its resolved value.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let w = &self.world;
        let t = &self.train;
        let th = &self.theorem;
        let s = |x: &dyn Display| x.to_string();
        BTreeMap::from([
            ("world.num_items", s(&w.num_items)),
            ("world.num_users", s(&w.num_users)),
            ("world.relevance_rank", s(&w.relevance_rank)),
            ("world.relevance_sharpness", s(&w.relevance_sharpness)),
            ("world.exposure_skew", s(&w.exposure_skew)),
            ("world.slate_size", s(&w.slate_size)),
            ("world.interactions_per_user", s(&w.interactions_per_user)),
            ("world.seed", s(&w.seed)),
            ("train.mode", t.mode.name().into()),
            ("train.batch_size", s(&t.batch_size)),
            ("train.negatives", s(&t.negatives)),
            ("train.epochs", s(&t.epochs)),
            ("train.max_prefix_len", s(&t.max_prefix_len)),
            ("train.seed", s(&t.seed)),
            ("train.workers", s(&self.workers)),
            ("optimizer.kind", t.optimizer.kind.name().into()),
            ("optimizer.learning_rate", s(&t.optimizer.learning_rate)),
            ("optimizer.beta1", s(&t.optimizer.beta1)),
            ("optimizer.beta2", s(&t.optimizer.beta2)),
            ("optimizer.eps", s(&t.optimizer.eps)),
            ("encoder.dim", s(&t.encoder.dim)),
            ("encoder.similarity", t.encoder.similarity.name().into()),
            ("encoder.temperature", s(&t.encoder.temperature)),
            ("encoder.decay", s(&t.encoder.decay)),
            ("encoder.init_scale", s(&t.encoder.init_scale)),
            ("sampler.kind", sampler_name(t.proposal).into()),
            ("sampler.alpha", s(&self.sampler_alpha)),
            ("queue.capacity", s(&t.queue_capacity)),
            ("u2u.enabled", s(&t.u2u.enabled)),
            ("u2u.weight", s(&t.u2u.weight)),
            ("u2u.min_prefix", s(&t.u2u.min_prefix)),
            ("u2u.min_suffix", s(&t.u2u.min_suffix)),
            ("u2u.queue_capacity", s(&t.u2u.queue_capacity)),
            ("ipw.clip_floor", s(&t.clip_floor)),
            ("eval.k", s(&self.eval.k)),
            ("eval.protocol", self.eval.protocol.name().into()),
            ("eval.sampled_negatives", s(&self.eval.sampled_negatives)),
            ("eval.truth_clicks", s(&self.eval.truth_clicks)),
            ("eval.histogram_buckets", s(&self.eval.histogram_buckets)),
            ("eval.seed", s(&self.eval.seed)),
            ("theorem.instances", s(&th.instances)),
            ("theorem.contexts", s(&th.contexts)),
            ("theorem.items", s(&th.items)),
            ("theorem.min_prob", s(&th.min_prob)),
            ("theorem.negatives", s(&th.negatives)),
            ("theorem.steps", s(&th.steps)),
            ("theorem.lr_start", s(&th.lr_start)),
            ("theorem.lr_end", s(&th.lr_end)),
            ("theorem.average_from", s(&th.average_from)),
            ("theorem.tv_tolerance", s(&th.tv_tolerance)),
            ("theorem.agreement_tolerance", s(&th.agreement_tolerance)),
            ("theorem.ipw_kl_tolerance", s(&th.ipw_kl_tolerance)),
            ("theorem.seed", s(&th.seed)),
            ("gradcheck.seed", s(&self.gradcheck.seed)),
            ("gradcheck.coordinates", s(&self.gradcheck.coordinates)),
            ("gradcheck.epsilon", s(&self.gradcheck.epsilon)),
            ("gradcheck.tolerance", s(&self.gradcheck.tolerance)),
            ("bench.items", s(&self.bench.items)),
            ("bench.steps", s(&self.bench.steps)),
            ("bench.seed", s(&self.bench.seed)),
            (
                "data.dir",
                self.data_dir
                    .as_ref()
                    .map_or("-".into(), |p| p.display().to_string()),
            ),
        ])
    }

    pub fn canonical(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Hex SHA-256 of [`Self::canonical`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: dcg_core::Error| ConfigError::Invalid(e.to_string());
        self.world.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        if self.workers == 0 {
            return Err(ConfigError::Invalid(
                "train.workers must be positive".into(),
            ));
        }
        if self.eval.k == 0 || self.eval.histogram_buckets == 0 {
            return Err(ConfigError::Invalid(
                "eval.k and eval.histogram_buckets must be positive".into(),
            ));
        }
        if !(1e-7..=1e-3).contains(&self.gradcheck.epsilon) {
            return Err(ConfigError::Invalid(
                "gradcheck.epsilon must lie in [1e-7, 1e-3]".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let cfg = Config::parse_str(
            "# world\nworld.num_items = 40\ntrain.mode = sampled_softmax # inline\nencoder.similarity=inner_product\n",
        )
        .unwrap();
        assert_eq!(cfg.world.num_items, 40);
        assert_eq!(cfg.train.mode, TrainMode::SampledSoftmax);
        assert_eq!(cfg.train.encoder.similarity, SimilarityMode::InnerProduct);
    }

    #[test]
    fn errors_name_the_problem() {
        assert!(matches!(
            Config::parse_str("bogus.key = 1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            Config::parse_str("\n\nworld.num_items"),
            Err(ConfigError::Syntax { line: 3, .. })
        ));
        assert!(matches!(
            Config::parse_str("world.num_items = x"),
            Err(ConfigError::Value { .. })
        ));
    }

    #[test]
    fn queue_cached_switches_queue_modes() {
        let cfg = Config::parse_str("train.mode = clrec_queue\nqueue.cached = true").unwrap();
        assert_eq!(cfg.train.mode, TrainMode::ClrecQueueCached);
        let cfg = Config::parse_str("train.mode = ipw\nqueue.cached = true").unwrap();
        assert_eq!(cfg.train.mode, TrainMode::Ipw);
    }

    #[test]
    fn popularity_alpha_in_either_order() {
        let a = Config::parse_str("sampler.kind = popularity\nsampler.alpha = 0.5").unwrap();
        let b = Config::parse_str("sampler.alpha = 0.5\nsampler.kind = popularity").unwrap();
        assert_eq!(a.train.proposal, ProposalKind::Popularity { alpha: 0.5 });
        assert_eq!(a.train.proposal, b.train.proposal);
    }

    #[test]
    fn hash_tracks_resolved_values() {
        let a = Config::parse_str("world.seed = 1").unwrap();
        let b = Config::parse_str("world.seed=1\n# comment").unwrap();
        let c = Config::parse_str("world.seed = 2").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
