//! Run configuration: a flat `key=value` text file with `#` comments.
//!
//! Parsing is strict: unknown keys, duplicate keys and malformed values are
//! rejected with the offending line, and every module precondition is
//! checked here before any data file is touched. All randomness downstream
//! flows from the single `seed` key through named sub-streams, so two runs
//! with equal configs are bitwise identical. The authoritative key list
//! lives in docs/config.md.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::augment::{EmbeddingTable, Vocabulary};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::objective::{LossFlags, TwinsMode};
use crate::queue::HippocampusQueue;
use crate::streams::{stream_rng, stream_seed};
use crate::synth::SynthSpec;

/// Which components an ablation run removes: the fraternal-instance
/// channel, the twins loss, and the hippocampus queue.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablations {
    pub fi: bool,
    pub tl: bool,
    pub hq: bool,
}

impl Ablations {
    pub fn parse(list: &str) -> Result<Self> {
        let mut a = Ablations::default();
        for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "FI" => a.fi = true,
                "TL" => a.tl = true,
                "HQ" => a.hq = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation {other:?}, expected a subset of FI,TL,HQ"
                    )))
                }
            }
        }
        Ok(a)
    }
}

impl std::fmt::Display for Ablations {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if self.fi {
            parts.push("FI");
        }
        if self.tl {
            parts.push("TL");
        }
        if self.hq {
            parts.push("HQ");
        }
        write!(f, "{}", parts.join(","))
    }
}

const KNOWN_KEYS: &[&str] = &[
    // core hyperparameters
    "rho",
    "epsilon",
    "lambda",
    "tau",
    "batch_size",
    "queue_capacity",
    "max_len",
    "dim",
    "enc_hidden",
    "dim_out",
    "lr",
    "momentum",
    "epochs",
    "eval_every",
    "seed",
    "vocab_size",
    "twins_mode",
    "ablate",
    // paths
    "corpus",
    "dev",
    "test",
    "out_dir",
    // synthetic-data section (required only by gen)
    "n_clusters",
    "sentences_per_cluster",
    "len_min",
    "len_max",
    "cluster_token_overlap",
    "dev_pairs",
    "test_pairs",
];

/// The parsed key/value pairs of a config file, before typing. Overrides
/// from the command line are applied here, then [`RawConfig::build`]
/// produces the validated [`RunConfig`].
#[derive(Debug, Clone)]
pub struct RawConfig {
    source: String,
    map: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (zero_based, raw_line) in text.lines().enumerate() {
            let line_no = zero_based + 1;
            let line = match raw_line.split_once('#') {
                Some((before, _)) => before,
                None => raw_line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: source.to_string(),
                line: line_no,
                msg: format!("expected key=value, got {raw_line:?}"),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: line_no,
                    msg: format!("unknown key {key:?}"),
                });
            }
            if map.insert(key.clone(), value).is_some() {
                return Err(Error::Parse {
                    path: source.to_string(),
                    line: line_no,
                    msg: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(RawConfig {
            source: source.to_string(),
            map,
        })
    }

    /// Overrides one key, as the sweep and the command-line flags do.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!(
                "unknown config key {key:?}; see docs/config.md for the key list"
            )));
        }
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn required(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("{}: missing required key {key:?}", self.source)))
    }

    fn parse_with<T, F>(&self, key: &str, raw: &str, parse: F) -> Result<T>
    where
        F: FnOnce(&str) -> std::result::Result<T, String>,
    {
        parse(raw).map_err(|why| {
            Error::Config(format!("{}: key {key:?}: {why}", self.source))
        })
    }

    fn req_f64(&self, key: &str) -> Result<f64> {
        let raw = self.required(key)?;
        self.parse_with(key, raw, |s| {
            s.parse::<f64>()
                .map_err(|_| format!("expected a real number, got {s:?}"))
        })
    }

    fn req_usize(&self, key: &str) -> Result<usize> {
        let raw = self.required(key)?;
        self.parse_with(key, raw, |s| {
            s.parse::<usize>()
                .map_err(|_| format!("expected a nonnegative integer, got {s:?}"))
        })
    }

    fn req_u64(&self, key: &str) -> Result<u64> {
        let raw = self.required(key)?;
        self.parse_with(key, raw, |s| {
            s.parse::<u64>()
                .map_err(|_| format!("expected a nonnegative integer, got {s:?}"))
        })
    }

    fn req_u32(&self, key: &str) -> Result<u32> {
        let raw = self.required(key)?;
        self.parse_with(key, raw, |s| {
            s.parse::<u32>()
                .map_err(|_| format!("expected a nonnegative integer, got {s:?}"))
        })
    }

    fn opt_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.map.get(key) {
            None => Ok(default),
            Some(raw) => self.parse_with(key, raw, |s| {
                s.parse::<f64>()
                    .map_err(|_| format!("expected a real number, got {s:?}"))
            }),
        }
    }

    fn opt_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.map.get(key) {
            None => Ok(default),
            Some(raw) => self.parse_with(key, raw, |s| {
                s.parse::<usize>()
                    .map_err(|_| format!("expected a nonnegative integer, got {s:?}"))
            }),
        }
    }

    fn opt_usize_key(&self, key: &str) -> Result<Option<usize>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => self
                .parse_with(key, raw, |s| {
                    s.parse::<usize>()
                        .map_err(|_| format!("expected a nonnegative integer, got {s:?}"))
                })
                .map(Some),
        }
    }

    fn opt_f64_key(&self, key: &str) -> Result<Option<f64>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => self
                .parse_with(key, raw, |s| {
                    s.parse::<f64>()
                        .map_err(|_| format!("expected a real number, got {s:?}"))
                })
                .map(Some),
        }
    }

    /// Types and validates the whole configuration.
    pub fn build(&self) -> Result<RunConfig> {
        let dim = self.req_usize("dim")?;
        let mut ablate = match self.map.get("ablate") {
            Some(list) => Ablations::parse(list)?,
            None => Ablations::default(),
        };
        // the twins loss compares against the fraternal channel, so
        // removing FI removes TL with it
        if ablate.fi {
            ablate.tl = true;
        }
        let twins_mode: TwinsMode = match self.map.get("twins_mode") {
            Some(raw) => raw.parse()?,
            None => TwinsMode::Diagonal,
        };
        let cfg = RunConfig {
            rho: self.req_f64("rho")?,
            epsilon: self.req_f64("epsilon")?,
            lambda: self.req_f64("lambda")?,
            tau: self.req_f64("tau")?,
            batch_size: self.req_usize("batch_size")?,
            queue_capacity: self.req_usize("queue_capacity")?,
            max_len: self.req_usize("max_len")?,
            dim,
            enc_hidden: self.req_usize("enc_hidden")?,
            dim_out: self.opt_usize("dim_out", dim)?,
            lr: self.req_f64("lr")?,
            momentum: self.opt_f64("momentum", 0.0)?,
            epochs: self.opt_usize("epochs", 1)?,
            eval_every: self.opt_usize("eval_every", 1)?,
            seed: self.req_u64("seed")?,
            vocab_size: self.req_u32("vocab_size")?,
            twins_mode,
            ablate,
            corpus: self.required("corpus")?.to_string(),
            dev: self.required("dev")?.to_string(),
            test: self.required("test")?.to_string(),
            out_dir: self.required("out_dir")?.to_string(),
            n_clusters: self.opt_usize_key("n_clusters")?,
            sentences_per_cluster: self.opt_usize_key("sentences_per_cluster")?,
            len_min: self.opt_usize_key("len_min")?,
            len_max: self.opt_usize_key("len_max")?,
            cluster_token_overlap: self.opt_f64_key("cluster_token_overlap")?,
            dev_pairs: self.opt_usize_key("dev_pairs")?,
            test_pairs: self.opt_usize_key("test_pairs")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One fully validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub rho: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub queue_capacity: usize,
    pub max_len: usize,
    pub dim: usize,
    pub enc_hidden: usize,
    pub dim_out: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub vocab_size: u32,
    pub twins_mode: TwinsMode,
    pub ablate: Ablations,
    pub corpus: String,
    pub dev: String,
    pub test: String,
    pub out_dir: String,
    pub n_clusters: Option<usize>,
    pub sentences_per_cluster: Option<usize>,
    pub len_min: Option<usize>,
    pub len_max: Option<usize>,
    pub cluster_token_overlap: Option<f64>,
    pub dev_pairs: Option<usize>,
    pub test_pairs: Option<usize>,
}

impl RunConfig {
    fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::Config(format!(
                "tau must be positive and finite, got {}",
                self.tau
            )));
        }
        if !self.rho.is_finite() || !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!(
                "rho must lie in [0, 1), got {}",
                self.rho
            )));
        }
        if !self.epsilon.is_finite() || !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "epsilon must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        if !self.lambda.is_finite() || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if self.dim == 0 || self.enc_hidden == 0 || self.dim_out == 0 {
            return Err(Error::Config(
                "dim, enc_hidden and dim_out must all be at least 1".into(),
            ));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!(
                "lr must be finite and nonnegative, got {}",
                self.lr
            )));
        }
        if !self.momentum.is_finite() || self.momentum < 0.0 {
            return Err(Error::Config(format!(
                "momentum must be finite and nonnegative, got {}",
                self.momentum
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        if self.ablate.hq {
            // the queue is gone entirely; its keys are not consulted
        } else if self.queue_capacity == 0 {
            return Err(Error::Config(
                "queue_capacity 0 disables the queue; use ablate=HQ to request that".into(),
            ));
        } else {
            // delegate the coefficient-positivity check to the queue itself
            HippocampusQueue::new(self.queue_capacity, self.batch_size, self.lambda)?;
        }
        Ok(())
    }

    /// Loss-term switches implied by the ablation set.
    pub fn loss_flags(&self) -> LossFlags {
        LossFlags {
            fraternal: !self.ablate.fi,
            twins: !(self.ablate.tl || self.ablate.fi),
            mode: self.twins_mode,
        }
    }

    /// The queue for this run, or None when the queue is ablated.
    pub fn build_queue(&self) -> Result<Option<HippocampusQueue>> {
        if self.ablate.hq {
            return Ok(None);
        }
        Ok(Some(HippocampusQueue::new(
            self.queue_capacity,
            self.batch_size,
            self.lambda,
        )?))
    }

    /// The frozen source and fraternal embedding tables, derived from the
    /// run seed.
    pub fn build_tables(&self) -> Result<(EmbeddingTable, EmbeddingTable)> {
        let vocab = Vocabulary::new(self.vocab_size)?;
        let bel_s = EmbeddingTable::seeded_gaussian(
            vocab,
            self.dim,
            &mut stream_rng(self.seed, "embed-src"),
        )?;
        let vocab = Vocabulary::new(self.vocab_size)?;
        let bel_f = EmbeddingTable::seeded_gaussian(
            vocab,
            self.dim,
            &mut stream_rng(self.seed, "embed-frat"),
        )?;
        Ok((bel_s, bel_f))
    }

    /// Freshly initialized encoder parameters, derived from the run seed.
    pub fn build_encoder(&self) -> Result<EncoderParams> {
        EncoderParams::init_gaussian(
            self.dim,
            self.enc_hidden,
            self.dim_out,
            &mut stream_rng(self.seed, "encoder-init"),
        )
    }

    /// The synthetic-data spec, requiring the generator section keys.
    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let need = |name: &str, v: Option<usize>| {
            v.ok_or_else(|| {
                Error::Config(format!("missing key {name:?} (required by the generator)"))
            })
        };
        let spec = SynthSpec {
            n_clusters: need("n_clusters", self.n_clusters)?,
            sentences_per_cluster: need("sentences_per_cluster", self.sentences_per_cluster)?,
            vocab_size: self.vocab_size,
            len_min: need("len_min", self.len_min)?,
            len_max: need("len_max", self.len_max)?,
            cluster_token_overlap: self.cluster_token_overlap.ok_or_else(|| {
                Error::Config(
                    "missing key \"cluster_token_overlap\" (required by the generator)".into(),
                )
            })?,
            corpus_seed: stream_seed(self.seed, "corpus"),
            remap_seed: stream_seed(self.seed, "remap"),
        };
        spec.validate()?;
        if spec.len_max > self.max_len {
            return Err(Error::Config(format!(
                "len_max {} exceeds max_len {}: generated sentences would be truncated",
                spec.len_max, self.max_len
            )));
        }
        Ok(spec)
    }

    /// Pair counts for the generated dev and test evaluation sets.
    pub fn sts_pair_counts(&self) -> Result<(usize, usize)> {
        let dev = self.dev_pairs.ok_or_else(|| {
            Error::Config("missing key \"dev_pairs\" (required by the generator)".into())
        })?;
        let test = self.test_pairs.ok_or_else(|| {
            Error::Config("missing key \"test_pairs\" (required by the generator)".into())
        })?;
        Ok((dev, test))
    }

    pub fn sts_dev_seed(&self) -> u64 {
        stream_seed(self.seed, "sts-dev")
    }

    pub fn sts_test_seed(&self) -> u64 {
        stream_seed(self.seed, "sts-test")
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let path = Path::new(p);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            Path::new(&self.out_dir).join(path)
        }
    }

    /// Data paths; relative paths live under `out_dir`.
    pub fn corpus_path(&self) -> PathBuf {
        self.resolve(&self.corpus)
    }

    pub fn dev_path(&self) -> PathBuf {
        self.resolve(&self.dev)
    }

    pub fn test_path(&self) -> PathBuf {
        self.resolve(&self.test)
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        Path::new(&self.out_dir).join(name)
    }
}
