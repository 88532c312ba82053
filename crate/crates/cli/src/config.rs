//! Experiment configuration: a TOML file, `NOSKIM_`-prefixed environment
//! overrides, then command-line overrides, resolved into one struct whose
//! semantic part (everything except output locations) is hashed into the
//! provenance id every artifact carries.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use noskim_core::access::TimingConfig;
use noskim_core::attack::ScenarioKind;
use noskim_core::model::{ModelConfig, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlackBoxMode {
    Counted,
    WallClock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub vocab_size: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub keywords_per_class: usize,
    pub noise_rate: f64,
    pub zipf_exponent: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            vocab_size: 248,
            train_samples: 2400,
            val_samples: 600,
            min_words: 6,
            max_words: 14,
            keywords_per_class: 4,
            noise_rate: 0.05,
            zipf_exponent: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub budgets: Vec<usize>,
    pub scenarios: Vec<ScenarioKind>,
    pub top_k: usize,
    pub sim_threshold: f64,
    pub charset: String,
    pub max_words_tried_per_iter: usize,
    pub eval_subset: usize,
    pub black_box_mode: BlackBoxMode,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            budgets: vec![1, 2, 3, 4, 5],
            scenarios: ScenarioKind::ALL.to_vec(),
            top_k: noskim_core::attack::DEFAULT_TOP_K,
            sim_threshold: noskim_core::attack::DEFAULT_SIM_THRESHOLD,
            charset: noskim_core::attack::DEFAULT_CHARSET.to_string(),
            max_words_tried_per_iter: noskim_core::attack::DEFAULT_MAX_WORDS_TRIED,
            eval_subset: 200,
            black_box_mode: BlackBoxMode::Counted,
        }
    }
}

/// Optional explicit artifact locations; anything unset lives under
/// `output_dir`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Everything that defines an experiment. `seed` feeds every random stream:
/// corpus generation, model init, training shuffles, and the baseline
/// mutator all derive from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusSection,
    pub attack: AttackSection,
    pub timing: TimingConfig,
    pub paths: PathsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: PathBuf::from("noskim-out"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            corpus: CorpusSection::default(),
            attack: AttackSection::default(),
            timing: TimingConfig::default(),
            paths: PathsSection::default(),
        }
    }
}

/// The part of the config that determines results; output locations are
/// excluded so identical experiments hash identically regardless of where
/// they write.
#[derive(Serialize)]
struct SemanticConfig<'a> {
    seed: u64,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    corpus: &'a CorpusSection,
    attack: &'a AttackSection,
    timing: &'a TimingConfig,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, env: &[(String, String)]) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::data_msg(format!("cannot read config {}: {e}", p.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| CliError::usage(format!("config {}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        cfg.apply_env(env)?;
        Ok(cfg)
    }

    /// Applies `NOSKIM_*` overrides. Unknown `NOSKIM_` keys are rejected so
    /// typos do not silently run the wrong experiment.
    pub fn apply_env(&mut self, vars: &[(String, String)]) -> CliResult<()> {
        for (key, value) in vars {
            let Some(name) = key.strip_prefix("NOSKIM_") else { continue };
            match name {
                "SEED" => self.seed = parse(key, value)?,
                "OUTPUT_DIR" => self.output_dir = PathBuf::from(value),
                "EPOCHS" => self.train.epochs = parse(key, value)?,
                "BATCH_SIZE" => self.train.batch_size = parse(key, value)?,
                "LEARNING_RATE" => self.train.learning_rate = parse(key, value)?,
                "SKIM_PENALTY" => self.train.skim_penalty_weight = parse(key, value)?,
                "TRAIN_SAMPLES" => self.corpus.train_samples = parse(key, value)?,
                "VAL_SAMPLES" => self.corpus.val_samples = parse(key, value)?,
                "VOCAB_SIZE" => self.corpus.vocab_size = parse(key, value)?,
                "NOISE_RATE" => self.corpus.noise_rate = parse(key, value)?,
                "EVAL_SUBSET" => self.attack.eval_subset = parse(key, value)?,
                "TOP_K" => self.attack.top_k = parse(key, value)?,
                "SIM_THRESHOLD" => self.attack.sim_threshold = parse(key, value)?,
                "BUDGETS" => self.attack.budgets = parse_budgets(value)?,
                "SCENARIOS" => self.attack.scenarios = parse_scenarios(value)?,
                "BLACK_BOX_MODE" => {
                    self.attack.black_box_mode = parse_black_box_mode(value)?;
                }
                other => {
                    return Err(CliError::usage(format!(
                        "unknown environment override NOSKIM_{other}"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model
            .validate()
            .map_err(|e| CliError::usage(format!("model config: {e}")))?;
        if self.attack.budgets.is_empty() {
            return Err(CliError::usage("attack.budgets must not be empty"));
        }
        if !self.attack.budgets.windows(2).all(|w| w[0] < w[1]) {
            return Err(CliError::usage("attack.budgets must be strictly ascending"));
        }
        for &b in &self.attack.budgets {
            if b == 0 || b > noskim_core::attack::MAX_BUDGET {
                return Err(CliError::usage(format!(
                    "budget {b} outside 1..={}",
                    noskim_core::attack::MAX_BUDGET
                )));
            }
        }
        if self.attack.scenarios.is_empty() {
            return Err(CliError::usage("attack.scenarios must not be empty"));
        }
        if self.corpus.min_words == 0 || self.corpus.min_words > self.corpus.max_words {
            return Err(CliError::usage("corpus word-count range is empty"));
        }
        if self.corpus.max_words > self.model.max_seq_len - 1 {
            return Err(CliError::usage(format!(
                "corpus.max_words {} exceeds max_seq_len - 1 = {}",
                self.corpus.max_words,
                self.model.max_seq_len - 1
            )));
        }
        if self.attack.eval_subset == 0 || self.attack.eval_subset > self.corpus.val_samples {
            return Err(CliError::usage(format!(
                "attack.eval_subset {} outside 1..={} validation samples",
                self.attack.eval_subset, self.corpus.val_samples
            )));
        }
        self.timing
            .validate()
            .map_err(|e| CliError::usage(format!("timing: {e}")))?;
        Ok(())
    }

    /// Hex SHA-256 over the canonical JSON of the semantic config.
    pub fn hash(&self) -> String {
        let semantic = SemanticConfig {
            seed: self.seed,
            model: &self.model,
            train: &self.train,
            corpus: &self.corpus,
            attack: &self.attack,
            timing: &self.timing,
        };
        let bytes = serde_json::to_vec(&semantic).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        hex_string(&digest)
    }

    /// Semantic config echoed into reports (stable across output locations).
    pub fn semantic_json(&self) -> serde_json::Value {
        serde_json::to_value(SemanticConfig {
            seed: self.seed,
            model: &self.model,
            train: &self.train,
            corpus: &self.corpus,
            attack: &self.attack,
            timing: &self.timing,
        })
        .expect("config serializes")
    }

    // Derived sub-seeds: distinct fixed offsets per consumer.
    pub fn corpus_seed(&self) -> u64 {
        self.seed
    }
    pub fn model_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }
    pub fn shuffle_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }
    pub fn baseline_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    pub fn train_data_path(&self) -> PathBuf {
        self.paths.train_data.clone().unwrap_or_else(|| self.output_dir.join("train.jsonl"))
    }
    pub fn val_data_path(&self) -> PathBuf {
        self.paths.val_data.clone().unwrap_or_else(|| self.output_dir.join("val.jsonl"))
    }
    pub fn vocab_path(&self) -> PathBuf {
        self.paths.vocab.clone().unwrap_or_else(|| self.output_dir.join("vocab.txt"))
    }
    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("model.nskm"))
    }
    pub fn dataset_meta_path(&self) -> PathBuf {
        self.output_dir.join("datasets.meta.json")
    }
    pub fn training_report_path(&self) -> PathBuf {
        self.output_dir.join("training_report.json")
    }
    pub fn attacks_path(&self) -> PathBuf {
        self.output_dir.join("attacks.jsonl")
    }
    pub fn report_json_path(&self) -> PathBuf {
        self.output_dir.join("report.json")
    }
    pub fn report_csv_path(&self) -> PathBuf {
        self.output_dir.join("report.csv")
    }
    pub fn correlation_csv_path(&self) -> PathBuf {
        self.output_dir.join("correlation.csv")
    }

    /// Resolved model config with the derived seed filled in when the file
    /// left it at the default placeholder.
    pub fn resolved_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.seed = self.model_seed();
        m
    }

    /// Resolved training config (shuffle seed derived from the global seed).
    pub fn resolved_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.shuffle_seed();
        t
    }
}

pub fn parse_budgets(s: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| CliError::usage(format!("bad budget {p:?}"))))
        .collect()
}

pub fn parse_scenarios(s: &str) -> CliResult<Vec<ScenarioKind>> {
    s.split(',')
        .map(|p| match p.trim() {
            "whitebox-token" => Ok(ScenarioKind::WhiteBoxToken),
            "whitebox-char" => Ok(ScenarioKind::WhiteBoxChar),
            "graybox-char" => Ok(ScenarioKind::GrayBoxChar),
            "blackbox-char" => Ok(ScenarioKind::BlackBoxChar),
            other => Err(CliError::usage(format!(
                "unknown scenario {other:?} (expect whitebox-token|whitebox-char|graybox-char|blackbox-char)"
            ))),
        })
        .collect()
}

pub fn parse_black_box_mode(s: &str) -> CliResult<BlackBoxMode> {
    match s.trim() {
        "counted" => Ok(BlackBoxMode::Counted),
        "wall-clock" => Ok(BlackBoxMode::WallClock),
        other => Err(CliError::usage(format!("unknown black-box mode {other:?}"))),
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value.parse().map_err(|_| CliError::usage(format!("cannot parse {key}={value:?}")))
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Collects the process environment once (sorted for determinism).
pub fn process_env() -> Vec<(String, String)> {
    let mut vars: Vec<(String, String)> =
        std::env::vars().filter(|(k, _)| k.starts_with("NOSKIM_")).collect();
    vars.sort();
    vars
}

/// SHA-256 of a file's bytes, hex-encoded.
pub fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::data_msg(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex_string(&Sha256::digest(&bytes)))
}

/// Sidecar provenance for synthesized datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config_hash: String,
    pub files: BTreeMap<String, String>,
}
