//! Run configuration: a TOML file with one section per concern, overridden
//! by command-line flags, resolved and written next to every run's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use longhorn_core::kernel::{KernelConfig, KernelKind, RankChoice};
use longhorn_core::model::ModelConfig;
use longhorn_core::tasks::MqarSpec;
use longhorn_core::train::{TrainConfig, MQAR_LR_GRID};
use longhorn_core::{Precision, ScanMode};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub mqar: MqarSection,
    pub lm: LmSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
    pub sample: SampleSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// 32 or 64.
    pub precision: u32,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub out: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            precision: 32,
            threads: 0,
            out: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub d_model: usize,
    pub state_dim: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub kernel: String,
    /// `auto`, `dense` or a positive integer.
    pub rank: String,
    pub retnet_gamma: f64,
    pub tie_embeddings: bool,
    pub norm_eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            layers: m.layers,
            d_model: m.d_model,
            state_dim: m.state_dim,
            expand: m.expand,
            conv_width: m.conv_width,
            kernel: m.kernel.kind.to_string(),
            rank: m.kernel.rank.to_string(),
            retnet_gamma: m.kernel.retnet_gamma,
            tie_embeddings: m.tie_embeddings,
            norm_eps: m.norm_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MqarSection {
    pub seq_len: usize,
    pub pairs: usize,
    pub queries: usize,
    pub key_vocab: usize,
    pub value_vocab: usize,
    /// Longest pad run between pairs and queries; absent means unbounded.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_gap: Option<usize>,
    /// Peak learning rates to sweep; empty trains once at `train.peak_lr`.
    pub lr_grid: Vec<f64>,
}

impl Default for MqarSection {
    fn default() -> Self {
        let s = MqarSpec::default();
        MqarSection {
            seq_len: s.seq_len,
            pairs: s.pairs,
            queries: s.queries,
            key_vocab: s.key_vocab,
            value_vocab: s.value_vocab,
            max_gap: s.max_gap,
            lr_grid: MQAR_LR_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    /// Text files; each is one document.
    pub corpus: Vec<PathBuf>,
    pub val_fraction: f64,
    pub context: usize,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection {
            corpus: Vec::new(),
            val_fraction: 0.1,
            context: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub peak_lr: f64,
    pub final_lr: f64,
    /// Absent means 5% of `total_steps`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    pub total_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub eval_interval: usize,
    pub eval_size: usize,
    pub checkpoint_interval: usize,
    pub scan_mode: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            peak_lr: t.peak_lr,
            final_lr: t.final_lr,
            warmup_steps: None,
            total_steps: t.total_steps,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            clip_norm: t.clip_norm,
            eval_interval: t.eval_interval,
            eval_size: t.eval_size,
            checkpoint_interval: t.checkpoint_interval,
            scan_mode: t.scan_mode.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub factors: Vec<usize>,
    /// Windows per factor; 0 uses all.
    pub max_windows: usize,
    pub scan_mode: String,
    /// Also score one long window by constant-memory decoding.
    pub decode_check: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            checkpoint: None,
            factors: vec![1, 2, 4, 8, 16],
            max_windows: 0,
            scan_mode: "parallel".into(),
            decode_check: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub lengths: Vec<usize>,
    pub d: usize,
    pub m: usize,
    pub repeats: usize,
    pub chunk: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            lengths: vec![256, 1024, 4096],
            d: 256,
            m: 16,
            repeats: 5,
            chunk: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub prompt: String,
    pub steps: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            checkpoint: None,
            prompt: String::new(),
            steps: 200,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// First 8 bytes of the SHA-256 of the resolved config, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(&Sha256::digest(self.to_toml().as_bytes())[..8])
    }

    pub fn precision(&self) -> Result<Precision, CliError> {
        Precision::from_bits(self.run.precision)
            .ok_or_else(|| config_err(format!("precision must be 32 or 64, got {}", self.run.precision)))
    }

    pub fn kernel(&self) -> Result<KernelConfig, CliError> {
        let m = &self.model;
        let kind: KernelKind = m.kernel.parse().map_err(|e| config_err(format!("model.kernel: {e}")))?;
        let rank: RankChoice = m.rank.parse().map_err(|e| config_err(format!("model.rank: {e}")))?;
        if !(m.retnet_gamma > 0.0 && m.retnet_gamma <= 1.0) {
            return Err(config_err("model.retnet_gamma must lie in (0, 1]"));
        }
        Ok(KernelConfig {
            kind,
            rank,
            retnet_gamma: m.retnet_gamma,
        })
    }

    /// Model shape for a task with the given vocabulary and context.
    pub fn model_config(&self, vocab: usize, context: usize) -> Result<ModelConfig, CliError> {
        let m = &self.model;
        let cfg = ModelConfig {
            vocab,
            layers: m.layers,
            d_model: m.d_model,
            state_dim: m.state_dim,
            expand: m.expand,
            conv_width: m.conv_width,
            context,
            kernel: self.kernel()?,
            tie_embeddings: m.tie_embeddings,
            norm_eps: m.norm_eps,
            precision: self.precision()?,
            seed: self.run.seed,
        };
        cfg.validate().map_err(|e| config_err(format!("model: {e}")))?;
        Ok(cfg)
    }

    pub fn mqar_spec(&self) -> Result<MqarSpec, CliError> {
        let q = &self.mqar;
        let spec = MqarSpec {
            seq_len: q.seq_len,
            pairs: q.pairs,
            key_vocab: q.key_vocab,
            value_vocab: q.value_vocab,
            queries: q.queries,
            max_gap: q.max_gap,
            seed: self.run.seed,
        };
        spec.validate().map_err(|e| config_err(e.to_string()))?;
        if q.lr_grid.iter().any(|&lr| !(lr > 0.0)) {
            return Err(config_err("mqar.lr_grid entries must be positive"));
        }
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let cfg = TrainConfig {
            peak_lr: t.peak_lr,
            final_lr: t.final_lr,
            warmup_steps: t.warmup_steps.unwrap_or(t.total_steps / 20),
            total_steps: t.total_steps,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            clip_norm: t.clip_norm,
            eval_interval: t.eval_interval,
            eval_size: t.eval_size,
            checkpoint_interval: t.checkpoint_interval,
            scan_mode: parse_scan(&t.scan_mode, "train.scan_mode")?,
            seed: self.run.seed,
        };
        cfg.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }
}

pub fn parse_scan(s: &str, field: &str) -> Result<ScanMode, CliError> {
    ScanMode::parse(s).ok_or_else(|| config_err(format!("{field}: expected sequential, parallel or chunked:N, got {s:?}")))
}

/// Create `<out>/<command>-<timestamp>-<digest>` and write the resolved
/// config into it.
pub fn make_run_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf, CliError> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = cfg.run.out.join(format!("{command}-{stamp}-{}", cfg.digest()));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(dir)
}
