//! Experiment configuration: protocol geometry, network architecture,
//! optimizer recipe and evaluation settings, with invariant checks.
//!
//! The on-disk form is a TOML document with `[protocol]`, `[network]`,
//! `[train]` and `[eval]` tables. Any field may be overridden with
//! `key=value` strings, where `key` is either dotted (`protocol.T`) or a bare
//! field name that is unique across the tables (`T`).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    /// The receiver runs its own network to produce feedback symbols.
    Active,
    /// The receiver relays a scaled copy of what it received.
    Passive,
    /// Round one sends the BPSK bits and relays them back; later rounds use
    /// active feedback.
    SystematicFirst,
}

impl fmt::Display for FeedbackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeedbackMode::Active => "active",
            FeedbackMode::Passive => "passive",
            FeedbackMode::SystematicFirst => "systematic_first",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Message length in bits.
    #[serde(rename = "K")]
    pub message_bits: usize,
    /// Bits per block.
    pub m: usize,
    /// Number of blocks in a message.
    pub l: usize,
    /// Number of forward communication rounds.
    #[serde(rename = "T")]
    pub rounds: usize,
    pub snr_ff_db: f64,
    pub snr_fb_db: f64,
    pub feedback_mode: FeedbackMode,
    /// Forward symbols per round; one per bit-block.
    #[serde(rename = "N_per_block")]
    pub symbols_per_round: usize,
    /// Information bits per forward channel use.
    #[serde(rename = "R")]
    pub rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncoding {
    None,
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdConvention {
    /// Divide by the batch size.
    Population,
    /// Divide by the batch size minus one.
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub d_model: usize,
    pub n_layers_parity: usize,
    pub n_layers_feedback: usize,
    pub n_layers_decoder: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub d_in_parity: usize,
    pub d_in_feedback: usize,
    pub d_in_decoder: usize,
    pub d_out_parity: usize,
    pub d_out_feedback: usize,
    pub d_out_decoder: usize,
    pub activation: Activation,
    pub positional_encoding: PositionalEncoding,
    /// Number of affine layers in the feature extractor.
    pub extractor_depth: usize,
    /// Initialization gain of the output map of the symbol networks.
    pub map_init_gain: f64,
    pub norm_std: StdConvention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSegment {
    pub length: u64,
    pub ff_start_db: f64,
    pub ff_end_db: f64,
    pub fb_start_db: f64,
    pub fb_end_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub power: f64,
    pub lr_final: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_init: f64,
    pub weight_decay: f64,
    pub grad_clip_threshold: f64,
    pub total_batches: u64,
    pub curriculum: Vec<CurriculumSegment>,
    pub lr_decay: LrDecay,
    pub seed: u64,
    pub precision: Precision,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_interval: u64,
    pub keep_last: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub min_errors: u64,
    pub max_trials: u64,
    /// Messages simulated per batch; the stopping rule is checked between
    /// batches.
    pub messages_per_batch: usize,
    /// Messages in the batch used to freeze power-normalization statistics.
    pub calibration_batch: usize,
    pub shards: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub protocol: ProtocolConfig,
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Channel-use accounting of one message.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Accounting {
    pub forward_uses: usize,
    pub feedback_uses: usize,
    pub direction_changes: usize,
}

impl ProtocolConfig {
    pub fn sigma2_ff(&self) -> f64 {
        crate::channel::snr_db_to_sigma2(self.snr_ff_db)
    }

    pub fn sigma2_fb(&self) -> f64 {
        crate::channel::snr_db_to_sigma2(self.snr_fb_db)
    }

    pub fn num_classes(&self) -> usize {
        1 << self.m
    }

    pub fn layout(&self) -> crate::protocol::KnowledgeLayout {
        crate::protocol::KnowledgeLayout::new(self)
    }

    pub fn accounting(&self) -> Accounting {
        crate::protocol::accounting(self)
    }

    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.m == 0 {
            v.push("m must be >= 1".into());
        }
        if self.m > 16 {
            v.push(format!("m = {} gives too many classes (max 16)", self.m));
        }
        if self.l == 0 {
            v.push("l must be >= 1".into());
        }
        if self.rounds == 0 {
            v.push("T must be >= 1".into());
        }
        if self.message_bits != self.l * self.m {
            v.push(format!(
                "K != l*m ({} != {} * {} = {})",
                self.message_bits,
                self.l,
                self.m,
                self.l * self.m
            ));
        }
        if self.symbols_per_round != self.l {
            v.push(format!(
                "N_per_block must equal l ({} != {})",
                self.symbols_per_round, self.l
            ));
        }
        if !(self.rate > 0.0) || !self.rate.is_finite() {
            v.push(format!("R must be positive and finite (got {})", self.rate));
        } else if self.rounds > 0 && self.l > 0 && self.m > 0 {
            let n = self.accounting().forward_uses as f64;
            let max_rate = self.message_bits as f64 / n;
            if self.rate > max_rate * (1.0 + 1e-12) {
                v.push(format!(
                    "rate constraint violated: N = {} forward uses exceeds K/R = {:.6}",
                    n as usize,
                    self.message_bits as f64 / self.rate
                ));
            }
        }
        if !self.snr_ff_db.is_finite() || !self.snr_fb_db.is_finite() {
            v.push("SNR values must be finite".into());
        }
        v
    }
}

impl NetworkSpec {
    /// Reference architecture (d_model 32, 2/2/3 layers) with widths derived
    /// from `protocol`.
    pub fn for_protocol(protocol: &ProtocolConfig) -> Self {
        let mut spec = NetworkSpec {
            d_model: 32,
            n_layers_parity: 2,
            n_layers_feedback: 2,
            n_layers_decoder: 3,
            n_heads: 4,
            d_ffn: 128,
            d_in_parity: 0,
            d_in_feedback: 0,
            d_in_decoder: 0,
            d_out_parity: 1,
            d_out_feedback: 1,
            d_out_decoder: 0,
            activation: Activation::Relu,
            positional_encoding: PositionalEncoding::None,
            extractor_depth: 3,
            map_init_gain: 0.1,
            norm_std: StdConvention::Population,
        };
        spec.sync_widths(protocol);
        spec
    }

    /// Recomputes the input and output widths implied by `protocol`.
    pub fn sync_widths(&mut self, protocol: &ProtocolConfig) {
        let layout = protocol.layout();
        self.d_in_parity = layout.tx_width();
        self.d_in_feedback = layout.rx_width();
        self.d_in_decoder = layout.rx_width();
        self.d_out_parity = 1;
        self.d_out_feedback = 1;
        self.d_out_decoder = protocol.num_classes();
    }

    fn violations(&self, protocol: &ProtocolConfig) -> Vec<String> {
        let mut v = Vec::new();
        if self.d_model == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            v.push("d_model, n_heads and d_ffn must be positive".into());
        } else if !self.d_model.is_multiple_of(self.n_heads) {
            v.push(format!(
                "d_model ({}) not divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers_parity == 0 || self.n_layers_feedback == 0 || self.n_layers_decoder == 0 {
            v.push("every network needs at least one encoder layer".into());
        }
        if self.extractor_depth == 0 {
            v.push("extractor_depth must be >= 1".into());
        }
        if !(self.map_init_gain > 0.0) {
            v.push("map_init_gain must be positive".into());
        }
        if protocol.m == 0 || protocol.m > 16 || protocol.rounds == 0 {
            return v;
        }
        let layout = protocol.layout();
        let expect = [
            ("d_in_parity", self.d_in_parity, layout.tx_width()),
            ("d_in_feedback", self.d_in_feedback, layout.rx_width()),
            ("d_in_decoder", self.d_in_decoder, layout.rx_width()),
            ("d_out_parity", self.d_out_parity, 1),
            ("d_out_feedback", self.d_out_feedback, 1),
            ("d_out_decoder", self.d_out_decoder, protocol.num_classes()),
        ];
        for (name, got, want) in expect {
            if got != want {
                v.push(format!("{name} = {got} but the protocol requires {want}"));
            }
        }
        v
    }
}

impl TrainConfig {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size < 2 {
            v.push("batch_size must be >= 2 for batch power normalization".into());
        }
        let positive = [
            ("lr_init", self.lr_init),
            ("grad_clip_threshold", self.grad_clip_threshold),
            ("lr_decay.power", self.lr_decay.power),
            ("adam_eps", self.adam_eps),
        ];
        for (name, x) in positive {
            if !(x > 0.0) || !x.is_finite() {
                v.push(format!("{name} must be positive (got {x})"));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.lr_decay.lr_final >= 0.0) {
            v.push("weight_decay and lr_final must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            v.push("Adam betas must lie in [0, 1)".into());
        }
        let curriculum: u64 = self.curriculum.iter().map(|s| s.length).sum();
        if self.total_batches < curriculum {
            v.push(format!(
                "total_batches ({}) shorter than the curriculum ({curriculum})",
                self.total_batches
            ));
        }
        for (i, s) in self.curriculum.iter().enumerate() {
            if s.length == 0 {
                v.push(format!("curriculum segment {i} has zero length"));
            }
            let ends = [s.ff_start_db, s.ff_end_db, s.fb_start_db, s.fb_end_db];
            if ends.iter().any(|x| !x.is_finite()) {
                v.push(format!("curriculum segment {i} has non-finite SNR"));
            }
        }
        if self.checkpoint_interval == 0 {
            v.push("checkpoint_interval must be >= 1".into());
        }
        v
    }
}

impl EvalConfig {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.messages_per_batch == 0 || self.shards == 0 || self.max_trials == 0 {
            v.push("messages_per_batch, shards and max_trials must be positive".into());
        }
        if self.calibration_batch < 2 {
            v.push("calibration_batch must be >= 2".into());
        }
        v
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            min_errors: 100,
            max_trials: 100_000_000,
            messages_per_batch: 10_000,
            calibration_batch: 10_000,
            shards: 1,
        }
    }
}

/// Violated invariants; empty means the configuration is usable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::Validation(self.violations))
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> ValidationReport {
        let mut violations = self.protocol.violations();
        violations.extend(self.network.violations(&self.protocol));
        violations.extend(self.train.violations());
        violations.extend(self.eval.violations());
        ValidationReport { violations }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            what: "configuration".into(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Stable short hash of the serialized configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Applies `key=value` overrides, then re-derives the network widths.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = toml::Table::try_from(self).expect("config is a table");
        for o in overrides {
            apply_override(&mut tree, o.as_ref())?;
        }
        let mut cfg: ExperimentConfig =
            toml::Value::Table(tree).try_into().map_err(|e: toml::de::Error| Error::Parse {
                what: "configuration override".into(),
                reason: e.to_string(),
            })?;
        cfg.sync_derived();
        Ok(cfg)
    }

    /// Re-derives fields that follow from the protocol geometry.
    pub fn sync_derived(&mut self) {
        if self.protocol.m > 0 && self.protocol.m <= 16 && self.protocol.rounds > 0 {
            self.network.sync_widths(&self.protocol);
        }
    }
}

fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<()> {
    let bad = |reason: String| Error::Parse {
        what: format!("override `{spec}`"),
        reason,
    };
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| bad("expected key=value".into()))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let path: Vec<&str> = if key.contains('.') {
        key.split('.').collect()
    } else {
        let sections: Vec<String> = tree
            .iter()
            .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
            .map(|(k, _)| k.clone())
            .collect();
        match sections.as_slice() {
            [one] => {
                let section = tree.get_mut(one.as_str()).unwrap().as_table_mut().unwrap();
                section.insert(key.to_string(), value);
                return Ok(());
            }
            [] => return Err(bad(format!("unknown key `{key}`"))),
            many => return Err(bad(format!("ambiguous key `{key}` (in {})", many.join(", ")))),
        }
    };
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = tree;
    for p in parents {
        node = node
            .get_mut(*p)
            .and_then(|v| v.as_table_mut())
            .ok_or_else(|| bad(format!("unknown table `{p}`")))?;
    }
    if !node.contains_key(*last) {
        return Err(bad(format!("unknown key `{key}`")));
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// The configuration of the reported experiments: K = 51, m = 3, l = 17,
/// T = 9 (R = 1/3), feedback SNR 20 dB, AdamW with batch 8192, 140k batches
/// and a two-segment SNR curriculum.
pub fn reference_config() -> ExperimentConfig {
    let protocol = ProtocolConfig {
        message_bits: 51,
        m: 3,
        l: 17,
        rounds: 9,
        snr_ff_db: -1.0,
        snr_fb_db: 20.0,
        feedback_mode: FeedbackMode::Active,
        symbols_per_round: 17,
        rate: 1.0 / 3.0,
    };
    let network = NetworkSpec::for_protocol(&protocol);
    let train = TrainConfig {
        batch_size: 8192,
        lr_init: 0.001,
        weight_decay: 0.01,
        grad_clip_threshold: 0.5,
        total_batches: 140_000,
        curriculum: vec![
            CurriculumSegment {
                length: 20_000,
                ff_start_db: 3.0,
                ff_end_db: protocol.snr_ff_db,
                fb_start_db: 100.0,
                fb_end_db: 100.0,
            },
            CurriculumSegment {
                length: 20_000,
                ff_start_db: protocol.snr_ff_db,
                ff_end_db: protocol.snr_ff_db,
                fb_start_db: 100.0,
                fb_end_db: protocol.snr_fb_db,
            },
        ],
        lr_decay: LrDecay {
            power: 1.0,
            lr_final: 0.0,
        },
        seed: 0,
        precision: Precision::F32,
        beta1: 0.9,
        beta2: 0.999,
        adam_eps: 1e-8,
        checkpoint_interval: 1000,
        keep_last: 1,
    };
    ExperimentConfig {
        protocol,
        network,
        train,
        eval: EvalConfig::default(),
    }
}

/// Scaled-down recipe that trains on a single CPU core: K = 12, m = 3,
/// l = 4, T = 6 (R = 1/2), forward SNR 2 dB, feedback SNR 20 dB, batch 512,
/// 2000 batches with a 500 + 500 batch curriculum.
pub fn desk_scale_config(mode: FeedbackMode) -> ExperimentConfig {
    let mut cfg = reference_config();
    cfg.protocol = ProtocolConfig {
        message_bits: 12,
        m: 3,
        l: 4,
        rounds: 6,
        snr_ff_db: 2.0,
        snr_fb_db: 20.0,
        feedback_mode: mode,
        symbols_per_round: 4,
        rate: 0.5,
    };
    // Systematic transmission spends more forward uses per message.
    cfg.protocol.rate = 12.0 / cfg.protocol.accounting().forward_uses as f64;
    cfg.network = NetworkSpec::for_protocol(&cfg.protocol);
    cfg.train.batch_size = 512;
    cfg.train.total_batches = 2000;
    cfg.train.checkpoint_interval = 500;
    cfg.train.curriculum = vec![
        CurriculumSegment {
            length: 500,
            ff_start_db: 3.0,
            ff_end_db: 2.0,
            fb_start_db: 100.0,
            fb_end_db: 100.0,
        },
        CurriculumSegment {
            length: 500,
            ff_start_db: 2.0,
            ff_end_db: 2.0,
            fb_start_db: 100.0,
            fb_end_db: 20.0,
        },
    ];
    cfg
}
