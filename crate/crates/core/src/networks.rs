//! The three learnable networks and their building blocks.
//!
//! Every network is an [`EncoderUnit`]: a per-row MLP feature extractor, a
//! stack of post-norm transformer encoder layers attending over the `l`
//! blocks, and an affine output map. The parity and feedback networks emit
//! one raw symbol per block, which [`power_normalize`] turns into a
//! unit-power symbol; the decoder emits `2^m` logits per block.

use std::collections::HashMap;

use rand::Rng as _;

use crate::autodiff::{PositionStats, Var};
use crate::channel::{rng_from_seed, Rng};
use crate::config::{ExperimentConfig, FeedbackMode, PositionalEncoding, StdConvention};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Uniform(f64),
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 2],
    pub init: Init,
}

/// Named parameter matrices in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn insert(&mut self, name: &str, tensor: Tensor<S>) {
        if let Some(&i) = self.index.get(name) {
            self.tensors[i] = tensor;
        } else {
            self.index.insert(name.to_string(), self.names.len());
            self.names.push(name.to_string());
            self.tensors.push(tensor);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Wraps every parameter in a graph leaf; `trainable = false` builds
    /// constants so inference keeps no backward state.
    pub fn bind(&self, trainable: bool) -> BoundParams<'_, S> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    Var::leaf(t.clone())
                } else {
                    Var::constant(t.clone())
                }
            })
            .collect();
        BoundParams { store: self, vars }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Parameters of one forward pass, as graph nodes.
pub struct BoundParams<'a, S: Scalar> {
    store: &'a ParamStore<S>,
    vars: Vec<Var<S>>,
}

impl<S: Scalar> BoundParams<'_, S> {
    pub fn var(&self, name: &str) -> Result<&Var<S>> {
        self.store
            .index
            .get(name)
            .map(|&i| &self.vars[i])
            .ok_or_else(|| Error::Archive {
                entry: name.to_string(),
                reason: "parameter missing".into(),
            })
    }

    pub fn vars(&self) -> &[Var<S>] {
        &self.vars
    }
}

/// Which of the three networks a unit is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetworkRole {
    Parity,
    Feedback,
    Decoder,
}

impl NetworkRole {
    pub fn name(self) -> &'static str {
        match self {
            NetworkRole::Parity => "parity",
            NetworkRole::Feedback => "feedback",
            NetworkRole::Decoder => "decoder",
        }
    }
}

/// Architecture of one network: feature extractor, transformer stack and
/// output map.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderUnit {
    pub role: NetworkRole,
    pub d_in: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub d_out: usize,
    pub extractor_depth: usize,
    pub positional: bool,
    pub seq_len: usize,
    pub map_gain: f64,
}

impl EncoderUnit {
    pub fn from_config(cfg: &ExperimentConfig, role: NetworkRole) -> Self {
        let n = &cfg.network;
        let (d_in, n_layers, d_out, map_gain) = match role {
            NetworkRole::Parity => (n.d_in_parity, n.n_layers_parity, n.d_out_parity, n.map_init_gain),
            NetworkRole::Feedback => {
                (n.d_in_feedback, n.n_layers_feedback, n.d_out_feedback, n.map_init_gain)
            }
            NetworkRole::Decoder => (n.d_in_decoder, n.n_layers_decoder, n.d_out_decoder, 1.0),
        };
        EncoderUnit {
            role,
            d_in,
            d_model: n.d_model,
            n_layers,
            n_heads: n.n_heads,
            d_ffn: n.d_ffn,
            d_out,
            extractor_depth: n.extractor_depth,
            positional: n.positional_encoding == PositionalEncoding::Learned,
            seq_len: cfg.protocol.l,
            map_gain,
        }
    }

    fn p(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.role.name())
    }

    /// Every parameter of the unit with its shape and initializer.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut affine = |name: String, fan_in: usize, fan_out: usize, gain: f64| {
            let bound = gain / (fan_in as f64).sqrt();
            specs.push(ParamSpec {
                name: format!("{name}.weight"),
                shape: [fan_in, fan_out],
                init: Init::Uniform(bound),
            });
            specs.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: [1, fan_out],
                init: Init::Uniform(bound),
            });
        };
        let d = self.d_model;
        for j in 0..self.extractor_depth {
            let fan_in = if j == 0 { self.d_in } else { d };
            affine(self.p(&format!("extract.{j}")), fan_in, d, 1.0);
        }
        for k in 0..self.n_layers {
            affine(self.p(&format!("layers.{k}.attn.in_proj")), d, 3 * d, 1.0);
            affine(self.p(&format!("layers.{k}.attn.out_proj")), d, d, 1.0);
            affine(self.p(&format!("layers.{k}.ffn.linear1")), d, self.d_ffn, 1.0);
            affine(self.p(&format!("layers.{k}.ffn.linear2")), self.d_ffn, d, 1.0);
        }
        affine(self.p("map"), d, self.d_out, self.map_gain);
        for k in 0..self.n_layers {
            for norm in ["norm1", "norm2"] {
                specs.push(ParamSpec {
                    name: self.p(&format!("layers.{k}.{norm}.gamma")),
                    shape: [1, d],
                    init: Init::Ones,
                });
                specs.push(ParamSpec {
                    name: self.p(&format!("layers.{k}.{norm}.beta")),
                    shape: [1, d],
                    init: Init::Zeros,
                });
            }
        }
        if self.positional {
            specs.push(ParamSpec {
                name: self.p("pos"),
                shape: [self.seq_len, d],
                init: Init::Uniform(0.02),
            });
        }
        specs
    }

    fn affine<S: Scalar>(&self, p: &BoundParams<S>, x: &Var<S>, name: &str) -> Result<Var<S>> {
        let w = p.var(&self.p(&format!("{name}.weight")))?;
        let b = p.var(&self.p(&format!("{name}.bias")))?;
        Ok(x.matmul(w).add_bias(b))
    }

    /// Applies the same MLP to every row (`rows x d_in` to `rows x d_model`).
    pub fn feature_extract<S: Scalar>(&self, p: &BoundParams<S>, rows: &Var<S>) -> Result<Var<S>> {
        let [_, cols] = rows.shape();
        if cols != self.d_in {
            return Err(Error::shape(
                &format!("{} feature extractor input", self.role.name()),
                self.d_in,
                cols,
            ));
        }
        let mut x = rows.clone();
        for j in 0..self.extractor_depth {
            x = self.affine(p, &x, &format!("extract.{j}"))?;
            if j + 1 < self.extractor_depth {
                x = x.relu();
            }
        }
        Ok(x)
    }

    /// Runs the transformer encoder stack over each sequence of `seq_len`
    /// rows.
    pub fn s2s_encode<S: Scalar>(&self, p: &BoundParams<S>, features: &Var<S>) -> Result<Var<S>> {
        let mut x = features.clone();
        if self.positional {
            x = x.add_positional(p.var(&self.p("pos"))?);
        }
        for k in 0..self.n_layers {
            let layer = |s: &str| format!("layers.{k}.{s}");
            let qkv = self.affine(p, &x, &layer("attn.in_proj"))?;
            let attended = qkv.self_attention(self.seq_len, self.n_heads);
            let attn_out = self.affine(p, &attended, &layer("attn.out_proj"))?;
            x = x.add(&attn_out).layer_norm(
                p.var(&self.p(&layer("norm1.gamma")))?,
                p.var(&self.p(&layer("norm1.beta")))?,
            );
            let hidden = self.affine(p, &x, &layer("ffn.linear1"))?.relu();
            let ffn_out = self.affine(p, &hidden, &layer("ffn.linear2"))?;
            x = x.add(&ffn_out).layer_norm(
                p.var(&self.p(&layer("norm2.gamma")))?,
                p.var(&self.p(&layer("norm2.beta")))?,
            );
        }
        Ok(x)
    }

    /// Affine output map: raw symbols (`d_out = 1`) or decoder logits.
    pub fn map<S: Scalar>(&self, p: &BoundParams<S>, latent: &Var<S>) -> Result<Var<S>> {
        self.affine(p, latent, "map")
    }

    pub fn forward<S: Scalar>(&self, p: &BoundParams<S>, rows: &Var<S>) -> Result<Var<S>> {
        let f = self.feature_extract(p, rows)?;
        let v = self.s2s_encode(p, &f)?;
        self.map(p, &v)
    }
}

/// Per-block probability rows from decoder logits.
pub fn map_logits<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    logits.softmax_rows()
}

/// Per-`(round, block)` statistics used by the power-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerNormStats {
    pub rounds: usize,
    pub positions: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub frozen: bool,
}

impl PowerNormStats {
    pub fn unfrozen(rounds: usize, positions: usize) -> Self {
        PowerNormStats {
            rounds,
            positions,
            mean: vec![0.0; rounds * positions],
            std: vec![1.0; rounds * positions],
            frozen: false,
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rounds, self.positions]
    }

    fn range(&self, tau: usize) -> std::ops::Range<usize> {
        (tau - 1) * self.positions..tau * self.positions
    }

    pub fn round_mean(&self, tau: usize) -> &[f64] {
        &self.mean[self.range(tau)]
    }

    pub fn round_std(&self, tau: usize) -> &[f64] {
        &self.std[self.range(tau)]
    }

    pub fn set_round(&mut self, tau: usize, mean: &[f64], std: &[f64]) {
        let r = self.range(tau);
        self.mean[r.clone()].copy_from_slice(mean);
        self.std[r].copy_from_slice(std);
    }

    pub fn check_frozen(&self) -> Result<()> {
        if !self.frozen {
            return Err(Error::InvalidArgument("power-normalization statistics are not frozen".into()));
        }
        if let Some(s) = self.std.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::Numerical(format!("frozen standard deviation {s} is not positive")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics, differentiated through.
    Train,
    /// Stored statistics.
    Frozen,
}

/// Normalizes the raw symbols of round `tau` (`batch * l x 1`, message-major).
///
/// In train mode the returned statistics are the batch statistics that were
/// applied, expressed in the configured standard-deviation convention.
pub fn power_normalize<S: Scalar>(
    raw: &Var<S>,
    stats: &PowerNormStats,
    tau: usize,
    mode: NormMode,
    convention: StdConvention,
) -> Result<(Var<S>, Option<PositionStats>)> {
    let seq = stats.positions;
    match mode {
        NormMode::Train => {
            let (out, mut observed) = raw.standardize_positions(seq)?;
            match convention {
                StdConvention::Population => Ok((out, Some(observed))),
                StdConvention::Sample => {
                    let b = (raw.shape()[0] / seq) as f64;
                    let factor = ((b - 1.0) / b).sqrt();
                    for s in &mut observed.std {
                        *s /= factor;
                    }
                    Ok((out.scale(S::from_f64_lossy(factor)), Some(observed)))
                }
            }
        }
        NormMode::Frozen => {
            stats.check_frozen()?;
            let shift: Vec<S> = stats.round_mean(tau).iter().map(|&m| S::from_f64_lossy(m)).collect();
            let scale: Vec<S> = stats
                .round_std(tau)
                .iter()
                .map(|&s| S::from_f64_lossy(1.0 / s))
                .collect();
            Ok((raw.position_affine(seq, &shift, &scale), None))
        }
    }
}

/// Learnable parameters, normalization statistics and the configuration they
/// were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S: Scalar> {
    pub config: ExperimentConfig,
    pub params: ParamStore<S>,
    pub parity_stats: PowerNormStats,
    pub feedback_stats: PowerNormStats,
}

impl<S: Scalar> Model<S> {
    /// Randomly initialized model for a validated configuration.
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate().into_result()?;
        let mut rng = rng_from_seed(seed);
        let mut params = ParamStore::default();
        for unit in Self::units_for(config) {
            for spec in unit.param_specs() {
                params.insert(&spec.name, init_tensor(&spec, &mut rng));
            }
        }
        Ok(Self::from_parts(config.clone(), params))
    }

    /// Model with the given parameters and unfrozen statistics.
    pub fn from_parts(config: ExperimentConfig, params: ParamStore<S>) -> Self {
        let p = &config.protocol;
        let parity_stats = PowerNormStats::unfrozen(p.rounds, p.l);
        let feedback_stats = PowerNormStats::unfrozen(p.rounds.saturating_sub(1), p.l);
        Model {
            config,
            params,
            parity_stats,
            feedback_stats,
        }
    }

    fn units_for(config: &ExperimentConfig) -> Vec<EncoderUnit> {
        let mut units = vec![EncoderUnit::from_config(config, NetworkRole::Parity)];
        if Self::has_feedback_network(config) {
            units.push(EncoderUnit::from_config(config, NetworkRole::Feedback));
        }
        units.push(EncoderUnit::from_config(config, NetworkRole::Decoder));
        units
    }

    fn has_feedback_network(config: &ExperimentConfig) -> bool {
        config.protocol.feedback_mode != FeedbackMode::Passive && config.protocol.rounds > 1
    }

    /// The networks this model trains, in parameter order.
    pub fn units(&self) -> Vec<EncoderUnit> {
        Self::units_for(&self.config)
    }

    pub fn parity_unit(&self) -> EncoderUnit {
        EncoderUnit::from_config(&self.config, NetworkRole::Parity)
    }

    pub fn feedback_unit(&self) -> Option<EncoderUnit> {
        Self::has_feedback_network(&self.config)
            .then(|| EncoderUnit::from_config(&self.config, NetworkRole::Feedback))
    }

    pub fn decoder_unit(&self) -> EncoderUnit {
        EncoderUnit::from_config(&self.config, NetworkRole::Decoder)
    }

    /// Expected parameter names and shapes for this configuration.
    pub fn manifest(&self) -> Vec<ParamSpec> {
        self.units().iter().flat_map(EncoderUnit::param_specs).collect()
    }

    pub fn is_frozen(&self) -> bool {
        self.parity_stats.frozen && (self.feedback_stats.rounds == 0 || self.feedback_stats.frozen)
    }

    pub fn check_frozen(&self) -> Result<()> {
        self.parity_stats.check_frozen()?;
        if self.feedback_stats.rounds > 0 {
            self.feedback_stats.check_frozen()?;
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            parity_stats: self.parity_stats.clone(),
            feedback_stats: self.feedback_stats.clone(),
        }
    }
}

fn init_tensor<S: Scalar>(spec: &ParamSpec, rng: &mut Rng) -> Tensor<S> {
    let [r, c] = spec.shape;
    match spec.init {
        Init::Ones => Tensor::filled(r, c, S::one()),
        Init::Zeros => Tensor::zeros(r, c),
        Init::Uniform(bound) => {
            let data: Vec<f64> = (0..r * c).map(|_| rng.random_range(-bound..=bound)).collect();
            Tensor::from_f64(r, c, &data)
        }
    }
}

/// Runs one train-mode pass on a fresh random batch and stores the observed
/// per-`(round, block)` statistics as the frozen normalization statistics.
pub fn freeze_stats<S: Scalar>(model: &mut Model<S>, calibration_batch: usize, rng: &mut Rng) -> Result<()> {
    let snrs = crate::codec::Snrs::from_protocol(&model.config.protocol);
    let (parity, feedback) = crate::codec::calibrate_stats(model, calibration_batch, snrs, rng)?;
    model.parity_stats = parity;
    model.feedback_stats = feedback;
    model.parity_stats.frozen = true;
    model.feedback_stats.frozen = true;
    Ok(())
}
