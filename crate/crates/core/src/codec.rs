//! Interactive encoding over `T` rounds and joint decoding of the bit blocks.
//!
//! All functions operate on batches of messages. Rows of every matrix are
//! `(message, block)` pairs in message-major order, so message `b`, block `i`
//! lives in row `b * l + i`. Channel noise is drawn up front as a [`Noise`]
//! realization of standard normals, which keeps episodes reproducible and
//! lets tests perturb individual rounds.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{PositionStats, Var};
use crate::channel::{snr_db_to_sigma2, standard_normals, Rng};
use crate::config::{FeedbackMode, ProtocolConfig};
use crate::error::{Error, Result};
use crate::networks::{map_logits, power_normalize, BoundParams, Model, NormMode, PowerNormStats};
use crate::protocol::{compute_alpha, KnowledgeLayout, ReceiverState};
use crate::tensor::{Scalar, Tensor};

/// Forward and feedback SNRs in dB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snrs {
    pub ff_db: f64,
    pub fb_db: f64,
}

impl Snrs {
    pub fn new(ff_db: f64, fb_db: f64) -> Self {
        Snrs { ff_db, fb_db }
    }

    pub fn from_protocol(p: &ProtocolConfig) -> Self {
        Snrs::new(p.snr_ff_db, p.snr_fb_db)
    }

    pub fn sigma2_ff(&self) -> f64 {
        snr_db_to_sigma2(self.ff_db)
    }

    pub fn sigma2_fb(&self) -> f64 {
        snr_db_to_sigma2(self.fb_db)
    }
}

/// Standard-normal draws for every channel use of a batch, per round.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    /// `forward[τ-1]` has `batch * l * round_width(τ)` entries.
    pub forward: Vec<Vec<f64>>,
    /// `feedback[τ-1]` for `τ < T`.
    pub feedback: Vec<Vec<f64>>,
}

impl Noise {
    pub fn sample(layout: &KnowledgeLayout, batch: usize, rng: &mut Rng) -> Self {
        let mut forward = Vec::with_capacity(layout.rounds);
        let mut feedback = Vec::with_capacity(layout.rounds.saturating_sub(1));
        for tau in 1..=layout.rounds {
            let n = batch * layout.l * layout.round_width(tau);
            forward.push(standard_normals(rng, n));
            if tau < layout.rounds {
                feedback.push(standard_normals(rng, n));
            }
        }
        Noise { forward, feedback }
    }

    pub fn zeros(layout: &KnowledgeLayout, batch: usize) -> Self {
        let n = |tau| batch * layout.l * layout.round_width(tau);
        Noise {
            forward: (1..=layout.rounds).map(|t| vec![0.0; n(t)]).collect(),
            feedback: (1..layout.rounds).map(|t| vec![0.0; n(t)]).collect(),
        }
    }
}

/// A batch of messages, `K` bits each, concatenated.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageBatch {
    pub batch: usize,
    pub message_bits: usize,
    pub bits: Vec<u8>,
}

impl MessageBatch {
    pub fn new(message_bits: usize, bits: Vec<u8>) -> Result<Self> {
        if message_bits == 0 || !bits.len().is_multiple_of(message_bits) {
            return Err(Error::shape("message batch", format!("multiple of {message_bits}"), bits.len()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("bits must be 0 or 1".into()));
        }
        Ok(MessageBatch {
            batch: bits.len() / message_bits,
            message_bits,
            bits,
        })
    }

    pub fn random(batch: usize, message_bits: usize, rng: &mut Rng) -> Self {
        let bits = (0..batch * message_bits).map(|_| rng.random_range(0..2u8)).collect();
        MessageBatch {
            batch,
            message_bits,
            bits,
        }
    }

    pub fn message(&self, b: usize) -> &[u8] {
        &self.bits[b * self.message_bits..(b + 1) * self.message_bits]
    }

    /// Class label of every block, row order `b * l + i`.
    pub fn labels(&self, m: usize) -> Vec<usize> {
        self.bits
            .chunks(m)
            .map(|block| bits_to_index(block).expect("bits are binary"))
            .collect()
    }

    /// BPSK image of the bits as a `batch * l x m` matrix.
    pub fn bpsk_rows<S: Scalar>(&self, m: usize) -> Tensor<S> {
        let data = self.bits.iter().map(|&b| if b == 1 { S::one() } else { -S::one() }).collect();
        Tensor::from_vec(self.bits.len() / m, m, data)
    }
}

/// `m`-bit big-endian (MSB-first) pattern of class `p`.
pub fn index_to_bits(p: usize, m: usize) -> Result<Vec<u8>> {
    if m >= usize::BITS as usize || p >= (1usize << m) {
        return Err(Error::InvalidArgument(format!("class {p} out of range for m = {m}")));
    }
    Ok((0..m).map(|j| ((p >> (m - 1 - j)) & 1) as u8).collect())
}

/// Class label of an MSB-first bit block.
pub fn bits_to_index(block: &[u8]) -> Result<usize> {
    block.iter().try_fold(0usize, |acc, &b| match b {
        0 | 1 => Ok((acc << 1) | b as usize),
        _ => Err(Error::InvalidArgument(format!("bit value {b} is not 0 or 1"))),
    })
}

/// Symbols of one batched episode, as graph nodes.
pub struct IpseOutput<S: Scalar> {
    /// `c(τ)`: transmitted parity symbols.
    pub forward: Vec<Var<S>>,
    /// `y(τ)`: what the receiver observed.
    pub forward_rx: Vec<Var<S>>,
    /// `c̃(τ)`: transmitted feedback symbols.
    pub feedback: Vec<Var<S>>,
    /// `ỹ(τ)`: what the transmitter observed.
    pub feedback_rx: Vec<Var<S>>,
    /// Batch statistics applied per round in train mode.
    pub parity_observed: Vec<Option<PositionStats>>,
    pub feedback_observed: Vec<Option<PositionStats>>,
    pub batch: usize,
}

fn noise_var<S: Scalar>(z: &[f64], sigma: f64, rows: usize) -> Var<S> {
    let cols = z.len() / rows;
    let data = z.iter().map(|&v| S::from_f64_lossy(sigma * v)).collect();
    Var::constant(Tensor::from_vec(rows, cols, data))
}

/// Iterative encoding: `T` rounds of parity symbols, each but the last
/// answered by feedback symbols.
pub fn run_ipse<S: Scalar>(
    model: &Model<S>,
    params: &BoundParams<S>,
    messages: &MessageBatch,
    snrs: Snrs,
    noise: &Noise,
    mode: NormMode,
) -> Result<IpseOutput<S>> {
    let proto = &model.config.protocol;
    if messages.message_bits != proto.message_bits {
        return Err(Error::shape("message length", proto.message_bits, messages.message_bits));
    }
    let lay = proto.layout();
    let rounds = proto.rounds;
    if noise.forward.len() != rounds || noise.feedback.len() != rounds - 1 {
        return Err(Error::shape("noise rounds", rounds, noise.forward.len()));
    }
    let n = messages.batch * proto.l;
    let convention = model.config.network.norm_std;
    let sigma_ff = snrs.sigma2_ff().sqrt();
    let sigma_fb = snrs.sigma2_fb().sqrt();
    let alpha = compute_alpha(snrs.sigma2_ff())?;
    let parity = model.parity_unit();
    let feedback_net = model.feedback_unit();
    let bits = Var::constant(messages.bpsk_rows::<S>(proto.m));

    let mut out = IpseOutput {
        forward: Vec::with_capacity(rounds),
        forward_rx: Vec::with_capacity(rounds),
        feedback: Vec::with_capacity(rounds),
        feedback_rx: Vec::with_capacity(rounds),
        parity_observed: Vec::with_capacity(rounds),
        feedback_observed: Vec::with_capacity(rounds),
        batch: messages.batch,
    };

    for tau in 1..=rounds {
        let width = lay.round_width(tau);
        if noise.forward[tau - 1].len() != n * width {
            return Err(Error::shape("forward noise", n * width, noise.forward[tau - 1].len()));
        }
        let c = if lay.parity_is_learned(tau) {
            let mut parts = vec![(bits.clone(), 0)];
            for t in 1..tau {
                parts.push((out.forward[t - 1].clone(), lay.tx_parity_offset(t)));
                parts.push((out.feedback_rx[t - 1].clone(), lay.tx_feedback_offset(t)));
            }
            let rows = Var::assemble(n, lay.tx_width(), &parts);
            let raw = parity.forward(params, &rows)?;
            let (c, observed) = power_normalize(&raw, &model.parity_stats, tau, mode, convention)?;
            out.parity_observed.push(observed);
            c
        } else {
            out.parity_observed.push(None);
            bits.clone()
        };
        let y = c.add(&noise_var(&noise.forward[tau - 1], sigma_ff, n));
        out.forward.push(c);
        out.forward_rx.push(y.clone());

        if tau == rounds {
            break;
        }
        let relay = proto.feedback_mode == FeedbackMode::Passive
            || (proto.feedback_mode == FeedbackMode::SystematicFirst && tau == 1);
        let c_fb = if relay {
            out.feedback_observed.push(None);
            y.scale(S::from_f64_lossy(alpha))
        } else {
            let net = feedback_net.as_ref().expect("active modes carry a feedback network");
            let rows = receiver_rows(&lay, n, &out.forward_rx, &out.feedback);
            let raw = net.forward(params, &rows)?;
            let (c_fb, observed) = power_normalize(&raw, &model.feedback_stats, tau, mode, convention)?;
            out.feedback_observed.push(observed);
            c_fb
        };
        if noise.feedback[tau - 1].len() != n * width {
            return Err(Error::shape("feedback noise", n * width, noise.feedback[tau - 1].len()));
        }
        let y_fb = c_fb.add(&noise_var(&noise.feedback[tau - 1], sigma_fb, n));
        out.feedback.push(c_fb);
        out.feedback_rx.push(y_fb);
    }
    Ok(out)
}

/// Receiver knowledge rows from the observations and feedback so far.
fn receiver_rows<S: Scalar>(lay: &KnowledgeLayout, n: usize, forward_rx: &[Var<S>], feedback: &[Var<S>]) -> Var<S> {
    let mut parts = Vec::with_capacity(forward_rx.len() + feedback.len());
    for (t, y) in forward_rx.iter().enumerate() {
        parts.push((y.clone(), lay.rx_forward_offset(t + 1)));
    }
    for (t, c) in feedback.iter().enumerate() {
        parts.push((c.clone(), lay.rx_feedback_offset(t + 1)));
    }
    Var::assemble(n, lay.rx_width(), &parts)
}

/// Decoder logits (`batch * l x 2^m`) after all `T` rounds.
pub fn jpsd_logits<S: Scalar>(model: &Model<S>, params: &BoundParams<S>, episode: &IpseOutput<S>) -> Result<Var<S>> {
    let lay = model.config.protocol.layout();
    let n = episode.batch * lay.l;
    let rows = receiver_rows(&lay, n, &episode.forward_rx, &episode.feedback);
    model.decoder_unit().forward(params, &rows)
}

/// Hard decisions: per-block argmax (ties to the lowest class) and the
/// concatenated bit patterns.
pub fn decide<S: Scalar>(logits: &Tensor<S>, m: usize) -> (Vec<usize>, Vec<u8>) {
    let mut labels = Vec::with_capacity(logits.rows());
    let mut bits = Vec::with_capacity(logits.rows() * m);
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        labels.push(best);
        bits.extend(index_to_bits(best, m).expect("argmax is a valid class"));
    }
    (labels, bits)
}

/// Result of decoding one receiver's knowledge.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub probabilities: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub bits: Vec<u8>,
}

/// Joint decoding of a single message from a complete receiver state.
pub fn jpsd<S: Scalar>(model: &Model<S>, receiver: &ReceiverState) -> Result<Decoded> {
    if !receiver.is_complete() {
        return Err(Error::InvalidArgument(
            "decoding needs all T forward blocks and T-1 feedback blocks".into(),
        ));
    }
    let rows = receiver.knowledge_rows();
    let width = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.concat();
    let input = Var::constant(Tensor::<S>::from_f64(rows.len(), width, &flat));
    let params = model.params.bind(false);
    let logits = model.decoder_unit().forward(&params, &input)?;
    let (labels, bits) = decide(logits.value(), model.config.protocol.m);
    let probs = map_logits(logits.value());
    Ok(Decoded {
        probabilities: (0..probs.rows()).map(|r| probs.row(r).iter().map(|v| v.as_f64()).collect()).collect(),
        labels,
        bits,
    })
}

/// Per-message record of an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    /// `c(τ)` for `τ = 1..T`, `l * round_width(τ)` symbols each.
    pub forward: Vec<Vec<f64>>,
    pub forward_rx: Vec<Vec<f64>>,
    /// `c̃(τ)` for `τ = 1..T-1`.
    pub feedback: Vec<Vec<f64>>,
    pub feedback_rx: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub bits: Vec<u8>,
    pub decoded_bits: Vec<u8>,
}

fn message_slice<S: Scalar>(v: &Var<S>, b: usize, l: usize) -> Vec<f64> {
    let t = v.value();
    let w = t.cols();
    t.data()[b * l * w..(b + 1) * l * w].iter().map(|x| x.as_f64()).collect()
}

/// Runs a full batch (encoding and decoding) without building a backward
/// graph and returns one trace per message.
pub fn run_traces<S: Scalar>(
    model: &Model<S>,
    messages: &MessageBatch,
    snrs: Snrs,
    noise: &Noise,
    mode: NormMode,
) -> Result<Vec<EpisodeTrace>> {
    let params = model.params.bind(false);
    let ep = run_ipse(model, &params, messages, snrs, noise, mode)?;
    let logits = jpsd_logits(model, &params, &ep)?;
    let (m, l) = (model.config.protocol.m, model.config.protocol.l);
    let (labels, decoded) = decide(logits.value(), m);
    let k = messages.message_bits;
    Ok((0..messages.batch)
        .map(|b| EpisodeTrace {
            forward: ep.forward.iter().map(|v| message_slice(v, b, l)).collect(),
            forward_rx: ep.forward_rx.iter().map(|v| message_slice(v, b, l)).collect(),
            feedback: ep.feedback.iter().map(|v| message_slice(v, b, l)).collect(),
            feedback_rx: ep.feedback_rx.iter().map(|v| message_slice(v, b, l)).collect(),
            logits: (b * l..(b + 1) * l)
                .map(|r| logits.value().row(r).iter().map(|x| x.as_f64()).collect())
                .collect(),
            labels: labels[b * l..(b + 1) * l].to_vec(),
            bits: messages.message(b).to_vec(),
            decoded_bits: decoded[b * k..(b + 1) * k].to_vec(),
        })
        .collect())
}

/// One message end to end with frozen normalization statistics.
pub fn run_episode<S: Scalar>(model: &Model<S>, bits: &[u8], snrs: Snrs, rng: &mut Rng) -> Result<EpisodeTrace> {
    model.check_frozen()?;
    let messages = MessageBatch::new(model.config.protocol.message_bits, bits.to_vec())?;
    if messages.batch != 1 {
        return Err(Error::shape("episode message", model.config.protocol.message_bits, bits.len()));
    }
    let noise = Noise::sample(&model.config.protocol.layout(), 1, rng);
    Ok(run_traces(model, &messages, snrs, &noise, NormMode::Frozen)?.remove(0))
}

/// Decoded bits for a batch under frozen statistics.
pub fn transmit_batch<S: Scalar>(model: &Model<S>, messages: &MessageBatch, snrs: Snrs, noise: &Noise) -> Result<Vec<u8>> {
    let params = model.params.bind(false);
    let ep = run_ipse(model, &params, messages, snrs, noise, NormMode::Frozen)?;
    let logits = jpsd_logits(model, &params, &ep)?;
    Ok(decide(logits.value(), model.config.protocol.m).1)
}

/// Batch statistics of one train-mode pass over `batch` fresh messages.
pub fn calibrate_stats<S: Scalar>(
    model: &Model<S>,
    batch: usize,
    snrs: Snrs,
    rng: &mut Rng,
) -> Result<(PowerNormStats, PowerNormStats)> {
    let proto = &model.config.protocol;
    let messages = MessageBatch::random(batch, proto.message_bits, rng);
    let noise = Noise::sample(&proto.layout(), batch, rng);
    let params = model.params.bind(false);
    let ep = run_ipse(model, &params, &messages, snrs, &noise, NormMode::Train)?;
    let mut parity = PowerNormStats::unfrozen(proto.rounds, proto.l);
    let mut feedback = PowerNormStats::unfrozen(proto.rounds.saturating_sub(1), proto.l);
    let round = |v: f64| S::from_f64_lossy(v).as_f64();
    for (t, obs) in ep.parity_observed.iter().enumerate() {
        if let Some(o) = obs {
            let mean: Vec<f64> = o.mean.iter().map(|&v| round(v)).collect();
            let std: Vec<f64> = o.std.iter().map(|&v| round(v)).collect();
            parity.set_round(t + 1, &mean, &std);
        }
    }
    for (t, obs) in ep.feedback_observed.iter().enumerate() {
        if let Some(o) = obs {
            let mean: Vec<f64> = o.mean.iter().map(|&v| round(v)).collect();
            let std: Vec<f64> = o.std.iter().map(|&v| round(v)).collect();
            feedback.set_round(t + 1, &mean, &std);
        }
    }
    Ok((parity, feedback))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::rng_from_seed;
    use crate::config::{desk_scale_config, reference_config, ExperimentConfig};
    use crate::networks::freeze_stats;
    use crate::protocol::TransmitterState;

    fn tiny(mode: FeedbackMode) -> ExperimentConfig {
        let mut cfg = desk_scale_config(mode);
        cfg.network.d_model = 8;
        cfg.network.d_ffn = 16;
        cfg.network.n_heads = 2;
        cfg.network.n_layers_parity = 1;
        cfg.network.n_layers_feedback = 1;
        cfg.network.n_layers_decoder = 1;
        cfg
    }

    fn frozen_model(mode: FeedbackMode) -> Model<f64> {
        let mut model = Model::<f64>::new(&tiny(mode), 1).unwrap();
        freeze_stats(&mut model, 256, &mut rng_from_seed(2)).unwrap();
        model
    }

    #[test]
    fn index_bits_examples() {
        assert_eq!(index_to_bits(0, 3).unwrap(), vec![0, 0, 0]);
        assert_eq!(index_to_bits(5, 3).unwrap(), vec![1, 0, 1]);
        assert_eq!(bits_to_index(&[1, 1, 0]).unwrap(), 6);
        assert!(index_to_bits(8, 3).is_err());
        assert!(bits_to_index(&[1, 2]).is_err());
    }

    #[test]
    fn index_bits_round_trip() {
        for m in 1..=8 {
            for p in 0..(1 << m) {
                assert_eq!(bits_to_index(&index_to_bits(p, m).unwrap()).unwrap(), p);
            }
        }
    }

    #[test]
    fn decisions_break_ties_low_and_use_msb_first() {
        let uniform = Tensor::<f64>::zeros(4, 8);
        let (labels, bits) = decide(&uniform, 3);
        assert_eq!(labels, vec![0; 4]);
        assert_eq!(bits, vec![0; 12]);
        let mut one_hot = Tensor::<f64>::zeros(1, 8);
        one_hot.set(0, 5, 1.0);
        assert_eq!(decide(&one_hot, 3).1, vec![1, 0, 1]);
    }

    #[test]
    fn channel_use_budget() {
        let mut model = Model::<f32>::new(&reference_config(), 0).unwrap();
        freeze_stats(&mut model, 64, &mut rng_from_seed(0)).unwrap();
        let trace = run_episode(&model, &[1; 51], Snrs::new(0.0, 20.0), &mut rng_from_seed(1)).unwrap();
        let fwd: usize = trace.forward.iter().map(Vec::len).sum();
        let fb: usize = trace.feedback.iter().map(Vec::len).sum();
        assert_eq!((fwd, fb), (153, 136));
        assert_eq!(trace.decoded_bits.len(), 51);
    }

    #[test]
    fn noiseless_passive_feedback_echoes_parity() {
        let model = frozen_model(FeedbackMode::Passive);
        let lay = model.config.protocol.layout();
        let msgs = MessageBatch::random(8, 12, &mut rng_from_seed(3));
        let snrs = Snrs::new(2.0, 20.0);
        let noise = Noise::zeros(&lay, 8);
        let params = model.params.bind(false);
        // Zero noise realizations make both channels noiseless, but alpha
        // still reflects the nominal forward SNR.
        let ep = run_ipse(&model, &params, &msgs, snrs, &noise, NormMode::Frozen).unwrap();
        let alpha = compute_alpha(snrs.sigma2_ff()).unwrap();
        for t in 0..ep.feedback.len() {
            for (yt, c) in ep.feedback_rx[t].value().data().iter().zip(ep.forward[t].value().data()) {
                assert_eq!(*yt, alpha * c);
            }
        }
    }

    #[test]
    fn batch_rows_match_single_message_states() {
        let model = frozen_model(FeedbackMode::Active);
        let lay = model.config.protocol.layout();
        let msgs = MessageBatch::random(3, 12, &mut rng_from_seed(4));
        let traces = run_traces(&model, &msgs, Snrs::new(2.0, 20.0), &Noise::sample(&lay, 3, &mut rng_from_seed(5)), NormMode::Frozen).unwrap();
        let tr = &traces[1];
        let mut tx = TransmitterState::new(lay, msgs.message(1)).unwrap();
        let mut rx = ReceiverState::new(lay);
        for tau in 1..=lay.rounds {
            rx.receive_forward(&tr.forward_rx[tau - 1]).unwrap();
            if tau < lay.rounds {
                rx.record_feedback(&tr.feedback[tau - 1]).unwrap();
                tx.advance(&tr.forward[tau - 1], &tr.feedback_rx[tau - 1]).unwrap();
            }
        }
        let decoded = jpsd(&model, &rx).unwrap();
        assert_eq!(decoded.bits, tr.decoded_bits);
        assert_eq!(decoded.labels, tr.labels);
        for row in decoded.probabilities {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn incomplete_receiver_cannot_decode() {
        let model = frozen_model(FeedbackMode::Active);
        let rx = ReceiverState::new(model.config.protocol.layout());
        assert!(jpsd(&model, &rx).is_err());
    }

    #[test]
    fn systematic_first_round_is_bpsk() {
        let model = frozen_model(FeedbackMode::SystematicFirst);
        let msgs = MessageBatch::random(4, 12, &mut rng_from_seed(6));
        let lay = model.config.protocol.layout();
        let traces = run_traces(&model, &msgs, Snrs::new(2.0, 20.0), &Noise::sample(&lay, 4, &mut rng_from_seed(7)), NormMode::Frozen).unwrap();
        for (b, tr) in traces.iter().enumerate() {
            let expect: Vec<f64> = msgs.message(b).iter().map(|&x| 2.0 * f64::from(x) - 1.0).collect();
            assert_eq!(tr.forward[0], expect);
            assert_eq!(tr.forward[1].len(), 4);
        }
    }

    #[test]
    fn frozen_mode_requires_frozen_stats() {
        let model = Model::<f64>::new(&tiny(FeedbackMode::Active), 1).unwrap();
        let err = run_episode(&model, &[0; 12], Snrs::new(0.0, 20.0), &mut rng_from_seed(0));
        assert!(err.is_err());
    }

    #[test]
    fn identical_messages_and_noise_give_identical_rows() {
        let model = frozen_model(FeedbackMode::Active);
        let lay = model.config.protocol.layout();
        let one = MessageBatch::random(1, 12, &mut rng_from_seed(8));
        let mut bits = one.bits.clone();
        bits.extend_from_slice(&one.bits);
        let two = MessageBatch::new(12, bits).unwrap();
        let single = Noise::sample(&lay, 1, &mut rng_from_seed(9));
        let doubled = Noise {
            forward: single.forward.iter().map(|z| [z.clone(), z.clone()].concat()).collect(),
            feedback: single.feedback.iter().map(|z| [z.clone(), z.clone()].concat()).collect(),
        };
        let traces = run_traces(&model, &two, Snrs::new(2.0, 20.0), &doubled, NormMode::Frozen).unwrap();
        assert_eq!(traces[0].forward, traces[1].forward);
        assert_eq!(traces[0].feedback, traces[1].feedback);
        assert_eq!(traces[0].logits, traces[1].logits);
    }
}
