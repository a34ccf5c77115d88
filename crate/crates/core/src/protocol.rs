//! Knowledge bookkeeping for the alternating forward/feedback protocol.
//!
//! A message of `K = l * m` bits is split into `l` blocks. In every round the
//! transmitter sends one symbol per block (or, for the first round of the
//! systematic mode, the `m` BPSK symbols of the block) and, except after the
//! last round, the receiver answers with the same number of feedback symbols.
//!
//! Each party sees its knowledge as `l` fixed-width rows, one per block:
//!
//! ```text
//! transmitter: [ bpsk(b_i) | c(1..τ-1)_i, zero padded | ỹ(1..τ-1)_i, zero padded ]
//! receiver:    [ y(1..τ)_i, zero padded               | c̃(1..τ-1)_i, zero padded ]
//! ```
//!
//! The receiver layout is shared by the feedback network and the decoder.

use crate::config::{Accounting, FeedbackMode, ProtocolConfig};
use crate::error::{Error, Result};

/// Column layout of the knowledge rows for one protocol configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KnowledgeLayout {
    pub m: usize,
    pub l: usize,
    pub rounds: usize,
    pub systematic: bool,
}

impl KnowledgeLayout {
    pub fn new(cfg: &ProtocolConfig) -> Self {
        KnowledgeLayout {
            m: cfg.m,
            l: cfg.l,
            rounds: cfg.rounds,
            systematic: cfg.feedback_mode == FeedbackMode::SystematicFirst,
        }
    }

    /// Symbols per block sent in round `tau` (1-based), in either direction.
    pub fn round_width(&self, tau: usize) -> usize {
        if self.systematic && tau == 1 {
            self.m
        } else {
            1
        }
    }

    fn widths_before(&self, tau: usize) -> usize {
        (1..tau).map(|t| self.round_width(t)).sum()
    }

    /// Width reserved for the parity (or feedback) history of rounds `1..T-1`.
    pub fn history_width(&self) -> usize {
        self.widths_before(self.rounds)
    }

    /// Width reserved for the forward observations of rounds `1..T`.
    pub fn forward_width(&self) -> usize {
        self.widths_before(self.rounds + 1)
    }

    pub fn tx_width(&self) -> usize {
        self.m + 2 * self.history_width()
    }

    pub fn rx_width(&self) -> usize {
        self.forward_width() + self.history_width()
    }

    pub fn tx_parity_offset(&self, tau: usize) -> usize {
        self.m + self.widths_before(tau)
    }

    pub fn tx_feedback_offset(&self, tau: usize) -> usize {
        self.m + self.history_width() + self.widths_before(tau)
    }

    pub fn rx_forward_offset(&self, tau: usize) -> usize {
        self.widths_before(tau)
    }

    pub fn rx_feedback_offset(&self, tau: usize) -> usize {
        self.forward_width() + self.widths_before(tau)
    }

    /// Whether round `tau` is produced by the parity network.
    pub fn parity_is_learned(&self, tau: usize) -> bool {
        !(self.systematic && tau == 1)
    }
}

/// Forward uses `N`, feedback uses `Ñ` and the number of direction changes.
pub fn accounting(cfg: &ProtocolConfig) -> Accounting {
    let layout = KnowledgeLayout::new(cfg);
    Accounting {
        forward_uses: cfg.l * layout.forward_width(),
        feedback_uses: cfg.l * layout.history_width(),
        direction_changes: 2 * cfg.rounds - 1,
    }
}

/// Maps bits to BPSK symbols, `2b - 1`.
pub fn bpsk(bits: &[u8]) -> Vec<f64> {
    bits.iter().map(|&b| 2.0 * f64::from(b) - 1.0).collect()
}

/// Scale that keeps relayed observations of unit-power symbols at unit power.
pub fn compute_alpha(sigma2_ff: f64) -> Result<f64> {
    if !(sigma2_ff >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "forward noise variance must be >= 0 (got {sigma2_ff})"
        )));
    }
    Ok(1.0 / (1.0 + sigma2_ff).sqrt())
}

/// Passive feedback: the receiver relays `alpha * y`.
pub fn passive_feedback(y: &[f64], alpha: f64) -> Vec<f64> {
    y.iter().map(|&v| alpha * v).collect()
}

/// First round of the systematic mode: the bits themselves in BPSK form,
/// relayed back by the receiver.
#[derive(Clone, Debug, PartialEq)]
pub struct SystematicFirstBlock {
    pub forward: Vec<f64>,
    pub alpha: f64,
}

impl SystematicFirstBlock {
    pub fn relay(&self, y: &[f64]) -> Vec<f64> {
        passive_feedback(y, self.alpha)
    }
}

pub fn systematic_first_block(bits: &[u8], sigma2_ff: f64) -> Result<SystematicFirstBlock> {
    if bits.iter().any(|&b| b > 1) {
        return Err(Error::InvalidArgument("bits must be 0 or 1".into()));
    }
    Ok(SystematicFirstBlock {
        forward: bpsk(bits),
        alpha: compute_alpha(sigma2_ff)?,
    })
}

fn check_round(layout: &KnowledgeLayout, tau: usize, symbols: &[f64], what: &str) -> Result<()> {
    let want = layout.l * layout.round_width(tau);
    if symbols.len() != want {
        return Err(Error::shape(what, want, symbols.len()));
    }
    Ok(())
}

/// Everything the transmitter knows at the start of round `tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmitterState {
    layout: KnowledgeLayout,
    bits: Vec<u8>,
    sent_parity: Vec<Vec<f64>>,
    received_feedback: Vec<Vec<f64>>,
}

impl TransmitterState {
    pub fn new(layout: KnowledgeLayout, bits: &[u8]) -> Result<Self> {
        if bits.len() != layout.l * layout.m {
            return Err(Error::shape("message bits", layout.l * layout.m, bits.len()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("bits must be 0 or 1".into()));
        }
        Ok(TransmitterState {
            layout,
            bits: bits.to_vec(),
            sent_parity: Vec::new(),
            received_feedback: Vec::new(),
        })
    }

    /// Current round, 1-based.
    pub fn tau(&self) -> usize {
        self.sent_parity.len() + 1
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn bit_block(&self, i: usize) -> &[u8] {
        &self.bits[i * self.layout.m..(i + 1) * self.layout.m]
    }

    pub fn sent_parity(&self) -> &[Vec<f64>] {
        &self.sent_parity
    }

    pub fn received_feedback(&self) -> &[Vec<f64>] {
        &self.received_feedback
    }

    /// Records the symbols sent in the current round and the noisy feedback
    /// that came back, moving to the next round.
    pub fn advance(&mut self, parity: &[f64], feedback: &[f64]) -> Result<()> {
        let tau = self.tau();
        if tau >= self.layout.rounds {
            return Err(Error::InvalidArgument(format!(
                "no feedback follows round {tau} of {}",
                self.layout.rounds
            )));
        }
        check_round(&self.layout, tau, parity, "parity symbols")?;
        check_round(&self.layout, tau, feedback, "feedback observations")?;
        self.sent_parity.push(parity.to_vec());
        self.received_feedback.push(feedback.to_vec());
        Ok(())
    }

    /// One row per block, `m + 2 * history_width` wide.
    pub fn knowledge_rows(&self) -> Vec<Vec<f64>> {
        let lay = &self.layout;
        (0..lay.l)
            .map(|i| {
                let mut row = vec![0.0; lay.tx_width()];
                row[..lay.m].copy_from_slice(&bpsk(self.bit_block(i)));
                for (t, (c, yt)) in self.sent_parity.iter().zip(&self.received_feedback).enumerate() {
                    let tau = t + 1;
                    let w = lay.round_width(tau);
                    let po = lay.tx_parity_offset(tau);
                    let fo = lay.tx_feedback_offset(tau);
                    row[po..po + w].copy_from_slice(&c[i * w..(i + 1) * w]);
                    row[fo..fo + w].copy_from_slice(&yt[i * w..(i + 1) * w]);
                }
                row
            })
            .collect()
    }
}

/// Everything the receiver knows: forward observations and the feedback it
/// has sent.
#[derive(Clone, Debug, PartialEq)]
pub struct ReceiverState {
    layout: KnowledgeLayout,
    received_forward: Vec<Vec<f64>>,
    sent_feedback: Vec<Vec<f64>>,
}

impl ReceiverState {
    pub fn new(layout: KnowledgeLayout) -> Self {
        ReceiverState {
            layout,
            received_forward: Vec::new(),
            sent_feedback: Vec::new(),
        }
    }

    pub fn tau(&self) -> usize {
        self.sent_feedback.len() + 1
    }

    pub fn received_forward(&self) -> &[Vec<f64>] {
        &self.received_forward
    }

    pub fn sent_feedback(&self) -> &[Vec<f64>] {
        &self.sent_feedback
    }

    pub fn is_complete(&self) -> bool {
        self.received_forward.len() == self.layout.rounds
            && self.sent_feedback.len() + 1 == self.layout.rounds
    }

    pub fn receive_forward(&mut self, y: &[f64]) -> Result<()> {
        if self.received_forward.len() != self.sent_feedback.len() {
            return Err(Error::InvalidArgument(
                "forward block already received for this round".into(),
            ));
        }
        let tau = self.tau();
        if tau > self.layout.rounds {
            return Err(Error::InvalidArgument("all rounds already received".into()));
        }
        check_round(&self.layout, tau, y, "forward observations")?;
        self.received_forward.push(y.to_vec());
        Ok(())
    }

    pub fn record_feedback(&mut self, c_fb: &[f64]) -> Result<()> {
        let tau = self.tau();
        if self.received_forward.len() != tau || tau >= self.layout.rounds {
            return Err(Error::InvalidArgument(format!(
                "feedback for round {tau} must follow its forward block and precede round T"
            )));
        }
        check_round(&self.layout, tau, c_fb, "feedback symbols")?;
        self.sent_feedback.push(c_fb.to_vec());
        Ok(())
    }

    /// One row per block, `forward_width + history_width` wide.
    pub fn knowledge_rows(&self) -> Vec<Vec<f64>> {
        let lay = &self.layout;
        (0..lay.l)
            .map(|i| {
                let mut row = vec![0.0; lay.rx_width()];
                for (t, y) in self.received_forward.iter().enumerate() {
                    let tau = t + 1;
                    let w = lay.round_width(tau);
                    let o = lay.rx_forward_offset(tau);
                    row[o..o + w].copy_from_slice(&y[i * w..(i + 1) * w]);
                }
                for (t, c) in self.sent_feedback.iter().enumerate() {
                    let tau = t + 1;
                    let w = lay.round_width(tau);
                    let o = lay.rx_feedback_offset(tau);
                    row[o..o + w].copy_from_slice(&c[i * w..(i + 1) * w]);
                }
                row
            })
            .collect()
    }
}
