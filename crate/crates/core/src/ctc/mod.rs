//! CTC dynamic programming: loss and gradient, prefix scoring for joint decoding,
//! prefix beam search, and prompt-constrained position posteriors.

mod beam;
mod forward_backward;
mod prefix;
mod prompt;

pub use beam::{ctc_beam_decode, ctc_beam_decode_with, forced_alignment};
pub(crate) use forward_backward::grad_from;
pub use forward_backward::{ctc_grad, ctc_loss, feasible_frames, forward_backward, ForwardBackward};
pub use prefix::{CtcPrefixScorer, CtcPrefixState};
pub use prompt::{prompt_position_posterior, Pooling, PromptPosterior};

use crate::corpus::BLANK;
use crate::error::{Error, Result};
use crate::numerics::{masked_log_softmax, Mat};

/// Per-frame symbol probabilities over the full inventory (blank at column 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriorgram {
    probs: Mat,
    log_probs: Vec<f64>,
}

impl Posteriorgram {
    /// Validates rows as probability distributions.
    pub fn new(probs: Mat) -> Result<Self> {
        if probs.rows() == 0 || probs.cols() < BLANK + 1 {
            return Err(Error::EmptyInput("posteriorgram"));
        }
        for (t, row) in probs.row_iter().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::invalid(format!("frame {t} has an entry outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("frame {t} sums to {s}")));
            }
        }
        let log_probs = probs.as_slice().iter().map(|p| p.ln()).collect();
        Ok(Posteriorgram { probs, log_probs })
    }

    /// Row-wise softmax of `logits`; columns outside `mask` get probability zero.
    pub fn from_logits(logits: &Mat, mask: Option<&[bool]>) -> Self {
        let (t, v) = logits.shape();
        let mut log_probs = Vec::with_capacity(t * v);
        for row in logits.row_iter() {
            log_probs.extend(masked_log_softmax(row, mask));
        }
        let probs = Mat::from_raw(t, v, log_probs.iter().map(|l| l.exp()).collect());
        Posteriorgram { probs, log_probs }
    }

    pub fn frames(&self) -> usize {
        self.probs.rows()
    }

    pub fn num_symbols(&self) -> usize {
        self.probs.cols()
    }

    pub fn probs(&self) -> &Mat {
        &self.probs
    }

    #[inline]
    pub fn prob(&self, t: usize, k: usize) -> f64 {
        self.probs.get(t, k)
    }

    #[inline]
    pub fn log_prob(&self, t: usize, k: usize) -> f64 {
        self.log_probs[t * self.probs.cols() + k]
    }

    pub fn log_row(&self, t: usize) -> &[f64] {
        let v = self.probs.cols();
        &self.log_probs[t * v..(t + 1) * v]
    }

    pub(crate) fn check_label(&self, s: usize) -> Result<()> {
        if s == BLANK {
            return Err(Error::BlankSymbol);
        }
        if s >= self.num_symbols() {
            return Err(Error::UnknownSymbol(format!("symbol index {s}")));
        }
        Ok(())
    }
}
