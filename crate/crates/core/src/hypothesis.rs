use crate::corpus::Symbol;
use crate::error::{Error, Result};

/// What the decoder knew when it emitted one symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub symbol: Symbol,
    pub score: f64,
    /// Ranked candidates at this step: the emitted symbol first, then the
    /// strongest competitors in descending score order.
    pub alternatives: Vec<(Symbol, f64)>,
    /// Frame with the highest acoustic attention (or posterior) at this step.
    pub peak_frame: usize,
}

/// A decoded phone sequence with its scores and per-step N-best lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub symbols: Vec<Symbol>,
    /// Total joint log score.
    pub score: f64,
    /// CTC component of `score` (log prefix/sequence probability).
    pub ctc_score: f64,
    /// Attention component of `score`.
    pub att_score: f64,
    pub steps: Vec<StepRecord>,
}

impl Hypothesis {
    pub fn empty() -> Self {
        Hypothesis {
            symbols: Vec::new(),
            score: 0.0,
            ctc_score: 0.0,
            att_score: 0.0,
            steps: Vec::new(),
        }
    }
}

/// Top-`n` symbols recorded at decoding step `position`, in rank order.
pub fn step_nbest(hyp: &Hypothesis, position: usize, n: usize) -> Result<Vec<Symbol>> {
    let step = hyp.steps.get(position).ok_or_else(|| {
        Error::invalid(format!(
            "step {position} out of range for a hypothesis with {} steps",
            hyp.steps.len()
        ))
    })?;
    if n == 0 || n > step.alternatives.len() {
        return Err(Error::invalid(format!(
            "n = {n} outside 1..={}",
            step.alternatives.len()
        )));
    }
    Ok(step.alternatives[..n].iter().map(|&(s, _)| s).collect())
}
