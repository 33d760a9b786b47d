//! Per-position mispronunciation verdicts: recognition-and-alignment with an
//! N-best relaxation, and a calibrated confidence threshold.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{PhoneInventory, Symbol};
use crate::error::{Error, Result};
use crate::eval::{metrics, EvalCounts};
use crate::hypothesis::{step_nbest, Hypothesis};
use crate::model::{Decoder, EncodedMemory, ModelParams, PromptEncoding};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentOp {
    Match {
        prompt_index: usize,
        hyp_index: usize,
        phone: Symbol,
    },
    Substitute {
        prompt_index: usize,
        hyp_index: usize,
        prompt_phone: Symbol,
        hyp_phone: Symbol,
    },
    Delete {
        prompt_index: usize,
        prompt_phone: Symbol,
    },
    Insert {
        hyp_index: usize,
        hyp_phone: Symbol,
    },
}

impl AlignmentOp {
    pub fn cost(&self) -> usize {
        match self {
            AlignmentOp::Match { .. } => 0,
            _ => 1,
        }
    }
}

/// Minimum edit-distance alignment (unit costs). Among equal-cost paths the
/// backtrace prefers match, then substitute, then delete, then insert.
pub fn align(prompt: &[Symbol], hyp: &[Symbol]) -> Vec<AlignmentOp> {
    let (n, m) = (prompt.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + (prompt[i - 1] != hyp[j - 1]) as usize;
            d[i * w + j] = sub.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let diag = d[(i - 1) * w + j - 1];
            if prompt[i - 1] == hyp[j - 1] && diag == here {
                ops.push(AlignmentOp::Match {
                    prompt_index: i - 1,
                    hyp_index: j - 1,
                    phone: prompt[i - 1],
                });
                i -= 1;
                j -= 1;
                continue;
            }
            if prompt[i - 1] != hyp[j - 1] && diag + 1 == here {
                ops.push(AlignmentOp::Substitute {
                    prompt_index: i - 1,
                    hyp_index: j - 1,
                    prompt_phone: prompt[i - 1],
                    hyp_phone: hyp[j - 1],
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            ops.push(AlignmentOp::Delete {
                prompt_index: i - 1,
                prompt_phone: prompt[i - 1],
            });
            i -= 1;
        } else {
            ops.push(AlignmentOp::Insert {
                hyp_index: j - 1,
                hyp_phone: hyp[j - 1],
            });
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

pub fn alignment_cost(ops: &[AlignmentOp]) -> usize {
    ops.iter().map(AlignmentOp::cost).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cause {
    Substitution(Symbol),
    Deletion,
    LowConfidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Correct,
    Mispronounced(Cause),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdVerdict {
    pub prompt_index: usize,
    pub verdict: Verdict,
    /// Decision-function value (confidence mode only).
    pub score: Option<f64>,
}

impl MdVerdict {
    pub fn is_mispronounced(&self) -> bool {
        matches!(self.verdict, Verdict::Mispronounced(_))
    }
}

/// Recognition-based decision. A substituted prompt phone is forgiven when it
/// is among the top `n` candidates at the aligned decoding step.
pub fn decide_sr(prompt: &[Symbol], hyp: &Hypothesis, n: usize) -> Result<Vec<MdVerdict>> {
    if n == 0 {
        return Err(Error::invalid("n-best depth must be at least 1"));
    }
    let mut out = Vec::with_capacity(prompt.len());
    for op in align(prompt, &hyp.symbols) {
        let (prompt_index, verdict) = match op {
            AlignmentOp::Match { prompt_index, .. } => (prompt_index, Verdict::Correct),
            AlignmentOp::Substitute {
                prompt_index,
                hyp_index,
                prompt_phone,
                hyp_phone,
            } => {
                let relaxed = match hyp.steps.get(hyp_index) {
                    Some(step) if n > 1 => {
                        let depth = n.min(step.alternatives.len());
                        step_nbest(hyp, hyp_index, depth)?.contains(&prompt_phone)
                    }
                    _ => false,
                };
                let v = if relaxed {
                    Verdict::Correct
                } else {
                    Verdict::Mispronounced(Cause::Substitution(hyp_phone))
                };
                (prompt_index, v)
            }
            AlignmentOp::Delete { prompt_index, .. } => (prompt_index, Verdict::Mispronounced(Cause::Deletion)),
            AlignmentOp::Insert { .. } => continue,
        };
        out.push(MdVerdict {
            prompt_index,
            verdict,
            score: None,
        });
    }
    Ok(out)
}

/// `1 / (1 + exp(p))` for a position posterior `p`.
pub fn confidence_d(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("posterior {p} outside [0, 1]")));
    }
    Ok(1.0 / (1.0 + p.exp()))
}

/// Which side of the threshold is flagged as mispronounced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    /// Flag when `score < tau` (the indicator `score ≥ tau` is 0).
    FlagBelow,
    /// Flag when `score > tau`.
    FlagAbove,
}

impl Polarity {
    pub fn flags(self, score: f64, tau: f64) -> bool {
        match self {
            Polarity::FlagBelow => score < tau,
            Polarity::FlagAbove => score > tau,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Polarity::FlagBelow => "flag-below",
            Polarity::FlagAbove => "flag-above",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "flag-below" => Ok(Polarity::FlagBelow),
            "flag-above" => Ok(Polarity::FlagAbove),
            _ => Err(Error::invalid(format!("unknown polarity {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceCalibration {
    pub tau: f64,
    pub polarity: Polarity,
    pub dev_f1: f64,
    pub dev_recall: f64,
    /// Candidate thresholds, ascending.
    pub grid: Vec<f64>,
}

/// Distinct sorted scores, their midpoints, and one value beyond each end.
pub fn threshold_grid(scores: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut grid = Vec::with_capacity(s.len() + 1);
    grid.push(s[0] - 1.0);
    grid.extend(s.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    grid.push(s[s.len() - 1] + 1.0);
    grid
}

/// Picks the threshold and polarity maximizing dev F1 for the mispronounced
/// class; ties go to the higher recall, then to the earlier candidate.
pub fn calibrate_tau(dev: &[(f64, bool)]) -> Result<ConfidenceCalibration> {
    let pos = dev.iter().filter(|d| d.1).count();
    if pos == 0 || pos == dev.len() {
        return Err(Error::invalid("calibration needs both classes in the dev set"));
    }
    if dev.iter().any(|d| !d.0.is_finite()) {
        return Err(Error::NonFinite("dev scores"));
    }
    let grid = threshold_grid(&dev.iter().map(|d| d.0).collect::<Vec<_>>());
    let mut sorted = dev.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // below[g] = (count, positives) of scores under grid[g]
    let mut below = Vec::with_capacity(grid.len());
    let (mut k, mut tp) = (0usize, 0usize);
    for &tau in &grid {
        while k < sorted.len() && sorted[k].0 < tau {
            tp += sorted[k].1 as usize;
            k += 1;
        }
        below.push((k, tp));
    }

    let mut best: Option<(f64, f64, f64, Polarity)> = None;
    for polarity in [Polarity::FlagBelow, Polarity::FlagAbove] {
        for (g, &tau) in grid.iter().enumerate() {
            let (n_below, tp_below) = below[g];
            let (c_d, c_dh) = match polarity {
                Polarity::FlagBelow => (n_below, tp_below),
                // every grid point sits strictly between scores, so "above" is the complement
                Polarity::FlagAbove => (sorted.len() - n_below, pos - tp_below),
            };
            let m = metrics(EvalCounts { c_d, c_h: pos, c_dh });
            let better = match best {
                None => true,
                Some((f1, recall, _, _)) => m.f1 > f1 || (m.f1 == f1 && m.recall > recall),
            };
            if better {
                best = Some((m.f1, m.recall, tau, polarity));
            }
        }
    }
    let (dev_f1, dev_recall, tau, polarity) = best.expect("grid is never empty");
    Ok(ConfidenceCalibration {
        tau,
        polarity,
        dev_f1,
        dev_recall,
        grid,
    })
}

/// Confidence-based decision over per-position posteriors.
pub fn decide_confidence(posteriors: &[f64], cal: &ConfidenceCalibration) -> Result<Vec<MdVerdict>> {
    posteriors
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let d = confidence_d(p)?;
            let verdict = if cal.polarity.flags(d, cal.tau) {
                Verdict::Mispronounced(Cause::LowConfidence)
            } else {
                Verdict::Correct
            };
            Ok(MdVerdict {
                prompt_index: i,
                verdict,
                score: Some(d),
            })
        })
        .collect()
}

/// Where confidence mode reads `P(z_i | X)` from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorSource {
    /// Occupancy of the prompt position under CTC forced alignment.
    #[default]
    Ctc,
    /// Attention decoder probability of the prompt phone, teacher-forced on the prompt.
    Attention,
}

/// Teacher-forced attention-decoder probability of each prompt phone.
pub fn attention_position_posterior(
    params: &ModelParams,
    memory: &EncodedMemory,
    prompt_enc: Option<&PromptEncoding>,
    prompt: &[Symbol],
) -> Result<Vec<f64>> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput("prompt"));
    }
    let mut dec = Decoder::new(params, memory, prompt_enc)?;
    let mut state = dec.initial_state();
    let mut out = Vec::with_capacity(prompt.len());
    for &z in prompt {
        let step = dec.step(&state)?;
        let lp = *step
            .log_probs
            .get(z)
            .ok_or_else(|| Error::UnknownSymbol(format!("index {z}")))?;
        out.push(lp.exp().clamp(0.0, 1.0));
        state = step.state;
        state.c_prev = z;
    }
    Ok(out)
}

/// Verdicts for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceVerdicts {
    pub id: String,
    pub prompt: Vec<Symbol>,
    pub verdicts: Vec<MdVerdict>,
}

/// `id \t position \t prompt_phone \t verdict \t cause \t score`, one line per position.
pub fn format_verdicts(inv: &PhoneInventory, utts: &[UtteranceVerdicts]) -> String {
    let mut out = String::new();
    for u in utts {
        for v in &u.verdicts {
            let (verdict, cause) = match v.verdict {
                Verdict::Correct => ("correct", "-".to_string()),
                Verdict::Mispronounced(Cause::Substitution(s)) => ("mispronounced", format!("substitution:{}", inv.label(s))),
                Verdict::Mispronounced(Cause::Deletion) => ("mispronounced", "deletion".to_string()),
                Verdict::Mispronounced(Cause::LowConfidence) => ("mispronounced", "low_confidence".to_string()),
            };
            let score = v.score.map_or_else(|| "-".to_string(), |s| s.to_string());
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{verdict}\t{cause}\t{score}",
                u.id,
                v.prompt_index,
                inv.label(u.prompt[v.prompt_index])
            );
        }
    }
    out
}

pub fn parse_verdicts(inv: &PhoneInventory, text: &str) -> Result<Vec<UtteranceVerdicts>> {
    let mut out: Vec<UtteranceVerdicts> = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| Error::invalid(format!("verdict line {}: {what}", n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let prompt_index: usize = f[1].parse().map_err(|_| bad("bad position"))?;
        let phone = inv.phone_index(f[2])?;
        let verdict = match (f[3], f[4]) {
            ("correct", "-") => Verdict::Correct,
            ("mispronounced", "deletion") => Verdict::Mispronounced(Cause::Deletion),
            ("mispronounced", "low_confidence") => Verdict::Mispronounced(Cause::LowConfidence),
            ("mispronounced", c) => match c.strip_prefix("substitution:") {
                Some(p) => Verdict::Mispronounced(Cause::Substitution(inv.phone_index(p)?)),
                None => return Err(bad("unknown cause")),
            },
            _ => return Err(bad("unknown verdict")),
        };
        let score = match f[5] {
            "-" => None,
            s => Some(s.parse::<f64>().map_err(|_| bad("bad score"))?),
        };
        if out.last().is_none_or(|u| u.id != f[0]) {
            out.push(UtteranceVerdicts {
                id: f[0].to_string(),
                prompt: Vec::new(),
                verdicts: Vec::new(),
            });
        }
        let u = out.last_mut().expect("just pushed");
        if prompt_index != u.prompt.len() {
            return Err(bad("positions must be consecutive from 0"));
        }
        u.prompt.push(phone);
        u.verdicts.push(MdVerdict {
            prompt_index,
            verdict,
            score,
        });
    }
    Ok(out)
}

pub fn format_calibration(cal: &ConfidenceCalibration) -> String {
    format!(
        "tau\t{}\npolarity\t{}\ndev_f1\t{}\ndev_recall\t{}\n",
        cal.tau,
        cal.polarity.name(),
        cal.dev_f1,
        cal.dev_recall
    )
}

/// Reads a calibration file; the sweep grid is not stored and comes back empty.
pub fn parse_calibration(text: &str) -> Result<ConfidenceCalibration> {
    let mut tau = None;
    let mut polarity = None;
    let mut f1 = None;
    let mut recall = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('\t')
            .ok_or_else(|| Error::invalid(format!("bad calibration line {line:?}")))?;
        let num = || v.parse::<f64>().map_err(|_| Error::invalid(format!("bad number {v:?}")));
        match k {
            "tau" => tau = Some(num()?),
            "polarity" => polarity = Some(Polarity::parse(v)?),
            "dev_f1" => f1 = Some(num()?),
            "dev_recall" => recall = Some(num()?),
            _ => return Err(Error::invalid(format!("unknown calibration key {k:?}"))),
        }
    }
    match (tau, polarity, f1, recall) {
        (Some(tau), Some(polarity), Some(dev_f1), Some(dev_recall)) => Ok(ConfidenceCalibration {
            tau,
            polarity,
            dev_f1,
            dev_recall,
            grid: Vec::new(),
        }),
        _ => Err(Error::MissingKeys("tau, polarity, dev_f1, dev_recall".into())),
    }
}
