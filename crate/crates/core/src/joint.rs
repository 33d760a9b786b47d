//! Label-synchronous beam search scoring each extension with
//! `λ · CTC prefix score + (1 − λ) · attention log probability`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{PhoneInventory, Symbol, EOS, FIRST_PHONE};
use crate::ctc::{CtcPrefixScorer, CtcPrefixState, Posteriorgram};
use crate::error::{Error, Result};
use crate::hypothesis::{Hypothesis, StepRecord};
use crate::model::{Decoder, DecoderState, EncodedMemory, ModelParams, PromptEncoding};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointConfig {
    /// CTC weight.
    pub lambda: f64,
    pub beam_width: usize,
    pub max_output_len: usize,
    /// Alternatives recorded per decoding step, emitted symbol included.
    pub nbest_per_step: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            lambda: 0.3,
            beam_width: 8,
            max_output_len: 64,
            nbest_per_step: 5,
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.beam_width == 0 {
            return Err(Error::invalid("beam width must be at least 1"));
        }
        if self.max_output_len == 0 {
            return Err(Error::invalid("max_output_len must be at least 1"));
        }
        if !(1..=5).contains(&self.nbest_per_step) {
            return Err(Error::invalid("nbest_per_step must be in 1..=5"));
        }
        Ok(())
    }
}

#[derive(Clone)]
struct Beam {
    symbols: Vec<Symbol>,
    ctc: Option<CtcPrefixState>,
    dec: Option<DecoderState>,
    ctc_score: f64,
    att_score: f64,
    score: f64,
    steps: Vec<StepRecord>,
}

struct Candidate {
    parent: usize,
    symbol: Symbol,
    ctc_inc: f64,
    att_inc: f64,
    score: f64,
    seq: Vec<Symbol>,
}

/// Descending score, then lexicographic symbol sequence.
fn rank(a_score: f64, a_seq: &[Symbol], b_score: f64, b_seq: &[Symbol]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_seq.cmp(b_seq))
}

fn weighted(lambda: f64, ctc: f64, att: f64) -> f64 {
    // a zero weight drops its term so that -inf never meets 0
    match lambda {
        1.0 => ctc,
        0.0 => att,
        l => l * ctc + (1.0 - l) * att,
    }
}

pub fn joint_beam_search(
    params: &ModelParams,
    post: &Posteriorgram,
    memory: &EncodedMemory,
    prompt: Option<&PromptEncoding>,
    cfg: &JointConfig,
) -> Result<Hypothesis> {
    cfg.validate()?;
    if post.frames() != memory.frames() {
        return Err(Error::Dimension {
            context: "posteriorgram frames vs memory frames",
            expected: memory.frames(),
            actual: post.frames(),
        });
    }
    if post.num_symbols() != params.shape.vocab {
        return Err(Error::Dimension {
            context: "posteriorgram symbols",
            expected: params.shape.vocab,
            actual: post.num_symbols(),
        });
    }
    let use_ctc = cfg.lambda > 0.0;
    let use_att = cfg.lambda < 1.0;
    let scorer = CtcPrefixScorer::new(post);
    let mut decoder = Decoder::new(params, memory, prompt)?;
    let vocab = params.shape.vocab;

    let mut live = vec![Beam {
        symbols: Vec::new(),
        ctc: use_ctc.then(|| scorer.initial()),
        dec: use_att.then(|| decoder.initial_state()),
        ctc_score: 0.0,
        att_score: 0.0,
        score: 0.0,
        steps: Vec::new(),
    }];
    let mut finished: Vec<Beam> = Vec::new();

    for len in 0..=cfg.max_output_len {
        let mut expansions = Vec::with_capacity(live.len());
        let mut cands: Vec<Candidate> = Vec::new();
        for (bi, beam) in live.iter().enumerate() {
            let out = match &beam.dec {
                Some(s) => Some(decoder.step(s)?),
                None => None,
            };
            let mut next_ctc: Vec<Option<CtcPrefixState>> = vec![None; vocab];
            let symbols: Vec<Symbol> = if len == cfg.max_output_len {
                vec![EOS]
            } else {
                std::iter::once(EOS).chain(FIRST_PHONE..vocab).collect()
            };
            for c in symbols {
                let att_inc = out.as_ref().map_or(0.0, |o| o.log_probs[c]);
                let ctc_inc = match &beam.ctc {
                    None => 0.0,
                    Some(st) if c == EOS => scorer.closure(st),
                    Some(st) => {
                        let (inc, ns) = scorer.advance(st, c)?;
                        next_ctc[c] = Some(ns);
                        inc
                    }
                };
                let inc = weighted(cfg.lambda, ctc_inc, att_inc);
                if inc == f64::NEG_INFINITY || inc.is_nan() {
                    continue;
                }
                let mut seq = beam.symbols.clone();
                seq.push(c);
                cands.push(Candidate {
                    parent: bi,
                    symbol: c,
                    ctc_inc,
                    att_inc,
                    score: beam.score + inc,
                    seq,
                });
            }
            expansions.push((out, next_ctc));
        }
        if cands.is_empty() {
            break;
        }
        cands.sort_by(|a, b| rank(a.score, &a.seq, b.score, &b.seq));
        cands.truncate(cfg.beam_width);

        let mut next_live = Vec::new();
        for cand in &cands {
            let parent = &live[cand.parent];
            let (out, next_ctc) = &expansions[cand.parent];
            let mut beam = Beam {
                symbols: parent.symbols.clone(),
                ctc: None,
                dec: None,
                ctc_score: parent.ctc_score + cand.ctc_inc,
                att_score: parent.att_score + cand.att_inc,
                score: cand.score,
                steps: parent.steps.clone(),
            };
            if cand.symbol == EOS {
                finished.push(beam);
                continue;
            }
            beam.symbols.push(cand.symbol);
            beam.ctc = next_ctc[cand.symbol].clone();
            beam.dec = out.as_ref().map(|o| {
                let mut s = o.state.clone();
                s.c_prev = cand.symbol;
                s
            });
            beam.steps.push(step_record(parent, cand, out.as_ref().map(|o| o.attention.peak()), cfg, || {
                sibling_scores(parent, out.as_ref().map(|o| &o.log_probs[..]), next_ctc, cfg.lambda, vocab)
            }));
            next_live.push(beam);
        }
        live = next_live;

        let best_finished = finished.iter().map(|b| b.score).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|b| b.score).fold(f64::NEG_INFINITY, f64::max);
        // scores only decrease as hypotheses grow
        if live.is_empty() || (best_finished > f64::NEG_INFINITY && best_finished >= best_live) {
            break;
        }
    }

    let best = finished
        .into_iter()
        .min_by(|a, b| rank(a.score, &a.symbols, b.score, &b.symbols))
        .ok_or_else(|| Error::invalid("beam search produced no complete hypothesis"))?;
    Ok(Hypothesis {
        symbols: best.symbols,
        score: best.score,
        ctc_score: best.ctc_score,
        att_score: best.att_score,
        steps: best.steps,
    })
}

/// Joint increments of every phone extension of `parent`.
fn sibling_scores(
    parent: &Beam,
    att: Option<&[f64]>,
    next_ctc: &[Option<CtcPrefixState>],
    lambda: f64,
    vocab: usize,
) -> Vec<(Symbol, f64)> {
    (FIRST_PHONE..vocab)
        .filter_map(|c| {
            let att_inc = att.map_or(0.0, |a| a[c]);
            let ctc_inc = match (&parent.ctc, &next_ctc[c]) {
                (None, _) => 0.0,
                (Some(p), Some(n)) if n.score > f64::NEG_INFINITY => n.score - p.score,
                _ => f64::NEG_INFINITY,
            };
            let inc = weighted(lambda, ctc_inc, att_inc);
            (inc > f64::NEG_INFINITY).then_some((c, inc))
        })
        .collect()
}

fn step_record(
    parent: &Beam,
    cand: &Candidate,
    peak: Option<usize>,
    cfg: &JointConfig,
    siblings: impl FnOnce() -> Vec<(Symbol, f64)>,
) -> StepRecord {
    let own = cand.score - parent.score;
    let mut others: Vec<(Symbol, f64)> = siblings().into_iter().filter(|&(c, _)| c != cand.symbol).collect();
    others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut alternatives = vec![(cand.symbol, own)];
    alternatives.extend(others.into_iter().take(cfg.nbest_per_step - 1));
    StepRecord {
        symbol: cand.symbol,
        score: own,
        alternatives,
        peak_frame: peak.unwrap_or(0),
    }
}

/// Beam search over the attention decoder alone.
pub fn attention_beam_search(
    params: &ModelParams,
    memory: &EncodedMemory,
    prompt: Option<&PromptEncoding>,
    beam_width: usize,
    max_output_len: usize,
) -> Result<Vec<Symbol>> {
    if beam_width == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    let mut decoder = Decoder::new(params, memory, prompt)?;
    let mut live: Vec<(f64, Vec<Symbol>, DecoderState)> = vec![(0.0, Vec::new(), decoder.initial_state())];
    let mut done: Vec<(f64, Vec<Symbol>)> = Vec::new();
    for len in 0..=max_output_len {
        let mut cands: Vec<(f64, Vec<Symbol>, DecoderState)> = Vec::new();
        for (score, seq, state) in &live {
            let out = decoder.step(state)?;
            let allowed: Vec<Symbol> = if len == max_output_len {
                vec![EOS]
            } else {
                std::iter::once(EOS).chain(FIRST_PHONE..params.shape.vocab).collect()
            };
            for c in allowed {
                let mut s = seq.clone();
                s.push(c);
                let mut st = out.state.clone();
                st.c_prev = c;
                cands.push((score + out.log_probs[c], s, st));
            }
        }
        cands.sort_by(|a, b| rank(a.0, &a.1, b.0, &b.1));
        cands.truncate(beam_width);
        live.clear();
        for (score, mut seq, st) in cands {
            if seq.last() == Some(&EOS) {
                seq.pop();
                done.push((score, seq));
            } else {
                live.push((score, seq, st));
            }
        }
        let best_done = done.iter().map(|d| d.0).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || live.iter().all(|l| l.0 <= best_done) {
            break;
        }
    }
    done.into_iter()
        .min_by(|a, b| rank(a.0, &a.1, b.0, &b.1))
        .map(|d| d.1)
        .ok_or_else(|| Error::invalid("beam search produced no complete hypothesis"))
}

/// One dump line: `id \t phones \t score \t sym:score|alt:score|…@peak …`.
pub fn format_hypothesis(inv: &PhoneInventory, id: &str, hyp: &Hypothesis) -> String {
    let mut fields = vec![id.to_string(), inv.render(&hyp.symbols), format!("{}", hyp.score)];
    for step in &hyp.steps {
        let alts: Vec<String> = step
            .alternatives
            .iter()
            .map(|(s, v)| format!("{}:{}", inv.label(*s), v))
            .collect();
        fields.push(format!("{}@{}", alts.join("|"), step.peak_frame));
    }
    fields.join("\t")
}

pub fn parse_hypothesis(inv: &PhoneInventory, line: &str) -> Result<(String, Hypothesis)> {
    let bad = |msg: &str| Error::invalid(format!("hypothesis line {line:?}: {msg}"));
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() < 3 {
        return Err(bad("expected at least three tab-separated fields"));
    }
    let symbols = inv.parse(fields[1])?;
    let score: f64 = fields[2].parse().map_err(|_| bad("bad total score"))?;
    let mut steps = Vec::new();
    for f in &fields[3..] {
        let (alts, peak) = f.rsplit_once('@').ok_or_else(|| bad("step without @peak"))?;
        let peak_frame: usize = peak.parse().map_err(|_| bad("bad peak frame"))?;
        let mut alternatives = Vec::new();
        for a in alts.split('|') {
            let (sym, v) = a.rsplit_once(':').ok_or_else(|| bad("alternative without score"))?;
            alternatives.push((inv.phone_index(sym)?, v.parse::<f64>().map_err(|_| bad("bad score"))?));
        }
        let &(symbol, step_score) = alternatives.first().ok_or_else(|| bad("empty step"))?;
        steps.push(StepRecord {
            symbol,
            score: step_score,
            alternatives,
            peak_frame,
        });
    }
    if steps.len() != symbols.len() || steps.iter().zip(&symbols).any(|(s, &c)| s.symbol != c) {
        return Err(bad("step records do not match the phone sequence"));
    }
    Ok((
        fields[0].to_string(),
        Hypothesis {
            symbols,
            score,
            ctc_score: 0.0,
            att_score: 0.0,
            steps,
        },
    ))
}

#[cfg(test)]
mod tests;
