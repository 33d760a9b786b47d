use std::collections::BTreeMap;

use super::Posteriorgram;
use crate::corpus::BLANK;
use crate::error::{Error, Result};
use crate::hypothesis::{Hypothesis, StepRecord};
use crate::numerics::log_add;

const DEFAULT_NBEST: usize = 5;

/// Prefix beam search with the default per-step N-best depth.
pub fn ctc_beam_decode(post: &Posteriorgram, beam_width: usize) -> Result<Hypothesis> {
    ctc_beam_decode_with(post, beam_width, DEFAULT_NBEST)
}

/// Frame-synchronous prefix beam search over collapsed label sequences.
///
/// Step records come from a Viterbi alignment of the winning sequence: each label's
/// alternatives are the phones ranked by posterior at its peak frame.
pub fn ctc_beam_decode_with(post: &Posteriorgram, beam_width: usize, nbest: usize) -> Result<Hypothesis> {
    if beam_width == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    // prefix -> (log p ending in blank, log p ending in label)
    let mut beam: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
    beam.insert(Vec::new(), (0.0, f64::NEG_INFINITY));
    let v = post.num_symbols();

    for t in 0..post.frames() {
        let lp_blank = post.log_prob(t, BLANK);
        let mut next: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
        for (prefix, &(pb, pnb)) in &beam {
            let total = log_add(pb, pnb);
            let e = next.entry(prefix.clone()).or_insert((f64::NEG_INFINITY, f64::NEG_INFINITY));
            e.0 = log_add(e.0, total + lp_blank);
            for c in 1..v {
                let lp = post.log_prob(t, c);
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut extended = prefix.clone();
                extended.push(c);
                if prefix.last() == Some(&c) {
                    let same = next.get_mut(prefix).unwrap();
                    same.1 = log_add(same.1, pnb + lp);
                    let e = next.entry(extended).or_insert((f64::NEG_INFINITY, f64::NEG_INFINITY));
                    e.1 = log_add(e.1, pb + lp);
                } else {
                    let e = next.entry(extended).or_insert((f64::NEG_INFINITY, f64::NEG_INFINITY));
                    e.1 = log_add(e.1, total + lp);
                }
            }
        }
        beam = prune(next, beam_width);
    }

    let (symbols, (pb, pnb)) = beam
        .into_iter()
        .max_by(|a, b| {
            log_add(a.1 .0, a.1 .1)
                .total_cmp(&log_add(b.1 .0, b.1 .1))
                .then_with(|| b.0.cmp(&a.0))
        })
        .expect("beam is never empty");
    let score = log_add(pb, pnb);
    let steps = step_records(post, &symbols, nbest)?;
    Ok(Hypothesis {
        symbols,
        score,
        ctc_score: score,
        att_score: 0.0,
        steps,
    })
}

fn prune(next: BTreeMap<Vec<usize>, (f64, f64)>, width: usize) -> BTreeMap<Vec<usize>, (f64, f64)> {
    if next.len() <= width {
        return next;
    }
    let mut ranked: Vec<_> = next.into_iter().collect();
    // descending score, ties by lexicographic prefix
    ranked.sort_by(|a, b| {
        log_add(b.1 .0, b.1 .1)
            .total_cmp(&log_add(a.1 .0, a.1 .1))
            .then_with(|| a.0.cmp(&b.0))
    });
    ranked.truncate(width);
    ranked.into_iter().collect()
}

/// Viterbi alignment of `labels`; returns the frames assigned to each label.
pub fn forced_alignment(post: &Posteriorgram, labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    for &s in labels {
        post.check_label(s)?;
    }
    if labels.is_empty() {
        return Ok(Vec::new());
    }
    let mut ext = vec![BLANK];
    for &c in labels {
        ext.push(c);
        ext.push(BLANK);
    }
    let (t_len, s_len) = (post.frames(), ext.len());
    let mut delta = vec![f64::NEG_INFINITY; t_len * s_len];
    let mut back = vec![0usize; t_len * s_len];
    delta[0] = post.log_prob(0, ext[0]);
    delta[1] = post.log_prob(0, ext[1]);
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = (t - 1) * s_len;
            let mut best = (delta[prev + s], s);
            if s >= 1 && delta[prev + s - 1] > best.0 {
                best = (delta[prev + s - 1], s - 1);
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] && delta[prev + s - 2] > best.0 {
                best = (delta[prev + s - 2], s - 2);
            }
            delta[t * s_len + s] = best.0 + post.log_prob(t, ext[s]);
            back[t * s_len + s] = best.1;
        }
    }
    let last = (t_len - 1) * s_len;
    let mut s = if delta[last + s_len - 1] >= delta[last + s_len - 2] {
        s_len - 1
    } else {
        s_len - 2
    };
    if delta[last + s] == f64::NEG_INFINITY {
        return Err(Error::ZeroLikelihood);
    }
    let mut frames = vec![Vec::new(); labels.len()];
    for t in (0..t_len).rev() {
        if s % 2 == 1 {
            frames[s / 2].push(t);
        }
        if t > 0 {
            s = back[t * s_len + s];
        }
    }
    frames.iter_mut().for_each(|f| f.reverse());
    Ok(frames)
}

fn step_records(post: &Posteriorgram, symbols: &[usize], nbest: usize) -> Result<Vec<StepRecord>> {
    let frames = forced_alignment(post, symbols)?;
    Ok(symbols
        .iter()
        .zip(&frames)
        .map(|(&c, fr)| {
            let peak = fr
                .iter()
                .copied()
                .max_by(|&a, &b| post.prob(a, c).total_cmp(&post.prob(b, c)).then(b.cmp(&a)))
                .unwrap_or(0);
            let score = post.log_prob(peak, c);
            let mut others: Vec<(usize, f64)> = (1..post.num_symbols())
                .filter(|&k| k != c && post.log_prob(peak, k) > f64::NEG_INFINITY)
                .map(|k| (k, post.log_prob(peak, k)))
                .collect();
            others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut alternatives = vec![(c, score)];
            alternatives.extend(others.into_iter().take(nbest.saturating_sub(1)));
            StepRecord {
                symbol: c,
                score,
                alternatives,
                peak_frame: peak,
            }
        })
        .collect())
}
