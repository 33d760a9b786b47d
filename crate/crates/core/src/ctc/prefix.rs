use super::Posteriorgram;
use crate::corpus::BLANK;
use crate::error::Result;
use crate::numerics::log_add;

/// Prefix-probability state of one partial hypothesis.
///
/// `r_nb[t]` / `r_b[t]` are the log probabilities that frames `0..=t` collapse to
/// `prefix` with the last frame on a label / on blank. `score` is the log probability
/// that the full collapsed output starts with `prefix`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcPrefixState {
    pub prefix: Vec<usize>,
    pub r_nb: Vec<f64>,
    pub r_b: Vec<f64>,
    pub score: f64,
}

/// Incremental CTC prefix scoring over a fixed posteriorgram.
#[derive(Debug, Clone, Copy)]
pub struct CtcPrefixScorer<'a> {
    post: &'a Posteriorgram,
}

impl<'a> CtcPrefixScorer<'a> {
    pub fn new(post: &'a Posteriorgram) -> Self {
        CtcPrefixScorer { post }
    }

    /// Empty-prefix state: only the all-blank run.
    pub fn initial(&self) -> CtcPrefixState {
        let t_len = self.post.frames();
        let mut r_b = Vec::with_capacity(t_len);
        let mut acc = 0.0;
        for t in 0..t_len {
            acc += self.post.log_prob(t, BLANK);
            r_b.push(acc);
        }
        CtcPrefixState {
            prefix: Vec::new(),
            r_nb: vec![f64::NEG_INFINITY; t_len],
            r_b,
            score: 0.0,
        }
    }

    /// Extends `state` by `symbol`; returns the log-score increment and the new state.
    pub fn advance(&self, state: &CtcPrefixState, symbol: usize) -> Result<(f64, CtcPrefixState)> {
        self.post.check_label(symbol)?;
        let post = self.post;
        let t_len = post.frames();
        let last = state.prefix.last().copied();

        // mass of `prefix` ending at t from which `symbol` may start at t + 1
        let phi = |t: usize| {
            if last == Some(symbol) {
                state.r_b[t]
            } else {
                log_add(state.r_b[t], state.r_nb[t])
            }
        };

        let mut r_nb = vec![f64::NEG_INFINITY; t_len];
        let mut r_b = vec![f64::NEG_INFINITY; t_len];
        let mut score = f64::NEG_INFINITY;
        if state.prefix.is_empty() {
            r_nb[0] = post.log_prob(0, symbol);
            score = r_nb[0];
        }
        for t in 1..t_len {
            let lp = post.log_prob(t, symbol);
            let start = phi(t - 1) + lp;
            r_nb[t] = log_add(r_nb[t - 1] + lp, start);
            r_b[t] = log_add(r_b[t - 1], r_nb[t - 1]) + post.log_prob(t, BLANK);
            score = log_add(score, start);
        }

        let mut prefix = state.prefix.clone();
        prefix.push(symbol);
        let inc = if score == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            score - state.score
        };
        Ok((
            inc,
            CtcPrefixState {
                prefix,
                r_nb,
                r_b,
                score,
            },
        ))
    }

    /// Log probability that the output is exactly `state.prefix`.
    pub fn final_log_prob(&self, state: &CtcPrefixState) -> f64 {
        let t = self.post.frames() - 1;
        log_add(state.r_nb[t], state.r_b[t])
    }

    /// Increment for closing the hypothesis with end-of-sequence.
    pub fn closure(&self, state: &CtcPrefixState) -> f64 {
        let fin = self.final_log_prob(state);
        if fin == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            fin - state.score
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::ctc_loss;
    use crate::ctc::test_support::{all_paths, collapse, random_post};
    use crate::error::Error;
    use crate::numerics::{Mat, Rng};

    #[test]
    fn telescoping_reproduces_loss() {
        let mut rng = Rng::new(99);
        for _ in 0..100 {
            let t = 1 + rng.below(8);
            let v = 2 + rng.below(4);
            let post = random_post(&mut rng, t, v);
            let target: Vec<usize> = (0..rng.below(4)).map(|_| 1 + rng.below(v - 1)).collect();
            let Ok(loss) = ctc_loss(&post, &target) else { continue };
            let scorer = CtcPrefixScorer::new(&post);
            let mut state = scorer.initial();
            let mut total = 0.0;
            for &c in &target {
                let (inc, next) = scorer.advance(&state, c).unwrap();
                total += inc;
                state = next;
            }
            total += scorer.closure(&state);
            assert!((total + loss).abs() < 1e-9, "{total} vs {}", -loss);
        }
    }

    #[test]
    fn prefix_score_is_prefix_probability() {
        let mut rng = Rng::new(4);
        let post = random_post(&mut rng, 5, 3);
        let scorer = CtcPrefixScorer::new(&post);
        let (_, s1) = scorer.advance(&scorer.initial(), 1).unwrap();
        let (_, s12) = scorer.advance(&s1, 2).unwrap();
        let paths = all_paths(&post);
        let brute = |pre: &[usize]| -> f64 {
            paths
                .iter()
                .filter(|(p, _)| collapse(p).starts_with(pre))
                .map(|(_, w)| w)
                .sum()
        };
        assert!((s1.score.exp() - brute(&[1])).abs() < 1e-12);
        assert!((s12.score.exp() - brute(&[1, 2])).abs() < 1e-12);
    }

    #[test]
    fn empty_prefix_is_blank_run() {
        let mut rng = Rng::new(8);
        let post = random_post(&mut rng, 4, 3);
        let init = CtcPrefixScorer::new(&post).initial();
        let prod: f64 = (0..4).map(|t| post.prob(t, BLANK)).product();
        assert!((init.r_b[3].exp() - prod).abs() < 1e-15);
        assert_eq!(init.score, 0.0);
    }

    #[test]
    fn impossible_symbol_gives_negative_infinity() {
        let rows = vec![vec![0.5, 0.5, 0.0]; 3];
        let post = Posteriorgram::new(Mat::from_rows(&rows).unwrap()).unwrap();
        let scorer = CtcPrefixScorer::new(&post);
        let (inc, _) = scorer.advance(&scorer.initial(), 2).unwrap();
        assert_eq!(inc, f64::NEG_INFINITY);
        assert!(matches!(scorer.advance(&scorer.initial(), 0), Err(Error::BlankSymbol)));
    }
}
