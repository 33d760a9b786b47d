use super::Posteriorgram;
use crate::corpus::BLANK;
use crate::error::{Error, Result};
use crate::numerics::{log_add, Mat};

/// Minimum number of frames that can carry `target`: one per label plus one
/// separating blank between equal neighbours.
pub fn feasible_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check(post: &Posteriorgram, target: &[usize]) -> Result<()> {
    for &s in target {
        post.check_label(s)?;
    }
    let needed = feasible_frames(target);
    if needed > post.frames() {
        return Err(Error::InfeasibleTarget {
            len: target.len(),
            needed,
            frames: post.frames(),
        });
    }
    Ok(())
}

/// Blank-interleaved label sequence of length `2L + 1`.
fn expand(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &c in target {
        ext.push(c);
        ext.push(BLANK);
    }
    ext
}

#[inline]
fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// Log-domain forward and backward lattices over the expanded label sequence.
#[derive(Debug, Clone)]
pub struct ForwardBackward {
    pub ext: Vec<usize>,
    /// `T × S`, `α_t(s)` includes the emission at `t`.
    pub log_alpha: Vec<f64>,
    /// `T × S`, `β_t(s)` excludes the emission at `t`.
    pub log_beta: Vec<f64>,
    pub log_likelihood: f64,
    frames: usize,
}

impl ForwardBackward {
    pub fn states(&self) -> usize {
        self.ext.len()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Posterior probability of occupying expanded state `s` at frame `t`.
    pub fn occupancy(&self, t: usize, s: usize) -> f64 {
        let i = t * self.ext.len() + s;
        (self.log_alpha[i] + self.log_beta[i] - self.log_likelihood).exp()
    }
}

fn forward(post: &Posteriorgram, ext: &[usize]) -> Vec<f64> {
    let (t_len, s_len) = (post.frames(), ext.len());
    let mut alpha = vec![f64::NEG_INFINITY; t_len * s_len];
    alpha[0] = post.log_prob(0, ext[0]);
    if s_len > 1 {
        alpha[1] = post.log_prob(0, ext[1]);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(ext, s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = acc + post.log_prob(t, ext[s]);
        }
    }
    alpha
}

fn final_log_likelihood(alpha: &[f64], t_len: usize, s_len: usize) -> f64 {
    let last = &alpha[(t_len - 1) * s_len..];
    if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    }
}

/// Full forward–backward pass. Errors on infeasible targets or a zero-probability target.
pub fn forward_backward(post: &Posteriorgram, target: &[usize]) -> Result<ForwardBackward> {
    check(post, target)?;
    let ext = expand(target);
    let (t_len, s_len) = (post.frames(), ext.len());
    let log_alpha = forward(post, &ext);
    let log_likelihood = final_log_likelihood(&log_alpha, t_len, s_len);
    if log_likelihood == f64::NEG_INFINITY {
        return Err(Error::ZeroLikelihood);
    }

    let mut log_beta = vec![f64::NEG_INFINITY; t_len * s_len];
    let last = (t_len - 1) * s_len;
    log_beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        log_beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = log_beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut acc = next[s] + post.log_prob(t + 1, ext[s]);
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1] + post.log_prob(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && can_skip(&ext, s + 2) {
                acc = log_add(acc, next[s + 2] + post.log_prob(t + 1, ext[s + 2]));
            }
            cur[s] = acc;
        }
    }
    Ok(ForwardBackward {
        ext,
        log_alpha,
        log_beta,
        log_likelihood,
        frames: t_len,
    })
}

/// `-log P_ctc(target | X)`. Returns `+inf` when every alignment has probability zero;
/// an infeasible target is an error.
pub fn ctc_loss(post: &Posteriorgram, target: &[usize]) -> Result<f64> {
    check(post, target)?;
    let ext = expand(target);
    let alpha = forward(post, &ext);
    Ok(-final_log_likelihood(&alpha, post.frames(), ext.len()))
}

/// Gradient of [`ctc_loss`] with respect to the pre-softmax logits: `softmax - occupancy`.
pub fn ctc_grad(post: &Posteriorgram, target: &[usize]) -> Result<Mat> {
    let fb = forward_backward(post, target)?;
    Ok(grad_from(post, &fb))
}

pub(crate) fn grad_from(post: &Posteriorgram, fb: &ForwardBackward) -> Mat {
    let mut grad = post.probs().clone();
    for t in 0..post.frames() {
        let row = grad.row_mut(t);
        for (s, &k) in fb.ext.iter().enumerate() {
            row[k] -= fb.occupancy(t, s);
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::test_support::{all_paths, collapse, random_post};
    use crate::numerics::{finite_diff_check, Rng};

    fn post_from_rows(rows: &[Vec<f64>]) -> Posteriorgram {
        Posteriorgram::new(Mat::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn single_frame_single_label() {
        let post = post_from_rows(&[vec![0.4, 0.6]]);
        assert!((ctc_loss(&post, &[1]).unwrap() + 0.6f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn two_frames_three_paths() {
        let post = post_from_rows(&[vec![0.3, 0.7], vec![0.55, 0.45]]);
        let (b1, a1, b2, a2): (f64, f64, f64, f64) = (0.3, 0.7, 0.55, 0.45);
        let expected = -(a1 * a2 + b1 * a2 + a1 * b2).ln();
        assert!((ctc_loss(&post, &[1]).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn matches_brute_force_enumeration() {
        let mut rng = Rng::new(17);
        for _ in 0..60 {
            let t = 1 + rng.below(6);
            let v = 2 + rng.below(3);
            let post = random_post(&mut rng, t, v);
            let len = rng.below(4);
            let target: Vec<usize> = (0..len).map(|_| 1 + rng.below(v - 1)).collect();
            let brute: f64 = all_paths(&post)
                .into_iter()
                .filter(|(p, _)| collapse(p) == target)
                .map(|(_, w)| w)
                .sum();
            match ctc_loss(&post, &target) {
                Ok(loss) => assert!((loss + brute.ln()).abs() < 1e-10, "{loss} vs {}", -brute.ln()),
                Err(Error::InfeasibleTarget { .. }) => assert_eq!(brute, 0.0),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn infeasible_and_blank_targets() {
        let post = post_from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!(matches!(
            ctc_loss(&post, &[1, 1]),
            Err(Error::InfeasibleTarget { needed: 3, .. })
        ));
        assert!(matches!(ctc_loss(&post, &[0]), Err(Error::BlankSymbol)));
        assert!(matches!(ctc_loss(&post, &[7]), Err(Error::UnknownSymbol(_))));
    }

    #[test]
    fn zero_probability_is_not_infeasibility() {
        let post = post_from_rows(&[vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]);
        assert_eq!(ctc_loss(&post, &[1]).unwrap(), f64::INFINITY);
        assert!(matches!(ctc_grad(&post, &[1]), Err(Error::ZeroLikelihood)));
    }

    #[test]
    fn occupancy_rows_sum_to_one() {
        let mut rng = Rng::new(5);
        let post = random_post(&mut rng, 7, 4);
        let fb = forward_backward(&post, &[1, 2, 2]).unwrap();
        for t in 0..7 {
            let s: f64 = (0..fb.states()).map(|s| fb.occupancy(t, s)).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(23);
        for _ in 0..20 {
            let (t, v) = (4, 4);
            let logits: Vec<f64> = (0..t * v).map(|_| rng.normal()).collect();
            let target: Vec<usize> = (0..1 + rng.below(2)).map(|_| 1 + rng.below(v - 1)).collect();
            let loss_of = |x: &[f64]| {
                let p = Posteriorgram::from_logits(&Mat::from_raw(t, v, x.to_vec()), None);
                ctc_loss(&p, &target).unwrap()
            };
            let post = Posteriorgram::from_logits(&Mat::from_raw(t, v, logits.clone()), None);
            let grad = ctc_grad(&post, &target).unwrap();
            let err = finite_diff_check(loss_of, &logits, grad.as_slice(), 1e-5).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn certain_target_has_zero_gradient() {
        let mut rows = Vec::new();
        for _ in 0..3 {
            rows.push(vec![0.0, 1.0, 0.0]);
        }
        let post = post_from_rows(&rows);
        let g = ctc_grad(&post, &[1]).unwrap();
        for t in 0..3 {
            assert!(g.get(t, 1).abs() < 1e-12);
        }
    }
}
