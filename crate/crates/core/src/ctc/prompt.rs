use serde::{Deserialize, Serialize};

use super::{forward_backward, Posteriorgram};
use crate::error::{Error, Result};

/// How per-frame occupancy of a prompt position is pooled into one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Peak occupancy over frames.
    #[default]
    Max,
    /// Occupancy-weighted mean occupancy, `Σ γ² / Σ γ`.
    MeanOccupied,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptPosterior {
    /// `P(z_i | X)` per prompt position, each in `[0, 1]`.
    pub values: Vec<f64>,
    /// Set when the prompt could not be aligned (too few frames or zero likelihood).
    pub infeasible: bool,
}

/// Constrained forward–backward against the prompt; pools each position's
/// normalized occupancy over frames.
pub fn prompt_position_posterior(
    post: &Posteriorgram,
    prompt: &[usize],
    pooling: Pooling,
) -> Result<PromptPosterior> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput("prompt"));
    }
    let fb = match forward_backward(post, prompt) {
        Ok(fb) => fb,
        Err(Error::InfeasibleTarget { .. }) | Err(Error::ZeroLikelihood) => {
            return Ok(PromptPosterior {
                values: vec![0.0; prompt.len()],
                infeasible: true,
            })
        }
        Err(e) => return Err(e),
    };
    let values = (0..prompt.len())
        .map(|i| {
            let s = 2 * i + 1;
            let occ = (0..fb.frames()).map(|t| fb.occupancy(t, s));
            let v = match pooling {
                Pooling::Max => occ.fold(0.0, f64::max),
                Pooling::MeanOccupied => {
                    let (sq, sum) = occ.fold((0.0, 0.0), |(a, b), g| (a + g * g, b + g));
                    if sum > 0.0 {
                        sq / sum
                    } else {
                        0.0
                    }
                }
            };
            v.clamp(0.0, 1.0)
        })
        .collect();
    Ok(PromptPosterior {
        values,
        infeasible: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::BLANK;
    use crate::ctc::test_support::{all_paths, collapse, random_post};
    use crate::numerics::{Mat, Rng};

    #[test]
    fn one_hot_spelling_is_certain() {
        let seq = [1, 1, 0, 2, 3];
        let rows: Vec<Vec<f64>> = seq
            .iter()
            .map(|&k| (0..4).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
            .collect();
        let post = Posteriorgram::new(Mat::from_rows(&rows).unwrap()).unwrap();
        let pp = prompt_position_posterior(&post, &[1, 2, 3], Pooling::Max).unwrap();
        assert!(!pp.infeasible);
        assert!(pp.values.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn absent_phone_scores_zero() {
        let rows = vec![vec![0.5, 0.5, 0.0]; 4];
        let post = Posteriorgram::new(Mat::from_rows(&rows).unwrap()).unwrap();
        let pp = prompt_position_posterior(&post, &[1, 2], Pooling::Max).unwrap();
        assert_eq!(pp.values[1], 0.0);
        assert!(pp.infeasible);
    }

    #[test]
    fn infeasible_prompt_flags() {
        let rows = vec![vec![0.5, 0.5]; 2];
        let post = Posteriorgram::new(Mat::from_rows(&rows).unwrap()).unwrap();
        let pp = prompt_position_posterior(&post, &[1, 1, 1], Pooling::Max).unwrap();
        assert!(pp.infeasible);
        assert_eq!(pp.values, vec![0.0; 3]);
    }

    /// Occupancy of position `i` at frame `t` by enumerating every path that collapses to
    /// the prompt and attributing each frame to the prompt position it emits.
    fn brute_occupancy(post: &Posteriorgram, prompt: &[usize]) -> Vec<Vec<f64>> {
        let mut occ = vec![vec![0.0; post.frames()]; prompt.len()];
        let mut z = 0.0;
        for (path, w) in all_paths(post) {
            if collapse(&path) != prompt {
                continue;
            }
            z += w;
            let mut pos: isize = -1;
            let mut prev = None;
            for (t, &k) in path.iter().enumerate() {
                if k != BLANK && Some(k) != prev {
                    pos += 1;
                }
                if k != BLANK {
                    occ[pos as usize][t] += w;
                }
                prev = Some(k);
            }
        }
        occ.iter_mut().flatten().for_each(|v| *v /= z);
        occ
    }

    #[test]
    fn matches_path_enumeration() {
        let mut rng = Rng::new(12);
        for _ in 0..25 {
            let t = 2 + rng.below(5);
            let post = random_post(&mut rng, t, 4);
            let len = 1 + rng.below(2.min(t));
            let prompt: Vec<usize> = (0..len).map(|_| 1 + rng.below(3)).collect();
            let Ok(fb) = forward_backward(&post, &prompt) else { continue };
            let brute = brute_occupancy(&post, &prompt);
            for (i, row) in brute.iter().enumerate() {
                for (t, &b) in row.iter().enumerate() {
                    assert!((fb.occupancy(t, 2 * i + 1) - b).abs() < 1e-9);
                }
            }
            let pp = prompt_position_posterior(&post, &prompt, Pooling::Max).unwrap();
            for (i, row) in brute.iter().enumerate() {
                let m = row.iter().copied().fold(0.0, f64::max);
                assert!((pp.values[i] - m).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mean_pooling_stays_in_range() {
        let mut rng = Rng::new(2);
        let post = random_post(&mut rng, 8, 4);
        let pp = prompt_position_posterior(&post, &[1, 2, 3], Pooling::MeanOccupied).unwrap();
        assert!(pp.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
