//! Position-level scoring of verdicts against annotations, ROC sweeps, and
//! result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::corpus::PositionLabel;
use crate::error::{Error, Result};
use crate::md::{Polarity, UtteranceVerdicts};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalCounts {
    /// Positions flagged by the detector.
    pub c_d: usize,
    /// Positions mispronounced per ground truth.
    pub c_h: usize,
    /// Positions in both sets.
    pub c_dh: usize,
}

impl EvalCounts {
    pub fn add(&mut self, flagged: bool, truth: bool) {
        self.c_d += flagged as usize;
        self.c_h += truth as usize;
        self.c_dh += (flagged && truth) as usize;
    }
}

impl std::ops::Add for EvalCounts {
    type Output = EvalCounts;

    fn add(self, o: EvalCounts) -> EvalCounts {
        EvalCounts {
            c_d: self.c_d + o.c_d,
            c_h: self.c_h + o.c_h,
            c_dh: self.c_dh + o.c_dh,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    /// Builds metrics from a (recall, precision) pair, e.g. numbers read off a table.
    pub fn from_recall_precision(recall: f64, precision: f64) -> Self {
        Metrics {
            precision,
            recall,
            f1: f1_score(precision, recall),
        }
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(c: EvalCounts) -> Metrics {
    let precision = ratio(c.c_dh, c.c_d);
    let recall = ratio(c.c_dh, c.c_h);
    Metrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

fn missing(kind: &str, keys: &[String]) -> String {
    const SHOWN: usize = 10;
    let mut s = format!("{} {kind}: {}", keys.len(), keys[..keys.len().min(SHOWN)].join(", "));
    if keys.len() > SHOWN {
        s.push_str(", ...");
    }
    s
}

/// Counts flagged, annotated, and jointly flagged positions. Every
/// `(utterance, position)` key must appear on both sides.
pub fn tally(verdicts: &[UtteranceVerdicts], annotations: &BTreeMap<String, Vec<PositionLabel>>) -> Result<EvalCounts> {
    let mut seen = BTreeMap::new();
    let mut no_truth = Vec::new();
    let mut counts = EvalCounts::default();
    for u in verdicts {
        let labels = annotations.get(&u.id);
        for v in &u.verdicts {
            let key = format!("{}#{}", u.id, v.prompt_index);
            match labels.and_then(|l| l.get(v.prompt_index)) {
                Some(label) => {
                    if seen.insert(key.clone(), ()).is_some() {
                        return Err(Error::invalid(format!("duplicate verdict for {key}")));
                    }
                    counts.add(v.is_mispronounced(), label.is_error());
                }
                None => no_truth.push(key),
            }
        }
    }
    let mut no_verdict = Vec::new();
    for (id, labels) in annotations {
        for i in 0..labels.len() {
            let key = format!("{id}#{i}");
            if !seen.contains_key(&key) {
                no_verdict.push(key);
            }
        }
    }
    if no_truth.is_empty() && no_verdict.is_empty() {
        return Ok(counts);
    }
    let mut parts = Vec::new();
    if !no_truth.is_empty() {
        parts.push(missing("without annotation", &no_truth));
    }
    if !no_verdict.is_empty() {
        parts.push(missing("without verdict", &no_verdict));
    }
    Err(Error::MissingKeys(parts.join("; ")))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Threshold producing this point; `±inf` at the endpoints that flag nothing.
    pub tau: f64,
}

/// ROC curve of `(score, is_mispronounced)` pairs, one point per distinct
/// threshold, starting at (0, 0) and ending at (1, 1).
pub fn roc_points(scores: &[(f64, bool)], polarity: Polarity) -> Result<Vec<RocPoint>> {
    let pos = scores.iter().filter(|s| s.1).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("ROC needs both classes"));
    }
    if scores.iter().any(|s| !s.0.is_finite()) {
        return Err(Error::NonFinite("ROC scores"));
    }
    // order from most to least suspicious under the polarity
    let mut sorted = scores.to_vec();
    match polarity {
        Polarity::FlagAbove => sorted.sort_by(|a, b| b.0.total_cmp(&a.0)),
        Polarity::FlagBelow => sorted.sort_by(|a, b| a.0.total_cmp(&b.0)),
    }
    let start = match polarity {
        Polarity::FlagAbove => f64::INFINITY,
        Polarity::FlagBelow => f64::NEG_INFINITY,
    };
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        tau: start,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let tau = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == tau {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            tau,
        });
    }
    Ok(points)
}

pub fn format_roc(points: &[RocPoint]) -> String {
    let mut out = String::new();
    for p in points {
        let _ = writeln!(out, "{}\t{}\t{}", p.fpr, p.tpr, p.tau);
    }
    out
}

/// A rendered result table: aligned text for people, TSV for tools.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportTable {
    pub text: String,
    pub tsv: String,
}

pub fn report_table(runs: &[(String, Metrics)]) -> Result<ReportTable> {
    if runs.is_empty() {
        return Err(Error::EmptyInput("report runs"));
    }
    let width = runs.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0).max(5);
    let mut text = format!("{:<width$}  {:>9}  {:>9}  {:>9}\n", "label", "recall", "precision", "f1");
    let mut tsv = String::from("label\trecall\tprecision\tf1\n");
    for (label, m) in runs {
        let _ = writeln!(
            text,
            "{label:<width$}  {:>9.3}  {:>9.3}  {:>9.3}",
            m.recall, m.precision, m.f1
        );
        let _ = writeln!(tsv, "{label}\t{:.3}\t{:.3}\t{:.3}", m.recall, m.precision, m.f1);
    }
    Ok(ReportTable { text, tsv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::md::{Cause, MdVerdict, Verdict};
    use crate::numerics::Rng;

    fn utt(id: &str, flags: &[bool]) -> UtteranceVerdicts {
        UtteranceVerdicts {
            id: id.to_string(),
            prompt: vec![3; flags.len()],
            verdicts: flags
                .iter()
                .enumerate()
                .map(|(i, &f)| MdVerdict {
                    prompt_index: i,
                    verdict: if f {
                        Verdict::Mispronounced(Cause::Deletion)
                    } else {
                        Verdict::Correct
                    },
                    score: None,
                })
                .collect(),
        }
    }

    fn labels(errs: &[bool]) -> Vec<PositionLabel> {
        errs.iter()
            .map(|&e| if e { PositionLabel::Deleted } else { PositionLabel::Correct })
            .collect()
    }

    #[test]
    fn hand_counted_case() {
        let flags = [true, true, false, true, false, false, true, false, false, false];
        let truth = [true, false, false, true, true, false, false, false, false, false];
        let ann: BTreeMap<_, _> = [("u".to_string(), labels(&truth))].into();
        let c = tally(&[utt("u", &flags)], &ann).unwrap();
        assert_eq!(c, EvalCounts { c_d: 4, c_h: 3, c_dh: 2 });

        let exact = tally(&[utt("u", &truth)], &ann).unwrap();
        assert_eq!((exact.c_d, exact.c_h, exact.c_dh), (3, 3, 3));
        let none = tally(&[utt("u", &[false; 10])], &ann).unwrap();
        assert_eq!((none.c_d, none.c_dh), (0, 0));
    }

    #[test]
    fn key_mismatch_lists_missing_keys() {
        let ann: BTreeMap<_, _> = [
            ("a".to_string(), labels(&[false, true])),
            ("b".to_string(), labels(&[true])),
        ]
        .into();
        let err = tally(&[utt("a", &[true, false, true])], &ann).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::MissingKeys(_)));
        assert!(msg.contains("a#2") && msg.contains("b#0"), "{msg}");
    }

    #[test]
    fn tally_ignores_record_order() {
        let mut rng = Rng::new(3);
        let mut verdicts = Vec::new();
        let mut ann = BTreeMap::new();
        for u in 0..20 {
            let n = 1 + rng.below(6);
            let f: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.3)).collect();
            let t: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.3)).collect();
            verdicts.push(utt(&format!("u{u}"), &f));
            ann.insert(format!("u{u}"), labels(&t));
        }
        let base = metrics(tally(&verdicts, &ann).unwrap());
        for _ in 0..5 {
            rng.shuffle(&mut verdicts);
            for v in &mut verdicts {
                rng.shuffle(&mut v.verdicts);
            }
            assert_eq!(metrics(tally(&verdicts, &ann).unwrap()), base);
        }
    }

    #[test]
    fn zero_denominators_give_zero() {
        let m = metrics(EvalCounts::default());
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        let m = metrics(EvalCounts { c_d: 0, c_h: 4, c_dh: 0 });
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn f1_matches_printed_pairs() {
        for (r, p, f) in [(0.708, 0.679, 0.693), (0.518, 0.635, 0.570), (0.534, 0.743, 0.621)] {
            assert!((Metrics::from_recall_precision(r, p).f1 - f).abs() <= 1e-3);
        }
    }

    #[test]
    fn f1_lies_between_precision_and_recall() {
        let mut rng = Rng::new(4);
        for _ in 0..1000 {
            let c_h = 1 + rng.below(50);
            let c_d = 1 + rng.below(50);
            let c_dh = rng.below(c_h.min(c_d) + 1);
            let m = metrics(EvalCounts { c_d, c_h, c_dh });
            if m.precision > 0.0 && m.recall > 0.0 {
                assert!(m.f1 <= m.precision.max(m.recall) + 1e-15);
                assert!(m.f1 >= m.precision.min(m.recall) - 1e-15);
            }
        }
    }

    #[test]
    fn roc_endpoints_and_monotonicity() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let n = 2 + rng.below(30);
            let mut s: Vec<(f64, bool)> = (0..n).map(|_| ((rng.below(6) as f64), rng.bernoulli(0.4))).collect();
            s[0].1 = true;
            s[1].1 = false;
            for pol in [Polarity::FlagAbove, Polarity::FlagBelow] {
                let pts = roc_points(&s, pol).unwrap();
                assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
                let last = pts.last().unwrap();
                assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
                assert!(pts.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
            }
        }
    }

    #[test]
    fn separating_score_reaches_the_corner() {
        let s = [(0.9, true), (0.8, true), (0.2, false), (0.1, false)];
        let pts = roc_points(&s, Polarity::FlagAbove).unwrap();
        assert!(pts.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert!(roc_points(&[(0.1, true)], Polarity::FlagAbove).is_err());
    }

    #[test]
    fn coin_score_hugs_the_diagonal() {
        let mut rng = Rng::new(6);
        let s: Vec<(f64, bool)> = (0..10_000).map(|_| (rng.uniform(), rng.bernoulli(0.5))).collect();
        for p in roc_points(&s, Polarity::FlagAbove).unwrap() {
            assert!((p.tpr - p.fpr).abs() < 0.05);
        }
    }

    #[test]
    fn table_rounds_and_keeps_order() {
        let runs = vec![
            ("joint".to_string(), Metrics::from_recall_precision(0.6932, 0.5)),
            ("ctc".to_string(), Metrics::from_recall_precision(0.1, 0.2)),
        ];
        let t = report_table(&runs).unwrap();
        assert!(t.text.lines().nth(1).unwrap().contains("0.693"));
        assert!(t.text.lines().nth(1).unwrap().starts_with("joint"));
        assert_eq!(t.tsv.lines().nth(2).unwrap(), "ctc\t0.100\t0.200\t0.133");
        assert_eq!(report_table(&runs[..1]).unwrap().text.lines().count(), 2);
        assert!(report_table(&[]).is_err());
    }
}
