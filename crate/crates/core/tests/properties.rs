use std::collections::{BTreeMap, BTreeSet};

use mde_core::corpus::io::{format_annotation, parse_annotation, read_matrix, write_matrix};
use mde_core::corpus::{
    apply_annotation, synthesize_utterance, PhoneInventory, PositionLabel, Symbol, SynthParams, FIRST_PHONE,
};
use mde_core::ctc::{ctc_beam_decode, ctc_loss, Posteriorgram};
use mde_core::eval::{f1_score, metrics, roc_points, tally};
use mde_core::hypothesis::{Hypothesis, StepRecord};
use mde_core::joint::{format_hypothesis, joint_beam_search, parse_hypothesis, JointConfig};
use mde_core::md::{
    align, alignment_cost, calibrate_tau, confidence_d, decide_sr, format_verdicts, parse_verdicts, AlignmentOp,
    MdVerdict, Polarity, UtteranceVerdicts,
};
use mde_core::model::{acoustic_forward, Augment, ModelConfig, ModelParams};
use mde_core::numerics::{Mat, Rng};
use proptest::prelude::*;

const PHONES: usize = 4;

fn inventory() -> PhoneInventory {
    PhoneInventory::new(&["a", "b", "c", "d"]).unwrap()
}

fn phone() -> impl Strategy<Value = Symbol> {
    FIRST_PHONE..FIRST_PHONE + PHONES
}

fn phones(max: usize) -> impl Strategy<Value = Vec<Symbol>> {
    prop::collection::vec(phone(), 0..=max)
}

/// A posteriorgram over `symbols` columns built from strictly positive weights.
fn posteriorgram(frames: std::ops::RangeInclusive<usize>, symbols: usize) -> impl Strategy<Value = Posteriorgram> {
    frames.prop_flat_map(move |t| {
        prop::collection::vec(prop::collection::vec(0.05f64..1.0, symbols), t).prop_map(|rows| {
            let rows: Vec<Vec<f64>> = rows
                .into_iter()
                .map(|r| {
                    let z: f64 = r.iter().sum();
                    r.into_iter().map(|v| v / z).collect()
                })
                .collect();
            Posteriorgram::new(Mat::from_rows(&rows).unwrap()).unwrap()
        })
    })
}

fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != 0 {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Probability of `target` summed over every frame path that collapses to it.
fn enumerate_paths(post: &Posteriorgram, target: &[usize]) -> f64 {
    let (t, v) = (post.frames(), post.num_symbols());
    let mut total = 0.0;
    for code in 0..v.pow(t as u32) {
        let mut c = code;
        let mut path = Vec::with_capacity(t);
        let mut p = 1.0;
        for frame in 0..t {
            let s = c % v;
            c /= v;
            p *= post.prob(frame, s);
            path.push(s);
        }
        if collapse(&path) == target {
            total += p;
        }
    }
    total
}

/// Every label sequence over symbols `1..=phones` of length at most `max`.
fn all_targets(phones: usize, max: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max {
        let mut next = Vec::new();
        for t in &frontier {
            for s in 1..=phones {
                let mut e: Vec<usize> = t.clone();
                e.push(s);
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn label() -> impl Strategy<Value = PositionLabel> {
    prop_oneof![
        Just(PositionLabel::Correct),
        Just(PositionLabel::Deleted),
        phone().prop_map(PositionLabel::Substituted),
    ]
}

/// A hypothesis whose every step ranks the emitted symbol first among all phones.
fn hypothesis(max: usize) -> impl Strategy<Value = Hypothesis> {
    prop::collection::vec((phone(), any::<u64>(), 0usize..50), 0..=max)
        .prop_map(|steps| {
            let mut symbols = Vec::new();
            let mut records = Vec::new();
            for (sym, seed, peak) in steps {
                let mut rng = Rng::new(seed);
                let mut others: Vec<Symbol> = (FIRST_PHONE..FIRST_PHONE + PHONES).filter(|&s| s != sym).collect();
                let mut alternatives = vec![(sym, -rng.uniform())];
                let mut last = alternatives[0].1;
                while !others.is_empty() {
                    let s = others.remove(rng.below(others.len()));
                    last -= rng.uniform();
                    alternatives.push((s, last));
                }
                symbols.push(sym);
                records.push(StepRecord {
                    symbol: sym,
                    score: alternatives[0].1,
                    alternatives,
                    peak_frame: peak,
                });
            }
            Hypothesis {
                score: records.iter().map(|r| r.score).sum(),
                symbols,
                ctc_score: 0.0,
                att_score: 0.0,
                steps: records,
            }
        })
}

fn flagged(v: &[MdVerdict]) -> BTreeSet<usize> {
    v.iter().filter(|v| v.is_mispronounced()).map(|v| v.prompt_index).collect()
}

fn scored_set() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec(((0u8..12).prop_map(|q| q as f64 / 4.0), any::<bool>()), 2..30)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn synthesized_annotation_reproduces_realized_phones(
        seed in any::<u64>(),
        prompt in prop::collection::vec(FIRST_PHONE..FIRST_PHONE + 8, 1..10),
        rate in 0.0f64..0.6,
        deletion_share in 0.0f64..1.0,
    ) {
        let cfg = SynthParams::default().build(seed).unwrap().with_error_rate(rate, deletion_share).unwrap();
        let u = synthesize_utterance(&cfg, "u", &prompt, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(apply_annotation(&u.prompt, &u.annotation).unwrap(), u.realized.clone());
        prop_assert_eq!(u.durations.len(), u.realized.len());
        prop_assert!(u.durations.iter().all(|&d| d >= 1));
        prop_assert_eq!(u.num_frames(), u.durations.iter().sum::<usize>());
        prop_assert!(u.features.is_finite());
        let again = synthesize_utterance(&cfg, "u", &prompt, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(again, u);
    }

    #[test]
    fn ctc_loss_matches_path_enumeration(
        post in posteriorgram(1..=5, 3),
        target in prop::collection::vec(1usize..3, 0..=3),
    ) {
        let brute = enumerate_paths(&post, &target);
        match ctc_loss(&post, &target) {
            Ok(loss) => prop_assert!((-loss - brute.ln()).abs() < 1e-10, "{} vs {}", -loss, brute.ln()),
            Err(_) => prop_assert_eq!(brute, 0.0),
        }
    }

    #[test]
    fn ctc_beam_score_bounds_the_sequence_probability(post in posteriorgram(1..=5, 4)) {
        for w in [1, 2, 3, 4, 8] {
            let h = ctc_beam_decode(&post, w).unwrap();
            let exact = -ctc_loss(&post, &h.symbols).unwrap();
            prop_assert!(h.score <= exact + 1e-12, "width {}: {} > {}", w, h.score, exact);
        }
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        for t in all_targets(3, 5) {
            let p = enumerate_paths(&post, &t);
            if p > best.1 {
                best = (t, p);
            }
        }
        let h = ctc_beam_decode(&post, 10_000).unwrap();
        prop_assert_eq!(&h.symbols, &best.0);
        prop_assert!((h.score - best.1.ln()).abs() < 1e-10);
    }

    #[test]
    fn alignment_ops_rebuild_both_sequences(prompt in phones(7), hyp in phones(7)) {
        let ops = align(&prompt, &hyp);
        let mut p = Vec::new();
        let mut h = Vec::new();
        for op in &ops {
            match *op {
                AlignmentOp::Match { phone, .. } => {
                    p.push(phone);
                    h.push(phone);
                }
                AlignmentOp::Substitute { prompt_phone, hyp_phone, .. } => {
                    prop_assert_ne!(prompt_phone, hyp_phone);
                    p.push(prompt_phone);
                    h.push(hyp_phone);
                }
                AlignmentOp::Delete { prompt_phone, .. } => p.push(prompt_phone),
                AlignmentOp::Insert { hyp_phone, .. } => h.push(hyp_phone),
            }
        }
        prop_assert_eq!(&p, &prompt);
        prop_assert_eq!(&h, &hyp);
        let cost = alignment_cost(&ops);
        prop_assert_eq!(cost, alignment_cost(&align(&hyp, &prompt)));
        prop_assert!(cost >= prompt.len().abs_diff(hyp.len()));
        prop_assert!(cost <= prompt.len().max(hyp.len()));
    }

    #[test]
    fn deeper_nbest_only_clears_flags(prompt in phones(8), hyp in hypothesis(8)) {
        let mut prev: Option<BTreeSet<usize>> = None;
        for n in 1..=5 {
            let v = decide_sr(&prompt, &hyp, n).unwrap();
            prop_assert_eq!(v.len(), prompt.len());
            prop_assert!(v.iter().enumerate().all(|(i, v)| v.prompt_index == i));
            let f = flagged(&v);
            if let Some(p) = &prev {
                prop_assert!(f.is_subset(p), "n = {}: {:?} not within {:?}", n, f, p);
            }
            prev = Some(f);
        }
    }

    #[test]
    fn confidence_is_decreasing_and_bounded(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (da, db) = (confidence_d(a).unwrap(), confidence_d(b).unwrap());
        prop_assert!(da > 0.0 && da < 1.0);
        if a < b {
            prop_assert!(da > db);
        }
    }

    #[test]
    fn calibration_dominates_any_fixed_threshold(dev in scored_set(), tau in -1.0f64..4.0, below in any::<bool>()) {
        prop_assume!(dev.iter().any(|d| d.1) && dev.iter().any(|d| !d.1));
        let cal = calibrate_tau(&dev).unwrap();
        let polarity = if below { Polarity::FlagBelow } else { Polarity::FlagAbove };
        let (mut tp, mut fl, pos) = (0.0, 0.0, dev.iter().filter(|d| d.1).count() as f64);
        for &(s, truth) in &dev {
            if polarity.flags(s, tau) {
                fl += 1.0;
                tp += truth as u8 as f64;
            }
        }
        let f1 = if fl == 0.0 { 0.0 } else { f1_score(tp / fl, tp / pos) };
        prop_assert!(cal.dev_f1 >= f1 - 1e-12, "{} < {}", cal.dev_f1, f1);
    }

    #[test]
    fn roc_tpr_rises_with_fpr(scores in scored_set(), below in any::<bool>()) {
        prop_assume!(scores.iter().any(|d| d.1) && scores.iter().any(|d| !d.1));
        let polarity = if below { Polarity::FlagBelow } else { Polarity::FlagAbove };
        let pts = roc_points(&scores, polarity).unwrap();
        prop_assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        let last = pts.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in pts.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
    }

    #[test]
    fn tally_ignores_utterance_order(
        utts in prop::collection::vec(prop::collection::vec((label(), any::<bool>()), 1..6), 1..6),
        rotate in 0usize..6,
    ) {
        let mut verdicts = Vec::new();
        let mut truth = BTreeMap::new();
        for (i, u) in utts.iter().enumerate() {
            let id = format!("u{i}");
            verdicts.push(UtteranceVerdicts {
                id: id.clone(),
                prompt: vec![FIRST_PHONE; u.len()],
                verdicts: u
                    .iter()
                    .enumerate()
                    .map(|(k, &(_, flag))| MdVerdict {
                        prompt_index: k,
                        verdict: if flag {
                            mde_core::md::Verdict::Mispronounced(mde_core::md::Cause::Deletion)
                        } else {
                            mde_core::md::Verdict::Correct
                        },
                        score: None,
                    })
                    .collect(),
            });
            truth.insert(id, u.iter().map(|p| p.0).collect::<Vec<_>>());
        }
        let base = tally(&verdicts, &truth).unwrap();
        let k = rotate % verdicts.len();
        verdicts.rotate_left(k);
        verdicts.reverse();
        prop_assert_eq!(tally(&verdicts, &truth).unwrap(), base);
        let m = metrics(base);
        prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-12);
        prop_assert!(m.f1 >= m.precision.min(m.recall) - 1e-12);
    }

    #[test]
    fn artifacts_round_trip_through_text(
        hyp in hypothesis(6),
        labels in prop::collection::vec(label(), 1..8),
        scores in prop::collection::vec(prop::option::of(-5.0f64..5.0), 1..8),
    ) {
        let inv = inventory();
        let line = format_hypothesis(&inv, "utt-1", &hyp);
        let (id, back) = parse_hypothesis(&inv, &line).unwrap();
        prop_assert_eq!(id, "utt-1");
        prop_assert_eq!(back, hyp);

        prop_assert_eq!(parse_annotation(&inv, &format_annotation(&inv, &labels)).unwrap(), labels);

        let utt = UtteranceVerdicts {
            id: "utt-1".into(),
            prompt: vec![FIRST_PHONE + 1; scores.len()],
            verdicts: scores
                .iter()
                .enumerate()
                .map(|(k, &score)| MdVerdict {
                    prompt_index: k,
                    verdict: if score.is_some_and(|s| s > 0.0) {
                        mde_core::md::Verdict::Mispronounced(mde_core::md::Cause::LowConfidence)
                    } else {
                        mde_core::md::Verdict::Correct
                    },
                    score,
                })
                .collect(),
        };
        let text = format_verdicts(&inv, std::slice::from_ref(&utt));
        prop_assert_eq!(parse_verdicts(&inv, &text).unwrap(), vec![utt]);
    }

    #[test]
    fn matrices_round_trip_bit_exactly(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.normal() * 1e3).collect();
        let m = Mat::from_vec(rows, cols, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        write_matrix(&path, *b"TEST", &m).unwrap();
        prop_assert_eq!(read_matrix(&path, *b"TEST").unwrap(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn joint_score_interpolates_its_parts(seed in any::<u64>(), frames in 2usize..8, lambda in 0.0f64..=1.0) {
        let inv = inventory();
        let cfg = ModelConfig {
            hidden: 6,
            att_dim: 4,
            embed_dim: 3,
            dec_hidden: 6,
            conv_filters: 2,
            conv_width: 3,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&cfg, 3, &inv, Augment::None, seed).unwrap();
        let mut rng = Rng::new(seed);
        let features = Mat::from_vec(frames, 3, (0..frames * 3).map(|_| rng.normal()).collect()).unwrap();
        let (memory, post) = acoustic_forward(&params, &features).unwrap();
        let again = acoustic_forward(&params, &features).unwrap();
        prop_assert_eq!(&again.1, &post);
        let decode = JointConfig { lambda, beam_width: 3, max_output_len: 6, nbest_per_step: 3 };
        let h = joint_beam_search(&params, &post, &memory, None, &decode).unwrap();
        let ctc_only = |w| JointConfig { lambda: 1.0, beam_width: w, max_output_len: frames, nbest_per_step: 1 };
        let best = joint_beam_search(&params, &post, &memory, None, &ctc_only(100_000)).unwrap().score;
        for w in [1, 2, 4, 16] {
            let hw = joint_beam_search(&params, &post, &memory, None, &ctc_only(w)).unwrap();
            prop_assert!((hw.score + ctc_loss(&post, &hw.symbols).unwrap()).abs() < 1e-9);
            prop_assert!(hw.score <= best + 1e-12, "width {}: {} > {}", w, hw.score, best);
        }
        prop_assert!((h.score - (lambda * h.ctc_score + (1.0 - lambda) * h.att_score)).abs() < 1e-12);
        prop_assert_eq!(h.steps.len(), h.symbols.len());
    }
}
