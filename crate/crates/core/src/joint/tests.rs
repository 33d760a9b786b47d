use super::*;
use crate::ctc::{ctc_beam_decode, ctc_loss};
use crate::hypothesis::step_nbest;
use crate::model::{encode_acoustic, Augment, ModelConfig};
use crate::numerics::{Mat, Rng};

fn tiny_inv() -> PhoneInventory {
    PhoneInventory::new(&["a", "b", "c"]).unwrap()
}

fn tiny_model(seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        hidden: 8,
        att_dim: 4,
        embed_dim: 4,
        dec_hidden: 6,
        conv_filters: 2,
        conv_width: 3,
        ..ModelConfig::default()
    };
    ModelParams::init(&cfg, 3, &tiny_inv(), Augment::None, seed).unwrap()
}

/// Random posteriorgram over blank and phones (control symbols at zero).
fn random_post(rng: &mut Rng, t: usize, vocab: usize) -> Posteriorgram {
    let mask: Vec<bool> = (0..vocab).map(|k| k == 0 || k >= FIRST_PHONE).collect();
    let logits = Mat::from_raw(t, vocab, (0..t * vocab).map(|_| 2.0 * rng.normal()).collect());
    Posteriorgram::from_logits(&logits, Some(&mask))
}

fn instance(rng: &mut Rng, seed: u64) -> (ModelParams, Posteriorgram, EncodedMemory) {
    let p = tiny_model(seed);
    let t = 1 + rng.below(5);
    let x = Mat::from_raw(t, 3, (0..t * 3).map(|_| rng.normal()).collect());
    let mem = encode_acoustic(&p, &x).unwrap();
    let post = random_post(rng, t, p.shape.vocab);
    (p, post, mem)
}

fn exhaustive(lambda: f64) -> JointConfig {
    JointConfig {
        lambda,
        beam_width: 100_000,
        max_output_len: 6,
        nbest_per_step: 3,
    }
}

#[test]
fn lambda_one_matches_ctc_prefix_search() {
    let mut rng = Rng::new(1);
    for seed in 0..20 {
        let (p, post, mem) = instance(&mut rng, seed);
        let joint = joint_beam_search(&p, &post, &mem, None, &exhaustive(1.0)).unwrap();
        let ctc = ctc_beam_decode(&post, 100_000).unwrap();
        assert_eq!(joint.symbols, ctc.symbols);
        assert!((joint.score - ctc.score).abs() < 1e-9);
    }
}

#[test]
fn lambda_zero_matches_attention_search() {
    let mut rng = Rng::new(2);
    for seed in 0..20 {
        let (p, post, mem) = instance(&mut rng, seed);
        let joint = joint_beam_search(&p, &post, &mem, None, &exhaustive(0.0)).unwrap();
        let att = attention_beam_search(&p, &mem, None, 100_000, 6).unwrap();
        assert_eq!(joint.symbols, att);
    }
}

#[test]
fn score_is_the_interpolation_of_its_parts() {
    let mut rng = Rng::new(3);
    for seed in 0..10 {
        let (p, post, mem) = instance(&mut rng, seed);
        let lambda = rng.uniform();
        let cfg = JointConfig {
            lambda,
            beam_width: 4,
            ..JointConfig::default()
        };
        let h = joint_beam_search(&p, &post, &mem, None, &cfg).unwrap();
        assert!((h.score - (lambda * h.ctc_score + (1.0 - lambda) * h.att_score)).abs() < 1e-12);
    }
}

#[test]
fn step_records_rank_emitted_first_then_descending() {
    let mut rng = Rng::new(4);
    for seed in 0..10 {
        let (p, post, mem) = instance(&mut rng, seed);
        let h = joint_beam_search(&p, &post, &mem, None, &JointConfig::default()).unwrap();
        assert_eq!(h.steps.len(), h.symbols.len());
        for (step, &c) in h.steps.iter().zip(&h.symbols) {
            assert_eq!(step.alternatives[0].0, c);
            assert!(step.alternatives.len() <= 5);
            assert!(step.alternatives[1..].windows(2).all(|w| w[0].1 >= w[1].1));
            assert_eq!(step_nbest(&h, 0, 1).unwrap(), vec![h.symbols[0]]);
        }
    }
}

#[test]
fn lambda_one_scores_are_exact_and_bounded_by_the_full_beam() {
    let mut rng = Rng::new(5);
    for seed in 0..10 {
        let (p, post, mem) = instance(&mut rng, seed);
        let cfg = |w| JointConfig {
            lambda: 1.0,
            beam_width: w,
            max_output_len: 6,
            nbest_per_step: 1,
        };
        let best = joint_beam_search(&p, &post, &mem, None, &cfg(100_000)).unwrap().score;
        for w in [1, 2, 4, 16] {
            let h = joint_beam_search(&p, &post, &mem, None, &cfg(w)).unwrap();
            assert!((h.score + ctc_loss(&post, &h.symbols).unwrap()).abs() < 1e-9);
            assert!(h.score <= best + 1e-12);
        }
    }
}

#[test]
fn rejects_bad_config_and_mismatched_inputs() {
    let mut rng = Rng::new(6);
    let (p, post, mem) = instance(&mut rng, 0);
    let bad = JointConfig {
        lambda: 1.5,
        ..JointConfig::default()
    };
    assert!(joint_beam_search(&p, &post, &mem, None, &bad).is_err());
    let nb = JointConfig {
        nbest_per_step: 6,
        ..JointConfig::default()
    };
    assert!(joint_beam_search(&p, &post, &mem, None, &nb).is_err());
    let other = random_post(&mut rng, mem.frames() + 1, p.shape.vocab);
    assert!(joint_beam_search(&p, &other, &mem, None, &JointConfig::default()).is_err());
}

#[test]
fn dump_round_trip() {
    let inv = tiny_inv();
    let mut rng = Rng::new(7);
    for seed in 0..5 {
        let (p, post, mem) = instance(&mut rng, seed);
        let h = joint_beam_search(&p, &post, &mem, None, &JointConfig::default()).unwrap();
        let line = format_hypothesis(&inv, "utt-1", &h);
        let (id, back) = parse_hypothesis(&inv, &line).unwrap();
        assert_eq!(id, "utt-1");
        assert_eq!(back.symbols, h.symbols);
        assert_eq!(back.score, h.score);
        assert_eq!(back.steps, h.steps);
    }
    assert!(parse_hypothesis(&inv, "x\ta\t0").is_err());
}
