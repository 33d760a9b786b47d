//! Multi-task training: `λ · CTC + (1 − λ) · teacher-forced cross-entropy`,
//! minimized by clipped mini-batch SGD.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::corpus::{CorpusSplit, DurationStats, PhoneInventory, Symbol, Utterance, EOS, SOS};
use crate::ctc::feasible_frames;
use crate::error::{Error, Result};
use crate::model::graph::{ctc_mask, decoder_mask, Graph};
use crate::model::{build_prompt_stream, Augment, ModelConfig, ModelParams, ModelTensors};
use crate::numerics::{derive_seed, finite_diff_check, Mat, Rng};
use crate::par;

/// Global gradient-norm ceiling.
pub const CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_mtl: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Set by the caller rather than read from configuration files.
    #[serde(skip)]
    pub seed: u64,
    /// Epochs without dev improvement before stopping; 0 disables early stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_mtl: 0.5,
            learning_rate: 0.2,
            epochs: 100,
            batch_size: 4,
            seed: 1,
            patience: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_mtl) {
            return Err(Error::invalid("lambda_mtl must be in [0, 1]"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// One training pair: acoustic frames, realized phones, and the prompt stream when augmented.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub features: &'a Mat,
    pub target: &'a [Symbol],
    pub stream: Option<Vec<Symbol>>,
}

impl<'a> Example<'a> {
    pub fn from_utterance(
        utt: &'a Utterance,
        augment: Augment,
        stats: &DurationStats,
        frames_per_token: f64,
    ) -> Result<Self> {
        let stream = match augment {
            Augment::None => None,
            mode => Some(build_prompt_stream(&utt.prompt, mode, Some(stats), frames_per_token)?),
        };
        Ok(Example {
            features: &utt.features,
            target: &utt.realized,
            stream,
        })
    }
}

/// Joint loss of one example and, on request, its gradient.
pub fn example_loss(
    params: &ModelParams,
    ex: &Example,
    lambda: f64,
    want_grad: bool,
) -> Result<(f64, Option<ModelTensors>)> {
    let vocab = params.shape.vocab;
    let mut g = Graph::new(params);
    let x = g.tape.leaf_ref(ex.features);
    let h = g.encode(x);
    let mut terms: Vec<(Var, f64)> = Vec::new();

    // a target the frames cannot carry contributes no CTC term
    if lambda > 0.0 && feasible_frames(ex.target) <= ex.features.rows() {
        let z = g.ctc_logits(h);
        let l = g.tape.ctc(z, ex.target, &ctc_mask(vocab))?;
        terms.push((l, lambda));
    }
    if lambda < 1.0 {
        let pm = match &ex.stream {
            Some(s) => Some(g.encode_prompt(s)?),
            None => None,
        };
        if pm.is_none() && params.is_augmented() {
            return Err(Error::invalid("augmented model needs a prompt stream"));
        }
        let mem = g.memories(h, pm);
        let mut state = g.initial_state(&mem, params.shape.dec_hidden);
        let mut prev = SOS;
        let mask = decoder_mask(vocab);
        for &y in ex.target.iter().chain(std::iter::once(&EOS)) {
            let out = g.decoder_step(&mem, &state, prev)?;
            let l = g.tape.nll(out.logits, y, &mask);
            terms.push((l, 1.0 - lambda));
            state = out.state;
            prev = y;
        }
    }
    if terms.is_empty() {
        return Ok((0.0, want_grad.then(|| params.tensors.zeros_like())));
    }
    let loss = g.tape.combine(&terms);
    let value = g.tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    if !want_grad {
        return Ok((value, None));
    }
    let grads = g.tape.backward(loss)?;
    let tape = &g.tape;
    Ok((value, Some(g.vars.map(&mut |_, &v| tape.gradient(&grads, v)))))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub dev: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<EpochLoss>,
    /// Epoch whose parameters were kept (best dev loss, or the last epoch without dev data).
    pub best_epoch: usize,
}

/// `epoch \t train_loss \t dev_loss` per line; `-` when there is no dev split.
pub fn format_trace(trace: &[EpochLoss]) -> String {
    let mut out = String::new();
    for e in trace {
        let dev = e.dev.map_or_else(|| "-".to_string(), |d| format!("{d:.6}"));
        let _ = writeln!(out, "{}\t{:.6}\t{}", e.epoch, e.train, dev);
    }
    out
}

fn add_scaled(dst: &mut ModelTensors, k: f64, src: &ModelTensors) {
    let src: Vec<&Mat> = src.named().into_iter().map(|(_, m)| m).collect();
    let mut i = 0;
    dst.visit_mut(&mut |_, m| {
        m.axpy(k, src[i]);
        i += 1;
    });
}

fn sq_norm(t: &ModelTensors) -> f64 {
    t.named().iter().map(|(_, m)| m.sq_norm()).sum()
}

fn mean_loss(params: &ModelParams, examples: &[Example], lambda: f64) -> Result<f64> {
    let losses = par::map(examples, |ex| example_loss(params, ex, lambda, false).map(|r| r.0));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / examples.len() as f64)
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// Trains from scratch on the realized phone sequences of `corpus.train`.
pub fn train(
    corpus: &CorpusSplit,
    inventory: &PhoneInventory,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    augment: Augment,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::EmptyInput("training split"));
    }
    let input_dim = corpus.train[0].features.cols();
    let mut params = ModelParams::init(model_cfg, input_dim, inventory, augment, derive_seed(cfg.seed, 0))?;
    params.lambda_mtl = cfg.lambda_mtl;

    let stats = &corpus.duration_stats;
    let fpt = model_cfg.frames_per_token;
    let train_ex = corpus
        .train
        .iter()
        .map(|u| Example::from_utterance(u, augment, stats, fpt))
        .collect::<Result<Vec<_>>>()?;
    let dev_ex = corpus
        .dev
        .iter()
        .map(|u| Example::from_utterance(u, augment, stats, fpt))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = Rng::new(cfg.seed).fork(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut trace = Vec::new();
    let mut best: Option<(f64, usize, ModelTensors)> = None;

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<&Example> = batch.iter().map(|&i| &train_ex[i]).collect();
            let results = par::map(&items, |ex| example_loss(&params, ex, cfg.lambda_mtl, true));
            // summed in batch order so the result does not depend on scheduling
            let mut grad = params.tensors.zeros_like();
            for r in results {
                let (loss, g) = r.map_err(|e| Error::Diverged {
                    epoch,
                    detail: e.to_string(),
                })?;
                epoch_loss += loss;
                add_scaled(&mut grad, 1.0 / batch.len() as f64, &g.expect("gradient requested"));
            }
            let norm = sq_norm(&grad).sqrt();
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "non-finite gradient".into(),
                });
            }
            let scale = if norm > CLIP_NORM { CLIP_NORM / norm } else { 1.0 };
            add_scaled(&mut params.tensors, -cfg.learning_rate * scale, &grad);
        }
        let train_loss = epoch_loss / train_ex.len() as f64;
        let dev_loss = if dev_ex.is_empty() {
            None
        } else {
            Some(mean_loss(&params, &dev_ex, cfg.lambda_mtl).map_err(|e| Error::Diverged {
                epoch,
                detail: e.to_string(),
            })?)
        };
        trace.push(EpochLoss {
            epoch,
            train: train_loss,
            dev: dev_loss,
        });

        let Some(dev) = dev_loss else { continue };
        match &best {
            Some((b, _, _)) if dev >= *b => {
                let since = epoch - best.as_ref().map_or(0, |b| b.1);
                if cfg.patience > 0 && since >= cfg.patience {
                    break;
                }
            }
            _ => best = Some((dev, epoch, params.tensors.clone())),
        }
    }

    let best_epoch = match best {
        Some((_, epoch, tensors)) => {
            params.tensors = tensors;
            epoch
        }
        None => trace.len(),
    };
    Ok(TrainOutcome {
        params,
        trace,
        best_epoch,
    })
}

/// Finite-difference check of the joint loss gradient over a random subset of at
/// least 200 coordinates (all of them for smaller models).
pub fn grad_check_joint(params: &ModelParams, ex: &Example, lambda: f64, seed: u64) -> Result<f64> {
    let (_, grad) = example_loss(params, ex, lambda, true)?;
    let grad = grad.expect("gradient requested").flatten();
    let base = params.tensors.flatten();
    let mut idx: Vec<usize> = (0..base.len()).collect();
    Rng::new(seed).shuffle(&mut idx);
    idx.truncate(200);

    let x: Vec<f64> = idx.iter().map(|&i| base[i]).collect();
    let g: Vec<f64> = idx.iter().map(|&i| grad[i]).collect();
    let mut probe = params.clone();
    let mut full = base.clone();
    finite_diff_check(
        |sub| {
            for (&i, &v) in idx.iter().zip(sub) {
                full[i] = v;
            }
            probe.tensors.assign(&full);
            example_loss(&probe, ex, lambda, false).map_or(f64::NAN, |r| r.0)
        },
        &x,
        &g,
        1e-3,
    )
}
