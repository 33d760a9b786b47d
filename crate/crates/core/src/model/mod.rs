//! Acoustic encoder with a CTC head, optional text-prompt encoder, and a
//! location-aware attention decoder.

mod checkpoint;
pub(crate) mod graph;
mod params;
mod stream;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use params::{
    AttentionParams, Augment, CtcHeadParams, DecoderParams, EncoderParams, ModelConfig, ModelParams, ModelShape,
    ModelTensors, PromptParams, RnnParams,
};
pub use stream::build_prompt_stream;

use crate::autodiff::Var;
use crate::corpus::{Symbol, SOS};
use crate::ctc::Posteriorgram;
use crate::error::{Error, Result};
use crate::numerics::{masked_log_softmax, Mat};
use graph::{ctc_mask, decoder_mask, AttentionOut, Graph, Memories, StepVars};

/// Encoder output `h_1..h_T`, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMemory {
    pub vectors: Mat,
}

impl EncodedMemory {
    pub fn frames(&self) -> usize {
        self.vectors.rows()
    }
}

/// Encoded text-prompt stream.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEncoding {
    pub stream: Vec<Symbol>,
    /// `|stream| × H`
    pub vectors: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub q: Vec<f64>,
    pub a_prev: Vec<f64>,
    pub a_prompt_prev: Option<Vec<f64>>,
    pub c_prev: Symbol,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub energies: Vec<f64>,
    pub weights: Vec<f64>,
    pub context: Vec<f64>,
}

impl AttentionWeights {
    /// Frame with the largest weight (earliest on ties).
    pub fn peak(&self) -> usize {
        let mut best = 0;
        for (t, &w) in self.weights.iter().enumerate() {
            if w > self.weights[best] {
                best = t;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    /// Log-distribution over the inventory; only phones and `<eos>` are finite.
    pub log_probs: Vec<f64>,
    pub state: DecoderState,
    pub attention: AttentionWeights,
    pub prompt_attention: Option<AttentionWeights>,
}

fn check_features(params: &ModelParams, features: &Mat) -> Result<()> {
    if features.rows() == 0 {
        return Err(Error::EmptyInput("features"));
    }
    if features.cols() != params.shape.input_dim {
        return Err(Error::Dimension {
            context: "feature columns",
            expected: params.shape.input_dim,
            actual: features.cols(),
        });
    }
    if !features.is_finite() {
        return Err(Error::NonFinite("features"));
    }
    Ok(())
}

pub fn encode_acoustic(params: &ModelParams, features: &Mat) -> Result<EncodedMemory> {
    check_features(params, features)?;
    let mut g = Graph::new(params);
    let x = g.tape.leaf_ref(features);
    let h = g.encode(x);
    Ok(EncodedMemory {
        vectors: g.tape.value(h).clone(),
    })
}

/// CTC head posteriors over blank and phones; `<sos>`/`<eos>` get probability zero.
pub fn ctc_posteriorgram(params: &ModelParams, memory: &EncodedMemory) -> Result<Posteriorgram> {
    check_memory(params, memory)?;
    let mut g = Graph::new(params);
    let h = g.tape.leaf_ref(&memory.vectors);
    let z = g.ctc_logits(h);
    Ok(Posteriorgram::from_logits(g.tape.value(z), Some(&ctc_mask(params.shape.vocab))))
}

/// Encoder and CTC head in one pass.
pub fn acoustic_forward(params: &ModelParams, features: &Mat) -> Result<(EncodedMemory, Posteriorgram)> {
    let memory = encode_acoustic(params, features)?;
    let post = ctc_posteriorgram(params, &memory)?;
    Ok((memory, post))
}

fn check_memory(params: &ModelParams, memory: &EncodedMemory) -> Result<()> {
    if memory.frames() == 0 {
        return Err(Error::EmptyInput("encoded memory"));
    }
    if memory.vectors.cols() != params.shape.hidden {
        return Err(Error::Dimension {
            context: "memory width",
            expected: params.shape.hidden,
            actual: memory.vectors.cols(),
        });
    }
    Ok(())
}

pub fn encode_prompt(params: &ModelParams, stream: &[Symbol]) -> Result<PromptEncoding> {
    if stream.is_empty() {
        return Err(Error::EmptyInput("prompt stream"));
    }
    if let Some(&s) = stream.iter().find(|&&s| s >= params.shape.vocab) {
        return Err(Error::UnknownSymbol(format!("index {s}")));
    }
    let mut g = Graph::new(params);
    let v = g.encode_prompt(stream)?;
    Ok(PromptEncoding {
        stream: stream.to_vec(),
        vectors: g.tape.value(v).clone(),
    })
}

fn attention_of(g: &Graph, out: &AttentionOut) -> AttentionWeights {
    AttentionWeights {
        energies: g.tape.value(out.energies).as_slice().to_vec(),
        weights: g.tape.value(out.weights).as_slice().to_vec(),
        context: g.tape.value(out.context).as_slice().to_vec(),
    }
}

/// Incremental decoder over one utterance. Weight leaves and memory projections
/// are registered once; each step only appends its own operations.
pub struct Decoder<'p> {
    params: &'p ModelParams,
    graph: Graph<'p>,
    mem: Memories,
    frames: usize,
    prompt_len: Option<usize>,
    mask: Vec<bool>,
}

impl<'p> Decoder<'p> {
    pub fn new(params: &'p ModelParams, memory: &'p EncodedMemory, prompt: Option<&'p PromptEncoding>) -> Result<Self> {
        check_memory(params, memory)?;
        match (params.is_augmented(), prompt) {
            (true, None) => return Err(Error::invalid("augmented model needs a prompt encoding")),
            (false, Some(_)) => return Err(Error::invalid("model has no prompt encoder")),
            _ => {}
        }
        let mut graph = Graph::new(params);
        let h = graph.tape.leaf_ref(&memory.vectors);
        let pm = prompt.map(|p| graph.tape.leaf_ref(&p.vectors));
        let mem = graph.memories(h, pm);
        Ok(Decoder {
            params,
            graph,
            mem,
            frames: memory.frames(),
            prompt_len: prompt.map(|p| p.vectors.rows()),
            mask: decoder_mask(params.shape.vocab),
        })
    }

    pub fn initial_state(&self) -> DecoderState {
        DecoderState {
            q: vec![0.0; self.params.shape.dec_hidden],
            a_prev: vec![1.0 / self.frames as f64; self.frames],
            a_prompt_prev: self.prompt_len.map(|n| vec![1.0 / n as f64; n]),
            c_prev: SOS,
        }
    }

    fn state_vars(&mut self, state: &DecoderState) -> Result<StepVars> {
        let shape = &self.params.shape;
        if state.q.len() != shape.dec_hidden {
            return Err(Error::Dimension {
                context: "decoder state",
                expected: shape.dec_hidden,
                actual: state.q.len(),
            });
        }
        if state.a_prev.len() != self.frames {
            return Err(Error::Dimension {
                context: "previous attention",
                expected: self.frames,
                actual: state.a_prev.len(),
            });
        }
        if state.c_prev >= shape.vocab {
            return Err(Error::UnknownSymbol(format!("index {}", state.c_prev)));
        }
        let tape = &mut self.graph.tape;
        let q = tape.leaf(Mat::row_vector(state.q.clone()));
        let a = tape.leaf(Mat::from_raw(self.frames, 1, state.a_prev.clone()));
        let a_prompt = match (&state.a_prompt_prev, self.prompt_len) {
            (Some(ap), Some(n)) if ap.len() == n => Some(tape.leaf(Mat::from_raw(n, 1, ap.clone()))),
            (None, None) => None,
            _ => return Err(Error::invalid("prompt attention state does not match the prompt encoding")),
        };
        Ok(StepVars { q, a, a_prompt })
    }

    pub fn step(&mut self, state: &DecoderState) -> Result<DecoderOutput> {
        let vars = self.state_vars(state)?;
        let out = self.graph.decoder_step(&self.mem, &vars, state.c_prev)?;
        let log_probs = masked_log_softmax(self.graph.tape.value(out.logits).as_slice(), Some(&self.mask));
        let value = |v: Var| self.graph.tape.value(v).as_slice().to_vec();
        let next = DecoderState {
            q: value(out.state.q),
            a_prev: value(out.state.a),
            a_prompt_prev: out.state.a_prompt.map(value),
            c_prev: state.c_prev,
        };
        Ok(DecoderOutput {
            log_probs,
            state: next,
            attention: attention_of(&self.graph, &out.attention),
            prompt_attention: out.prompt_attention.as_ref().map(|p| attention_of(&self.graph, p)),
        })
    }
}

/// Initial decoder state for `memory` (and the prompt encoding, when augmented).
pub fn initial_state(params: &ModelParams, memory: &EncodedMemory, prompt: Option<&PromptEncoding>) -> Result<DecoderState> {
    Ok(Decoder::new(params, memory, prompt)?.initial_state())
}

/// Acoustic attention for `state`, without advancing the decoder.
pub fn attention_step(params: &ModelParams, memory: &EncodedMemory, state: &DecoderState) -> Result<AttentionWeights> {
    check_memory(params, memory)?;
    if state.a_prev.len() != memory.frames() {
        return Err(Error::Dimension {
            context: "previous attention",
            expected: memory.frames(),
            actual: state.a_prev.len(),
        });
    }
    if state.q.len() != params.shape.dec_hidden {
        return Err(Error::Dimension {
            context: "decoder state",
            expected: params.shape.dec_hidden,
            actual: state.q.len(),
        });
    }
    let mut g = Graph::new(params);
    let att = g.vars.decoder.attention.clone();
    let h = g.tape.leaf_ref(&memory.vectors);
    let proj = g.project(&att, h);
    let q = g.tape.leaf(Mat::row_vector(state.q.clone()));
    let a = g.tape.leaf(Mat::from_raw(memory.frames(), 1, state.a_prev.clone()));
    let out = g.attend(&att, h, proj, q, a);
    Ok(attention_of(&g, &out))
}

/// One decoder step from `state`. The returned state's `c_prev` is unchanged; the
/// caller sets it to the symbol it chooses to emit.
pub fn decoder_step(
    params: &ModelParams,
    memory: &EncodedMemory,
    prompt: Option<&PromptEncoding>,
    state: &DecoderState,
) -> Result<DecoderOutput> {
    Decoder::new(params, memory, prompt)?.step(state)
}
