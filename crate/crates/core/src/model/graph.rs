use super::params::{AttentionParams, ModelParams, ModelTensors, RnnParams};
use crate::autodiff::{Tape, Var};
use crate::corpus::{Symbol, BLANK, EOS, FIRST_PHONE};
use crate::error::{Error, Result};
use crate::numerics::Mat;

/// Mask over the inventory for the CTC head: blank and phones.
pub(crate) fn ctc_mask(vocab: usize) -> Vec<bool> {
    (0..vocab).map(|k| k == BLANK || k >= FIRST_PHONE).collect()
}

/// Mask over the inventory for the attention head: phones and end-of-sequence.
pub(crate) fn decoder_mask(vocab: usize) -> Vec<bool> {
    (0..vocab).map(|k| k == EOS || k >= FIRST_PHONE).collect()
}

pub(crate) struct AttentionOut {
    pub energies: Var,
    pub weights: Var,
    pub context: Var,
}

/// Per-utterance memories the decoder attends over, with their precomputed projections.
#[derive(Clone, Copy)]
pub(crate) struct Memories {
    pub acoustic: Var,
    pub acoustic_proj: Var,
    pub prompt: Option<(Var, Var)>,
}

pub(crate) struct StepVars {
    pub q: Var,
    pub a: Var,
    pub a_prompt: Option<Var>,
}

pub(crate) struct StepOut {
    pub logits: Var,
    pub state: StepVars,
    pub attention: AttentionOut,
    pub prompt_attention: Option<AttentionOut>,
}

/// A tape with every model weight registered as a borrowed leaf.
pub(crate) struct Graph<'p> {
    pub tape: Tape<'p>,
    pub vars: ModelTensors<Var>,
    pub gamma: f64,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        let mut tape = Tape::new();
        let vars = params.tensors.map(&mut |_, m| tape.leaf_ref(m));
        Graph {
            tape,
            vars,
            gamma: params.gamma,
        }
    }

    fn rnn(&mut self, p: &RnnParams<Var>, xs: Var, reverse: bool) -> Var {
        let n = self.tape.value(xs).rows();
        let proj = self.tape.matmul_t(xs, p.w_x);
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        let mut hs = vec![None; n];
        let mut prev: Option<Var> = None;
        for t in order {
            let mut pre = self.tape.row(proj, t);
            if let Some(h) = prev {
                let rec = self.tape.matmul_t(h, p.w_h);
                pre = self.tape.add(pre, rec);
            }
            let pre = self.tape.add(pre, p.b);
            let h = self.tape.tanh(pre);
            hs[t] = Some(h);
            prev = Some(h);
        }
        let hs: Vec<Var> = hs.into_iter().map(|h| h.expect("every step visited")).collect();
        self.tape.stack_rows(&hs)
    }

    fn birnn(&mut self, fwd: &RnnParams<Var>, bwd: &RnnParams<Var>, xs: Var) -> Var {
        let f = self.rnn(fwd, xs, false);
        let b = self.rnn(bwd, xs, true);
        self.tape.concat_cols(&[f, b])
    }

    /// `T × input_dim` features to `T × H` memory.
    pub fn encode(&mut self, features: Var) -> Var {
        let enc = self.vars.encoder.clone();
        let lin = self.tape.matmul_t(features, enc.w_in);
        let lin = self.tape.add_row(lin, enc.b_in);
        let u = self.tape.tanh(lin);
        self.birnn(&enc.fwd, &enc.bwd, u)
    }

    pub fn ctc_logits(&mut self, memory: Var) -> Var {
        let head = self.vars.ctc.clone();
        let z = self.tape.matmul_t(memory, head.w);
        self.tape.add_row(z, head.b)
    }

    pub fn encode_prompt(&mut self, stream: &[Symbol]) -> Result<Var> {
        let p = self
            .vars
            .prompt
            .clone()
            .ok_or_else(|| Error::invalid("model has no prompt encoder"))?;
        let rows: Vec<Var> = stream.iter().map(|&s| self.tape.row(p.embed, s)).collect();
        let emb = self.tape.stack_rows(&rows);
        Ok(self.birnn(&p.fwd, &p.bwd, emb))
    }

    pub fn project(&mut self, att: &AttentionParams<Var>, memory: Var) -> Var {
        self.tape.matmul_t(memory, att.w_m)
    }

    pub fn memories(&mut self, acoustic: Var, prompt: Option<Var>) -> Memories {
        let dec_att = self.vars.decoder.attention.clone();
        let acoustic_proj = self.project(&dec_att, acoustic);
        let prompt = prompt.map(|pm| {
            let p_att = self.vars.prompt.as_ref().expect("prompt memory implies prompt weights").attention.clone();
            (pm, self.project(&p_att, pm))
        });
        Memories {
            acoustic,
            acoustic_proj,
            prompt,
        }
    }

    pub fn attend(&mut self, att: &AttentionParams<Var>, memory: Var, proj: Var, q: Var, a_prev: Var) -> AttentionOut {
        let loc = self.tape.conv1d(a_prev, att.filters);
        let loc = self.tape.matmul_t(loc, att.w_loc);
        let qp = self.tape.matmul_t(q, att.w_q);
        let pre = self.tape.add(proj, loc);
        let pre = self.tape.add_row(pre, qp);
        let pre = self.tape.add_row(pre, att.b);
        let act = self.tape.tanh(pre);
        let energies = self.tape.matmul_t(act, att.v);
        let weights = self.tape.softmax(energies, self.gamma);
        let context = self.tape.weighted_rows(weights, memory);
        AttentionOut {
            energies,
            weights,
            context,
        }
    }

    /// One label-synchronous step: attend with the previous state, update the
    /// decoder cell from the previous symbol and the contexts, emit logits.
    pub fn decoder_step(&mut self, mem: &Memories, prev: &StepVars, c_prev: Symbol) -> Result<StepOut> {
        let dec = self.vars.decoder.clone();
        let attention = self.attend(&dec.attention, mem.acoustic, mem.acoustic_proj, prev.q, prev.a);
        let prompt_attention = match (&self.vars.prompt.clone(), mem.prompt, prev.a_prompt) {
            (Some(p), Some((pm, pp)), Some(ap)) => Some((p.clone(), self.attend(&p.attention, pm, pp, prev.q, ap))),
            (None, None, None) => None,
            _ => return Err(Error::invalid("augmented model needs a prompt encoding (and only then)")),
        };

        let emb = self.tape.row(dec.embed, c_prev);
        let mut pre = self.tape.matmul_t(emb, dec.w_e);
        let t = self.tape.matmul_t(attention.context, dec.w_r);
        pre = self.tape.add(pre, t);
        let t = self.tape.matmul_t(prev.q, dec.w_q);
        pre = self.tape.add(pre, t);
        if let Some((p, pa)) = &prompt_attention {
            let t = self.tape.matmul_t(pa.context, p.w_rp);
            pre = self.tape.add(pre, t);
        }
        let pre = self.tape.add(pre, dec.b);
        let q = self.tape.tanh(pre);

        let joined = self.tape.concat_cols(&[q, attention.context]);
        let mut logits = self.tape.matmul_t(joined, dec.w_out);
        if let Some((p, pa)) = &prompt_attention {
            let t = self.tape.matmul_t(pa.context, p.w_out_p);
            logits = self.tape.add(logits, t);
        }
        let logits = self.tape.add(logits, dec.b_out);

        let a_prompt = prompt_attention.as_ref().map(|(_, pa)| pa.weights);
        Ok(StepOut {
            logits,
            state: StepVars {
                q,
                a: attention.weights,
                a_prompt,
            },
            attention,
            prompt_attention: prompt_attention.map(|(_, pa)| pa),
        })
    }

    /// Initial decoder state: zero hidden vector and uniform attention.
    pub fn initial_state(&mut self, mem: &Memories, dec_hidden: usize) -> StepVars {
        let q = self.tape.leaf(Mat::zeros(1, dec_hidden));
        let a = self.uniform(mem.acoustic);
        let a_prompt = mem.prompt.map(|(pm, _)| self.uniform(pm));
        StepVars { q, a, a_prompt }
    }

    fn uniform(&mut self, memory: Var) -> Var {
        let n = self.tape.value(memory).rows();
        self.tape.leaf(Mat::filled(n, 1, 1.0 / n as f64))
    }
}
