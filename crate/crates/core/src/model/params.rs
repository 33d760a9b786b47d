use serde::{Deserialize, Serialize};

use crate::corpus::PhoneInventory;
use crate::error::{Error, Result};
use crate::numerics::{Mat, Rng};

/// Hyperparameters fixing every weight shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder output width `H`; split evenly between the two directions.
    pub hidden: usize,
    pub att_dim: usize,
    pub embed_dim: usize,
    pub dec_hidden: usize,
    pub conv_filters: usize,
    /// Odd width of the location convolution.
    pub conv_width: usize,
    pub gamma: f64,
    /// Average acoustic frames represented by one repeated prompt token.
    pub frames_per_token: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 32,
            att_dim: 16,
            embed_dim: 12,
            dec_hidden: 32,
            conv_filters: 8,
            conv_width: 15,
            gamma: 1.0,
            frames_per_token: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.hidden,
            self.att_dim,
            self.embed_dim,
            self.dec_hidden,
            self.conv_filters,
            self.conv_width,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if !self.hidden.is_multiple_of(2) {
            return Err(Error::invalid("hidden size must be even (two directions)"));
        }
        if self.conv_width.is_multiple_of(2) {
            return Err(Error::invalid("conv_width must be odd"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("gamma must be positive"));
        }
        if !(self.frames_per_token > 0.0 && self.frames_per_token.is_finite()) {
            return Err(Error::invalid("frames_per_token must be positive"));
        }
        Ok(())
    }
}

/// Which text-prompt stream, if any, conditions the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augment {
    #[default]
    None,
    Ps,
    Rps,
}

impl Augment {
    pub fn name(self) -> &'static str {
        match self {
            Augment::None => "none",
            Augment::Ps => "ps",
            Augment::Rps => "rps",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Augment::None),
            "ps" => Ok(Augment::Ps),
            "rps" => Ok(Augment::Rps),
            other => Err(Error::invalid(format!("unknown augmentation mode {other:?}"))),
        }
    }
}

/// Every dimension a checkpoint must agree on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub input_dim: usize,
    pub vocab: usize,
    pub hidden: usize,
    pub att_dim: usize,
    pub embed_dim: usize,
    pub dec_hidden: usize,
    pub conv_filters: usize,
    pub conv_width: usize,
}

impl ModelShape {
    pub(crate) const FIELDS: [&'static str; 8] = [
        "input_dim",
        "vocab",
        "hidden",
        "att_dim",
        "embed_dim",
        "dec_hidden",
        "conv_filters",
        "conv_width",
    ];

    pub(crate) fn values(&self) -> [usize; 8] {
        [
            self.input_dim,
            self.vocab,
            self.hidden,
            self.att_dim,
            self.embed_dim,
            self.dec_hidden,
            self.conv_filters,
            self.conv_width,
        ]
    }

    pub(crate) fn from_values(v: [usize; 8]) -> Self {
        ModelShape {
            input_dim: v[0],
            vocab: v[1],
            hidden: v[2],
            att_dim: v[3],
            embed_dim: v[4],
            dec_hidden: v[5],
            conv_filters: v[6],
            conv_width: v[7],
        }
    }
}

/// Declares a weight group generic over its element type, so the same layout
/// holds matrices, tape variables, or gradients.
macro_rules! tensor_group {
    ($(#[$m:meta])* $name:ident { $($f:ident),* $(,)? } $(nested { $($g:ident : $gt:ident),* $(,)? })?) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T = Mat> {
            $(pub $f: T,)*
            $($(pub $g: $gt<T>,)*)?
        }

        impl<T> $name<T> {
            pub(crate) fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T) -> U) -> $name<U> {
                $name {
                    $($f: f(format!("{prefix}.{}", stringify!($f)), &self.$f),)*
                    $($($g: self.$g.map(&format!("{prefix}.{}", stringify!($g)), f),)*)?
                }
            }

            pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
                $(f(format!("{prefix}.{}", stringify!($f)), &self.$f);)*
                $($(self.$g.visit(&format!("{prefix}.{}", stringify!($g)), f);)*)?
            }

            pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
                $(f(format!("{prefix}.{}", stringify!($f)), &mut self.$f);)*
                $($(self.$g.visit_mut(&format!("{prefix}.{}", stringify!($g)), f);)*)?
            }
        }
    };
}

tensor_group!(
    /// One direction of a tanh recurrent layer.
    RnnParams { w_x, w_h, b }
);

tensor_group!(
    /// Location-aware scorer: `wᵀ tanh(W_q q + W_m h_t + W_loc conv(a_prev) + b)`.
    AttentionParams { w_q, w_m, w_loc, filters, v, b }
);

tensor_group!(
    EncoderParams { w_in, b_in } nested { fwd: RnnParams, bwd: RnnParams }
);

tensor_group!(
    CtcHeadParams { w, b }
);

tensor_group!(
    DecoderParams { embed, w_e, w_r, w_q, b, w_out, b_out } nested { attention: AttentionParams }
);

tensor_group!(
    /// Text-prompt encoder plus the weights fusing its context into the decoder.
    PromptParams { embed, w_rp, w_out_p } nested { fwd: RnnParams, bwd: RnnParams, attention: AttentionParams }
);

#[derive(Debug, Clone, PartialEq)]
pub struct ModelTensors<T = Mat> {
    pub encoder: EncoderParams<T>,
    pub ctc: CtcHeadParams<T>,
    pub decoder: DecoderParams<T>,
    pub prompt: Option<PromptParams<T>>,
}

impl<T> ModelTensors<T> {
    pub(crate) fn map<'a, U>(&'a self, f: &mut impl FnMut(String, &'a T) -> U) -> ModelTensors<U> {
        ModelTensors {
            encoder: self.encoder.map("encoder", f),
            ctc: self.ctc.map("ctc", f),
            decoder: self.decoder.map("decoder", f),
            prompt: self.prompt.as_ref().map(|p| p.map("prompt", f)),
        }
    }

    pub(crate) fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut T)) {
        self.encoder.visit_mut("encoder", f);
        self.ctc.visit_mut("ctc", f);
        self.decoder.visit_mut("decoder", f);
        if let Some(p) = &mut self.prompt {
            p.visit_mut("prompt", f);
        }
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.encoder.visit("encoder", &mut |n, t| out.push((n, t)));
        self.ctc.visit("ctc", &mut |n, t| out.push((n, t)));
        self.decoder.visit("decoder", &mut |n, t| out.push((n, t)));
        if let Some(p) = &self.prompt {
            p.visit("prompt", &mut |n, t| out.push((n, t)));
        }
        out
    }
}

impl ModelTensors<Mat> {
    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn zeros_like(&self) -> ModelTensors<Mat> {
        self.map(&mut |_, m| Mat::zeros(m.rows(), m.cols()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.named().iter().flat_map(|(_, m)| m.as_slice().iter().copied()).collect()
    }

    /// Overwrites every entry from `values` in canonical order.
    pub fn assign(&mut self, values: &[f64]) {
        let mut off = 0;
        self.visit_mut(&mut |_, m| {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&values[off..off + n]);
            off += n;
        });
    }
}

/// Trained (or freshly initialized) weights plus the settings that must travel with them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub shape: ModelShape,
    pub gamma: f64,
    pub frames_per_token: f64,
    /// Default CTC weight for joint decoding.
    pub lambda_decode: f64,
    /// CTC weight the model was trained with.
    pub lambda_mtl: f64,
    pub augment: Augment,
    pub inventory_hash: String,
    pub tensors: ModelTensors,
}

fn uniform(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let s = 1.0 / (fan_in as f64).sqrt();
    Mat::from_raw(rows, cols, (0..rows * cols).map(|_| rng.uniform_range(-s, s)).collect())
}

fn rnn(rng: &mut Rng, input: usize, h: usize) -> RnnParams {
    RnnParams {
        w_x: uniform(rng, h, input, input),
        w_h: uniform(rng, h, h, h),
        b: Mat::zeros(1, h),
    }
}

fn attention(rng: &mut Rng, cfg: &ModelConfig) -> AttentionParams {
    let a = cfg.att_dim;
    AttentionParams {
        w_q: uniform(rng, a, cfg.dec_hidden, cfg.dec_hidden),
        w_m: uniform(rng, a, cfg.hidden, cfg.hidden),
        w_loc: uniform(rng, a, cfg.conv_filters, cfg.conv_filters),
        filters: uniform(rng, cfg.conv_filters, cfg.conv_width, cfg.conv_width),
        v: uniform(rng, 1, a, a),
        b: Mat::zeros(1, a),
    }
}

const PROMPT_STREAM: u64 = 0x5052_4f4d_5054;

fn build_tensors(cfg: &ModelConfig, input_dim: usize, v: usize, augment: Augment, seed: u64) -> ModelTensors {
    let (h, e, d) = (cfg.hidden, cfg.embed_dim, cfg.dec_hidden);
    let mut rng = Rng::new(seed);
    let encoder = EncoderParams {
        w_in: uniform(&mut rng, h, input_dim, input_dim),
        b_in: Mat::zeros(1, h),
        fwd: rnn(&mut rng, h, h / 2),
        bwd: rnn(&mut rng, h, h / 2),
    };
    let ctc = CtcHeadParams {
        w: uniform(&mut rng, v, h, h),
        b: Mat::zeros(1, v),
    };
    let decoder = DecoderParams {
        embed: uniform(&mut rng, v, e, 1),
        w_e: uniform(&mut rng, d, e, e),
        w_r: uniform(&mut rng, d, h, h),
        w_q: uniform(&mut rng, d, d, d),
        b: Mat::zeros(1, d),
        w_out: uniform(&mut rng, v, d + h, d + h),
        b_out: Mat::zeros(1, v),
        attention: attention(&mut rng, cfg),
    };
    let prompt = (augment != Augment::None).then(|| {
        let mut rng = rng.fork(PROMPT_STREAM);
        PromptParams {
            embed: uniform(&mut rng, v, e, 1),
            w_rp: uniform(&mut rng, d, h, h),
            w_out_p: uniform(&mut rng, v, h, h),
            fwd: rnn(&mut rng, e, h / 2),
            bwd: rnn(&mut rng, e, h / 2),
            attention: attention(&mut rng, cfg),
        }
    });
    ModelTensors {
        encoder,
        ctc,
        decoder,
        prompt,
    }
}

impl ModelParams {
    /// Random initialization. Prompt weights come from their own RNG stream, so
    /// the shared weights are identical with and without augmentation.
    pub fn init(
        cfg: &ModelConfig,
        input_dim: usize,
        inventory: &PhoneInventory,
        augment: Augment,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 {
            return Err(Error::invalid("input dimension must be positive"));
        }
        let v = inventory.len();
        Ok(ModelParams {
            shape: ModelShape {
                input_dim,
                vocab: v,
                hidden: cfg.hidden,
                att_dim: cfg.att_dim,
                embed_dim: cfg.embed_dim,
                dec_hidden: cfg.dec_hidden,
                conv_filters: cfg.conv_filters,
                conv_width: cfg.conv_width,
            },
            gamma: cfg.gamma,
            frames_per_token: cfg.frames_per_token,
            lambda_decode: 0.3,
            lambda_mtl: 0.5,
            augment,
            inventory_hash: inventory.hash(),
            tensors: build_tensors(cfg, input_dim, v, augment, seed),
        })
    }

    /// Expected `(rows, cols)` for every tensor name, used to validate loaded weights.
    pub(crate) fn expected_shapes(&self) -> Vec<(String, (usize, usize))> {
        let s = self.shape;
        let cfg = ModelConfig {
            hidden: s.hidden,
            att_dim: s.att_dim,
            embed_dim: s.embed_dim,
            dec_hidden: s.dec_hidden,
            conv_filters: s.conv_filters,
            conv_width: s.conv_width,
            gamma: 1.0,
            frames_per_token: 1.0,
        };
        build_tensors(&cfg, s.input_dim, s.vocab, self.augment, 0)
            .named()
            .into_iter()
            .map(|(n, m)| (n, m.shape()))
            .collect()
    }

    pub fn is_augmented(&self) -> bool {
        self.augment != Augment::None
    }

    /// Errors unless the model was built for `mode`.
    pub fn require_augment(&self, mode: Augment) -> Result<()> {
        if self.augment != mode {
            return Err(Error::CheckpointMismatch(format!(
                "model was trained with augmentation {:?} but {:?} was requested",
                self.augment.name(),
                mode.name()
            )));
        }
        Ok(())
    }

    pub fn check_inventory(&self, inventory: &PhoneInventory) -> Result<()> {
        if self.inventory_hash != inventory.hash() || self.shape.vocab != inventory.len() {
            return Err(Error::CheckpointMismatch(
                "inventory hash differs from the one the model was trained on".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inv() -> PhoneInventory {
        PhoneInventory::new(&["a", "b", "l"]).unwrap()
    }

    #[test]
    fn prompt_weights_do_not_perturb_shared_weights() {
        let cfg = ModelConfig::default();
        let plain = ModelParams::init(&cfg, 4, &inv(), Augment::None, 9).unwrap();
        let aug = ModelParams::init(&cfg, 4, &inv(), Augment::Rps, 9).unwrap();
        assert_eq!(plain.tensors.encoder, aug.tensors.encoder);
        assert_eq!(plain.tensors.decoder, aug.tensors.decoder);
        assert_eq!(plain.tensors.ctc, aug.tensors.ctc);
        assert!(plain.tensors.prompt.is_none());
        assert!(aug.tensors.prompt.is_some());
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let p = ModelParams::init(&ModelConfig::default(), 4, &inv(), Augment::Ps, 1).unwrap();
        let names: Vec<String> = p.tensors.named().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(names[0], "encoder.w_in");
        assert!(names.last().unwrap().starts_with("prompt.attention"));
    }

    #[test]
    fn flatten_assign_round_trip() {
        let p = ModelParams::init(&ModelConfig::default(), 4, &inv(), Augment::Ps, 1).unwrap();
        let flat = p.tensors.flatten();
        assert_eq!(flat.len(), p.tensors.num_parameters());
        let mut q = p.tensors.zeros_like();
        q.assign(&flat);
        assert_eq!(q, p.tensors);
    }

    #[test]
    fn expected_shapes_match_init() {
        let p = ModelParams::init(&ModelConfig::default(), 5, &inv(), Augment::Rps, 2).unwrap();
        let got: Vec<_> = p.tensors.named().into_iter().map(|(n, m)| (n, m.shape())).collect();
        assert_eq!(got, p.expected_shapes());
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = ModelConfig {
            hidden: 7,
            ..ModelConfig::default()
        };
        assert!(ModelParams::init(&cfg, 4, &inv(), Augment::None, 0).is_err());
    }
}
