use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::inventory::{PhoneInventory, Symbol, FIRST_PHONE};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Mat, Rng};
use crate::par;

/// Ground-truth outcome for one prompt position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PositionLabel {
    Correct,
    Substituted(Symbol),
    Deleted,
}

impl PositionLabel {
    pub fn is_error(self) -> bool {
        !matches!(self, PositionLabel::Correct)
    }
}

/// Generator parameters: per-phone diagonal Gaussians, durations, and error processes.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub inventory: PhoneInventory,
    pub feature_dim: usize,
    /// `num_phones × feature_dim`
    pub means: Mat,
    /// `num_phones × feature_dim`, strictly positive.
    pub variances: Mat,
    pub duration_mean: Vec<f64>,
    pub duration_spread: Vec<f64>,
    /// Row-stochastic `num_phones × num_phones`; row p gives what phone p is realized as.
    pub confusion: Mat,
    pub deletion: Vec<f64>,
    pub noise_scale: f64,
    pub seed: u64,
}

/// Compact description from which a full [`SynthConfig`] is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub phones: Vec<String>,
    pub feature_dim: usize,
    /// Standard deviation of the random class means.
    pub separation: f64,
    pub variance: f64,
    pub duration_mean: f64,
    pub duration_spread: f64,
    pub noise_scale: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            phones: ["a", "b", "d", "e", "i", "l", "m", "u"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            feature_dim: 8,
            separation: 1.5,
            variance: 0.1,
            duration_mean: 4.0,
            duration_spread: 1.0,
            noise_scale: 0.2,
        }
    }
}

impl SynthParams {
    /// Error-free config with random class means drawn from `seed`.
    pub fn build(&self, seed: u64) -> Result<SynthConfig> {
        let inventory = PhoneInventory::new(&self.phones)?;
        let p = inventory.num_phones();
        let d = self.feature_dim;
        if d == 0 {
            return Err(Error::invalid("feature_dim must be positive"));
        }
        let mut rng = Rng::new(derive_seed(seed, 0x6d65616e));
        let means = Mat::from_raw(
            p,
            d,
            (0..p * d).map(|_| self.separation * rng.normal()).collect(),
        );
        let cfg = SynthConfig {
            feature_dim: d,
            means,
            variances: Mat::filled(p, d, self.variance),
            duration_mean: vec![self.duration_mean; p],
            duration_spread: vec![self.duration_spread; p],
            confusion: identity(p),
            deletion: vec![0.0; p],
            noise_scale: self.noise_scale,
            seed,
            inventory,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn identity(n: usize) -> Mat {
    let mut m = Mat::zeros(n, n);
    for i in 0..n {
        m.set(i, i, 1.0);
    }
    m
}

impl SynthConfig {
    pub fn num_phones(&self) -> usize {
        self.inventory.num_phones()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.num_phones();
        let shape_ok = self.means.shape() == (p, self.feature_dim)
            && self.variances.shape() == (p, self.feature_dim)
            && self.confusion.shape() == (p, p)
            && self.duration_mean.len() == p
            && self.duration_spread.len() == p
            && self.deletion.len() == p;
        if !shape_ok {
            return Err(Error::invalid("synth config dimensions are inconsistent"));
        }
        if self.variances.as_slice().iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("emission variances must be positive"));
        }
        if self.duration_mean.iter().any(|&m| m < 1.0) || self.duration_spread.iter().any(|&s| s < 0.0) {
            return Err(Error::invalid("durations must be at least one frame"));
        }
        if self.deletion.iter().any(|&d| !(0.0..=1.0).contains(&d)) {
            return Err(Error::invalid("deletion probabilities must lie in [0, 1]"));
        }
        for (i, row) in self.confusion.row_iter().enumerate() {
            if row.iter().any(|&v| v < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("confusion row {i} is not a distribution")));
            }
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::invalid("noise scale must be non-negative"));
        }
        Ok(())
    }

    /// Copy whose per-position error probability is exactly `rate`, split into deletions
    /// (`rate * deletion_share`) and substitutions. Substitution targets follow the
    /// off-diagonal pattern of this config's confusion matrix (uniform when it has none).
    pub fn with_error_rate(&self, rate: f64, deletion_share: f64) -> Result<SynthConfig> {
        if !(0.0..=1.0).contains(&rate) || !(0.0..=1.0).contains(&deletion_share) {
            return Err(Error::invalid("error rate and deletion share must lie in [0, 1]"));
        }
        let p = self.num_phones();
        let del = rate * deletion_share;
        let sub = if del < 1.0 {
            rate * (1.0 - deletion_share) / (1.0 - del)
        } else {
            0.0
        };
        let mut confusion = Mat::zeros(p, p);
        for i in 0..p {
            let off: Vec<f64> = (0..p)
                .map(|j| if j == i { 0.0 } else { self.confusion.get(i, j) })
                .collect();
            let mass: f64 = off.iter().sum();
            for j in 0..p {
                let pattern = if p == 1 {
                    0.0
                } else if mass > 0.0 {
                    off[j] / mass
                } else if j == i {
                    0.0
                } else {
                    1.0 / (p - 1) as f64
                };
                let keep = if p == 1 { 1.0 } else { 1.0 - sub };
                confusion.set(i, j, if j == i { keep } else { sub * pattern });
            }
        }
        let mut out = self.clone();
        out.confusion = confusion;
        out.deletion = vec![del; p];
        out.validate()?;
        Ok(out)
    }

    fn draw_duration(&self, phone_row: usize, rng: &mut Rng) -> usize {
        let m = self.duration_mean[phone_row];
        let s = self.duration_spread[phone_row];
        let lo = ((m - s).round() as i64).max(1);
        let hi = ((m + s).round() as i64).max(lo);
        rng.int_inclusive(lo, hi) as usize
    }
}

/// One synthetic prompted recording with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T × feature_dim`
    pub features: Mat,
    pub prompt: Vec<Symbol>,
    pub realized: Vec<Symbol>,
    pub annotation: Vec<PositionLabel>,
    /// Frames spent on each realized phone.
    pub durations: Vec<usize>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }

    pub fn num_errors(&self) -> usize {
        self.annotation.iter().filter(|l| l.is_error()).count()
    }
}

/// Applies an annotation's edits to a prompt.
pub fn apply_annotation(prompt: &[Symbol], annotation: &[PositionLabel]) -> Result<Vec<Symbol>> {
    if prompt.len() != annotation.len() {
        return Err(Error::Dimension {
            context: "annotation",
            expected: prompt.len(),
            actual: annotation.len(),
        });
    }
    Ok(prompt
        .iter()
        .zip(annotation)
        .filter_map(|(&p, &l)| match l {
            PositionLabel::Correct => Some(p),
            PositionLabel::Substituted(q) => Some(q),
            PositionLabel::Deleted => None,
        })
        .collect())
}

/// Draws deletions then substitutions for `prompt`, and emits frames for what remains.
pub fn synthesize_utterance(
    config: &SynthConfig,
    id: &str,
    prompt: &[Symbol],
    rng: &mut Rng,
) -> Result<Utterance> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput("prompt"));
    }
    if let Some(&bad) = prompt.iter().find(|&&s| !config.inventory.is_phone(s)) {
        return Err(Error::UnknownSymbol(format!("symbol index {bad}")));
    }
    let mut annotation = Vec::with_capacity(prompt.len());
    for &phone in prompt {
        let row = phone - FIRST_PHONE;
        if rng.bernoulli(config.deletion[row]) {
            annotation.push(PositionLabel::Deleted);
            continue;
        }
        let spoken = rng.categorical(config.confusion.row(row)) + FIRST_PHONE;
        annotation.push(if spoken == phone {
            PositionLabel::Correct
        } else {
            PositionLabel::Substituted(spoken)
        });
    }
    let realized = apply_annotation(prompt, &annotation)?;

    let d = config.feature_dim;
    let mut durations = Vec::with_capacity(realized.len());
    let mut data = Vec::new();
    for &phone in &realized {
        let row = phone - FIRST_PHONE;
        let frames = config.draw_duration(row, rng);
        durations.push(frames);
        for _ in 0..frames {
            for k in 0..d {
                let sd = config.variances.get(row, k).sqrt();
                let x = config.means.get(row, k) + sd * rng.normal() + config.noise_scale * rng.normal();
                data.push(x);
            }
        }
    }
    let t = durations.iter().sum();
    Ok(Utterance {
        id: id.to_string(),
        features: Mat::from_raw(t, d, data),
        prompt: prompt.to_vec(),
        realized,
        annotation,
        durations,
    })
}

/// How mispronunciations are injected across a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorProfile {
    /// Per-position error probability in error-injected (L2-role) utterances.
    pub error_rate: f64,
    /// Fraction of errors that are deletions.
    pub deletion_share: f64,
    /// Fraction of utterances generated error-free (L1 role).
    pub l1_fraction: f64,
}

impl Default for ErrorProfile {
    fn default() -> Self {
        ErrorProfile {
            error_rate: 0.15,
            deletion_share: 0.3,
            l1_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 500,
            dev: 100,
            test: 200,
        }
    }
}

/// Mean realized frames per phone, with a global-mean fallback for unseen phones.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationStats {
    pub per_phone: BTreeMap<Symbol, f64>,
    pub global_mean: f64,
}

impl DurationStats {
    pub fn mean_frames(&self, phone: Symbol) -> f64 {
        self.per_phone.get(&phone).copied().unwrap_or(self.global_mean)
    }
}

pub fn duration_stats(train: &[Utterance]) -> Result<DurationStats> {
    if train.is_empty() {
        return Err(Error::EmptyInput("training split"));
    }
    let mut acc: BTreeMap<Symbol, (usize, usize)> = BTreeMap::new();
    let (mut total, mut count) = (0usize, 0usize);
    for u in train {
        for (&p, &d) in u.realized.iter().zip(&u.durations) {
            let e = acc.entry(p).or_default();
            e.0 += d;
            e.1 += 1;
            total += d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("training split has no realized phones"));
    }
    Ok(DurationStats {
        per_phone: acc
            .into_iter()
            .map(|(p, (sum, n))| (p, sum as f64 / n as f64))
            .collect(),
        global_mean: total as f64 / count as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub duration_stats: DurationStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SplitStats {
    pub utterances: usize,
    pub frames: usize,
    pub phones: usize,
    pub errors: usize,
}

pub fn split_stats(utts: &[Utterance]) -> SplitStats {
    utts.iter().fold(SplitStats::default(), |acc, u| SplitStats {
        utterances: acc.utterances + 1,
        frames: acc.frames + u.num_frames(),
        phones: acc.phones + u.prompt.len(),
        errors: acc.errors + u.num_errors(),
    })
}

fn draw_prompt(inv: &PhoneInventory, len: usize, rng: &mut Rng) -> Vec<Symbol> {
    let n = inv.num_phones();
    let mut prompt: Vec<Symbol> = Vec::with_capacity(len);
    while prompt.len() < len {
        let p = rng.below(n) + FIRST_PHONE;
        // prompts never repeat a phone back to back
        if n == 1 || prompt.last() != Some(&p) {
            prompt.push(p);
        }
    }
    prompt
}

/// Deterministic train/dev/test corpus. Each utterance draws from its own seeded stream,
/// so generation parallelizes without changing the output.
pub fn build_splits(
    config: &SynthConfig,
    sizes: SplitSizes,
    prompt_len: (usize, usize),
    profile: ErrorProfile,
) -> Result<CorpusSplit> {
    config.validate()?;
    if sizes.train == 0 || sizes.dev == 0 || sizes.test == 0 {
        return Err(Error::invalid("split sizes must be positive"));
    }
    let (min_len, max_len) = prompt_len;
    if min_len == 0 || max_len < min_len {
        return Err(Error::invalid("invalid prompt length range"));
    }
    if !(0.0..=1.0).contains(&profile.l1_fraction) {
        return Err(Error::invalid("l1 fraction must lie in [0, 1]"));
    }
    let clean = config.with_error_rate(0.0, 0.0)?;
    let noisy = config.with_error_rate(profile.error_rate, profile.deletion_share)?;

    let make = |tag: u64, name: &str, n: usize| -> Result<Vec<Utterance>> {
        let split_seed = derive_seed(config.seed, tag);
        let indices: Vec<usize> = (0..n).collect();
        par::map(&indices, |&i| {
            let id = format!("{name}-{i:05}");
            let base = derive_seed(split_seed, i as u64);
            for attempt in 0u64.. {
                let mut rng = Rng::new(derive_seed(base, attempt));
                let l1 = rng.bernoulli(profile.l1_fraction);
                let len = rng.int_inclusive(min_len as i64, max_len as i64) as usize;
                let prompt = draw_prompt(&config.inventory, len, &mut rng);
                let cfg = if l1 { &clean } else { &noisy };
                let utt = synthesize_utterance(cfg, &id, &prompt, &mut rng)?;
                // an utterance with every phone deleted has no audio
                if !utt.realized.is_empty() || attempt >= 1000 {
                    return Ok(utt);
                }
            }
            unreachable!()
        })
        .into_iter()
        .collect()
    };
    let train = make(1, "train", sizes.train)?;
    let dev = make(2, "dev", sizes.dev)?;
    let test = make(3, "test", sizes.test)?;
    let duration_stats = duration_stats(&train)?;
    Ok(CorpusSplit {
        train,
        dev,
        test,
        duration_stats,
    })
}
