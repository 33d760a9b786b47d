//! Experiment configuration and the file-based stages that connect the modules:
//! synth → train → decode → (calibrate) → detect → evaluate.
//!
//! Every stage reads and writes files under the configured directories:
//!
//! ```text
//! <output>/train_trace.tsv        epoch \t train_loss \t dev_loss
//! <output>/<split>.hyp            one hypothesis dump line per utterance
//! <output>/post/<split>/<id>.post CTC posteriorgram (binary, magic MDE2)
//! <output>/calibration.tsv        tau, polarity, dev_f1, dev_recall
//! <output>/roc.tsv                fpr \t tpr \t tau
//! <output>/<split>.verdicts       id \t position \t prompt_phone \t verdict \t cause \t score
//! <output>/metrics.tsv            label \t recall \t precision \t f1
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::io::{
    feature_path, load_corpus, manifest_path, read_inventory, read_manifest, read_matrix, write_corpus,
    write_matrix, write_text, ManifestEntry, FEATURE_MAGIC, POSTERIOR_MAGIC, SPLITS,
};
use crate::corpus::synth::{build_splits, split_stats, ErrorProfile, SplitSizes, SplitStats, SynthParams};
use crate::corpus::{DurationStats, PhoneInventory};
use crate::ctc::{prompt_position_posterior, Pooling, Posteriorgram};
use crate::error::{Error, Result, StageContext};
use crate::eval::{metrics, report_table, roc_points, format_roc, tally, Metrics, ReportTable};
use crate::hypothesis::Hypothesis;
use crate::joint::{format_hypothesis, joint_beam_search, parse_hypothesis, JointConfig};
use crate::md::{
    attention_position_posterior, calibrate_tau, confidence_d, decide_confidence, decide_sr, format_calibration,
    format_verdicts, parse_calibration, parse_verdicts, ConfidenceCalibration, PosteriorSource, UtteranceVerdicts,
};
use crate::model::{
    acoustic_forward, build_prompt_stream, encode_acoustic, encode_prompt, load_checkpoint, save_checkpoint, Augment,
    ModelConfig, ModelParams, PromptEncoding,
};
use crate::par;
use crate::trainer::{format_trace, train, TrainConfig, TrainOutcome};

/// How per-position verdicts are reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DecisionMode {
    /// Alignment of the recognized phones against the prompt, relaxed to the top `n` per step.
    Sr { n: usize },
    Confidence,
}

impl Default for DecisionMode {
    fn default() -> Self {
        DecisionMode::Sr { n: 1 }
    }
}

impl DecisionMode {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown decision mode {s:?} (sr, sr-nbest(N), confidence)"));
        match s.trim() {
            "sr" => Ok(DecisionMode::Sr { n: 1 }),
            "confidence" => Ok(DecisionMode::Confidence),
            other => {
                let n: usize = other
                    .strip_prefix("sr-nbest(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(bad)?
                    .trim()
                    .parse()
                    .map_err(|_| bad())?;
                if n == 0 {
                    return Err(Error::invalid("sr-nbest needs N >= 1"));
                }
                Ok(DecisionMode::Sr { n })
            }
        }
    }
}

impl fmt::Display for DecisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecisionMode::Sr { n: 1 } => f.write_str("sr"),
            DecisionMode::Sr { n } => write!(f, "sr-nbest({n})"),
            DecisionMode::Confidence => f.write_str("confidence"),
        }
    }
}

impl TryFrom<String> for DecisionMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        DecisionMode::parse(&s)
    }
}

impl From<DecisionMode> for String {
    fn from(m: DecisionMode) -> Self {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Corpus root holding the inventory, manifests and features.
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: "corpus".into(),
            checkpoint: "model.ckpt".into(),
            output: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub generator: SynthParams,
    pub sizes: SplitSizes,
    /// Inclusive prompt length range.
    pub prompt_len: (usize, usize),
    pub errors: ErrorProfile,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            generator: SynthParams::default(),
            sizes: SplitSizes::default(),
            prompt_len: (3, 8),
            errors: ErrorProfile::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfidenceSection {
    pub source: PosteriorSource,
    pub pooling: Pooling,
}

/// One row of a `run`. Unset fields inherit the top-level settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub label: String,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub augment: Option<Augment>,
    #[serde(default)]
    pub decision: Option<DecisionMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds corpus synthesis and training.
    pub seed: u64,
    pub augment: Augment,
    pub decision: DecisionMode,
    pub paths: Paths,
    pub synth: SynthSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: JointConfig,
    pub confidence: ConfidenceSection,
    pub variants: Vec<Variant>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 1,
            augment: Augment::None,
            decision: DecisionMode::default(),
            paths: Paths::default(),
            synth: SynthSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: JointConfig::default(),
            confidence: ConfidenceSection::default(),
            variants: Vec::new(),
        }
    }
}

/// Sets a dotted `key=value` inside `table`. The value is read as a TOML literal,
/// falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::invalid(format!("bad override key {key:?}")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::invalid(format!("override {key:?}: {p:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl PipelineConfig {
    /// Parses TOML text, applies overrides, and resolves relative paths against `base`.
    pub fn from_toml(text: &str, base: &Path, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::invalid(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: PipelineConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::invalid(e.to_string()))?;
        cfg.paths.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        PipelineConfig::from_toml(&text, base, overrides).map_err(|e| match e {
            Error::Invalid(msg) => Error::format(path, msg),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        let (lo, hi) = self.synth.prompt_len;
        if lo == 0 || hi < lo {
            return Err(Error::invalid("synth.prompt_len must be [min, max] with 1 <= min <= max"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.variants {
            let label_ok = !v.label.is_empty()
                && v.label != "."
                && v.label != ".."
                && v.label != "models"
                && !v.label.contains(['/', '\\', '\t', '\n']);
            if !label_ok {
                return Err(Error::invalid(format!("variant label {:?} is not usable as a directory name", v.label)));
            }
            if !seen.insert(v.label.as_str()) {
                return Err(Error::invalid(format!("duplicate variant label {:?}", v.label)));
            }
            if let Some(l) = v.lambda {
                if !(0.0..=1.0).contains(&l) {
                    return Err(Error::invalid(format!("variant {:?}: lambda {l} outside [0, 1]", v.label)));
                }
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    /// Label used for a single-configuration evaluation.
    pub fn label(&self) -> String {
        format!("{}-{}", self.augment.name(), self.decision)
    }

    fn variants(&self) -> Vec<Variant> {
        if self.variants.is_empty() {
            vec![Variant {
                label: self.label(),
                lambda: None,
                augment: None,
                decision: None,
            }]
        } else {
            self.variants.clone()
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.corpus, &mut self.checkpoint, &mut self.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

fn check_split(split: &str) -> Result<()> {
    if SPLITS.contains(&split) {
        Ok(())
    } else {
        Err(Error::invalid(format!("unknown split {split:?} (train, dev, test)")))
    }
}

fn hyp_path(out: &Path, split: &str) -> PathBuf {
    out.join(format!("{split}.hyp"))
}

fn verdict_path(out: &Path, split: &str) -> PathBuf {
    out.join(format!("{split}.verdicts"))
}

fn posterior_path(out: &Path, split: &str, id: &str) -> PathBuf {
    out.join("post").join(split).join(format!("{id}.post"))
}

fn calibration_path(out: &Path) -> PathBuf {
    out.join("calibration.tsv")
}

/// Per-split sizes as printed by `synth`.
pub fn format_split_stats(rows: &[(String, SplitStats)]) -> String {
    let mut out = format!(
        "{:<8}{:>12}{:>10}{:>12}{:>10}{:>10}\n",
        "split", "utterances", "frames", "phones", "errors", "rate"
    );
    for (name, s) in rows {
        let rate = if s.phones == 0 { 0.0 } else { s.errors as f64 / s.phones as f64 };
        out.push_str(&format!(
            "{:<8}{:>12}{:>10}{:>12}{:>10}{:>10.3}\n",
            name, s.utterances, s.frames, s.phones, s.errors, rate
        ));
    }
    out
}

/// Generates the synthetic corpus under `paths.corpus`.
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<Vec<(String, SplitStats)>> {
    let s = &cfg.synth;
    let run = || {
        let synth = s.generator.build(cfg.seed)?;
        let corpus = build_splits(&synth, s.sizes, s.prompt_len, s.errors)?;
        write_corpus(&cfg.paths.corpus, &synth.inventory, &corpus)?;
        Ok(SPLITS
            .iter()
            .zip([&corpus.train, &corpus.dev, &corpus.test])
            .map(|(name, utts)| (name.to_string(), split_stats(utts)))
            .collect())
    };
    run().stage("synth")
}

fn train_model(cfg: &PipelineConfig, augment: Augment, checkpoint: &Path, trace: &Path) -> Result<TrainOutcome> {
    let loaded = load_corpus(&cfg.paths.corpus)?;
    let mut outcome = train(&loaded.corpus, &loaded.inventory, &cfg.train_config(), &cfg.model, augment)?;
    outcome.params.lambda_decode = cfg.decode.lambda;
    save_checkpoint(&outcome.params, checkpoint)?;
    write_text(trace, &format_trace(&outcome.trace))?;
    Ok(outcome)
}

/// Trains on the corpus and writes the checkpoint and the loss trace.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<TrainOutcome> {
    train_model(cfg, cfg.augment, &cfg.paths.checkpoint, &cfg.paths.output.join("train_trace.tsv")).stage("train")
}

fn load_model(cfg: &PipelineConfig, inv: &PhoneInventory) -> Result<ModelParams> {
    let params = load_checkpoint(&cfg.paths.checkpoint, inv)?;
    params.require_augment(cfg.augment)?;
    Ok(params)
}

fn prompt_encoding(
    params: &ModelParams,
    prompt: &[usize],
    stats: &DurationStats,
) -> Result<Option<PromptEncoding>> {
    if !params.is_augmented() {
        return Ok(None);
    }
    let stream = build_prompt_stream(prompt, params.augment, Some(stats), params.frames_per_token)?;
    encode_prompt(params, &stream).map(Some)
}

/// Decodes one split with the joint beam search; writes hypotheses and CTC posteriorgrams.
pub fn cmd_decode(cfg: &PipelineConfig, split: &str) -> Result<Vec<(String, Hypothesis)>> {
    let run = || {
        check_split(split)?;
        let loaded = load_corpus(&cfg.paths.corpus)?;
        let inv = &loaded.inventory;
        let params = load_model(cfg, inv)?;
        let utts = match split {
            "train" => &loaded.corpus.train,
            "dev" => &loaded.corpus.dev,
            _ => &loaded.corpus.test,
        };
        let stats = &loaded.corpus.duration_stats;
        let out = &cfg.paths.output;
        let decoded = par::map(utts, |u| -> Result<(String, Hypothesis)> {
            let (memory, post) = acoustic_forward(&params, &u.features)?;
            let prompt = prompt_encoding(&params, &u.prompt, stats)?;
            let hyp = joint_beam_search(&params, &post, &memory, prompt.as_ref(), &cfg.decode)?;
            write_matrix(&posterior_path(out, split, &u.id), POSTERIOR_MAGIC, post.probs())?;
            Ok((u.id.clone(), hyp))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let text: String = decoded
            .iter()
            .map(|(id, h)| format_hypothesis(inv, id, h) + "\n")
            .collect();
        write_text(&hyp_path(out, split), &text)?;
        Ok(decoded)
    };
    run().stage("decode")
}

fn read_hypotheses(path: &Path, inv: &PhoneInventory) -> Result<BTreeMap<String, Hypothesis>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (id, hyp) = parse_hypothesis(inv, line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        if out.insert(id.clone(), hyp).is_some() {
            return Err(Error::format(path, format!("duplicate hypothesis for {id}")));
        }
    }
    Ok(out)
}

fn corpus_inventory(cfg: &PipelineConfig) -> Result<PhoneInventory> {
    read_inventory(&cfg.paths.corpus.join("inventory.txt"))
}

fn read_split_manifest(cfg: &PipelineConfig, split: &str, inv: &PhoneInventory) -> Result<Vec<ManifestEntry>> {
    check_split(split)?;
    let path = manifest_path(&cfg.paths.corpus, split);
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_manifest(&path, inv)
}

/// `P(z_i | X)` per prompt position of every manifest entry.
fn position_posteriors(
    cfg: &PipelineConfig,
    split: &str,
    entries: &[ManifestEntry],
    inv: &PhoneInventory,
) -> Result<Vec<Vec<f64>>> {
    let out = &cfg.paths.output;
    match cfg.confidence.source {
        PosteriorSource::Ctc => par::map(entries, |e| {
            let post = Posteriorgram::new(read_matrix(&posterior_path(out, split, &e.id), POSTERIOR_MAGIC)?)?;
            Ok(prompt_position_posterior(&post, &e.prompt, cfg.confidence.pooling)?.values)
        })
        .into_iter()
        .collect(),
        PosteriorSource::Attention => {
            let params = load_model(cfg, inv)?;
            let stats = load_corpus(&cfg.paths.corpus)?.corpus.duration_stats;
            par::map(entries, |e| {
                let features = read_matrix(&feature_path(&cfg.paths.corpus, &e.id), FEATURE_MAGIC)?;
                let memory = encode_acoustic(&params, &features)?;
                let prompt = prompt_encoding(&params, &e.prompt, &stats)?;
                attention_position_posterior(&params, &memory, prompt.as_ref(), &e.prompt)
            })
            .into_iter()
            .collect()
        }
    }
}

/// Sweeps the confidence threshold on dev; writes the calibration and the ROC curve.
pub fn cmd_calibrate(cfg: &PipelineConfig) -> Result<ConfidenceCalibration> {
    let run = || {
        let inv = corpus_inventory(cfg)?;
        let entries = read_split_manifest(cfg, "dev", &inv)?;
        if entries.is_empty() {
            return Err(Error::invalid("confidence calibration needs a non-empty dev split"));
        }
        let posteriors = position_posteriors(cfg, "dev", &entries, &inv)?;
        let mut scores = Vec::new();
        for (e, ps) in entries.iter().zip(&posteriors) {
            for (&p, label) in ps.iter().zip(&e.annotation) {
                scores.push((confidence_d(p)?, label.is_error()));
            }
        }
        let cal = calibrate_tau(&scores)?;
        let out = &cfg.paths.output;
        write_text(&calibration_path(out), &format_calibration(&cal))?;
        write_text(&out.join("roc.tsv"), &format_roc(&roc_points(&scores, cal.polarity)?))?;
        Ok(cal)
    };
    run().stage("calibrate")
}

/// Per-position verdicts for one split.
pub fn cmd_detect(cfg: &PipelineConfig, split: &str) -> Result<Vec<UtteranceVerdicts>> {
    let run = || {
        let inv = corpus_inventory(cfg)?;
        let entries = read_split_manifest(cfg, split, &inv)?;
        let out = &cfg.paths.output;
        let verdicts: Vec<Vec<_>> = match cfg.decision {
            DecisionMode::Sr { n } => {
                let hyps = read_hypotheses(&hyp_path(out, split), &inv)?;
                let missing: Vec<&str> = entries
                    .iter()
                    .filter(|e| !hyps.contains_key(&e.id))
                    .map(|e| e.id.as_str())
                    .take(10)
                    .collect();
                if !missing.is_empty() {
                    return Err(Error::MissingKeys(format!("no hypothesis for {}", missing.join(", "))));
                }
                entries
                    .iter()
                    .map(|e| decide_sr(&e.prompt, &hyps[&e.id], n))
                    .collect::<Result<_>>()?
            }
            DecisionMode::Confidence => {
                let path = calibration_path(out);
                let cal = parse_calibration(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
                position_posteriors(cfg, split, &entries, &inv)?
                    .iter()
                    .map(|ps| decide_confidence(ps, &cal))
                    .collect::<Result<_>>()?
            }
        };
        let utts: Vec<UtteranceVerdicts> = entries
            .into_iter()
            .zip(verdicts)
            .map(|(e, verdicts)| UtteranceVerdicts {
                id: e.id,
                prompt: e.prompt,
                verdicts,
            })
            .collect();
        write_text(&verdict_path(out, split), &format_verdicts(&inv, &utts))?;
        Ok(utts)
    };
    run().stage("detect")
}

/// Scores a verdict file against the split's annotations and writes `metrics.tsv`.
pub fn cmd_evaluate(cfg: &PipelineConfig, split: &str, label: &str) -> Result<(Metrics, ReportTable)> {
    let run = || {
        let inv = corpus_inventory(cfg)?;
        let entries = read_split_manifest(cfg, split, &inv)?;
        let path = verdict_path(&cfg.paths.output, split);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let verdicts = parse_verdicts(&inv, &text).map_err(|e| Error::format(&path, e.to_string()))?;
        let annotations: BTreeMap<String, _> = entries.into_iter().map(|e| (e.id, e.annotation)).collect();
        let m = metrics(tally(&verdicts, &annotations)?);
        let table = report_table(&[(label.to_string(), m)])?;
        write_text(&cfg.paths.output.join("metrics.tsv"), &table.tsv)?;
        Ok((m, table))
    };
    run().stage("evaluate")
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub rows: Vec<(String, Metrics)>,
    pub table: ReportTable,
}

/// Trains one model per augmentation mode in use, then decodes, detects and scores
/// `test` for every variant. Variant artifacts go to `<output>/<label>/`, models to
/// `<output>/models/`, and the combined table to `<output>/metrics.tsv`.
pub fn cmd_run(cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    let out = &cfg.paths.output;
    let models = out.join("models");
    let mut trained: BTreeMap<&'static str, PathBuf> = BTreeMap::new();
    let mut rows = Vec::new();

    for v in cfg.variants() {
        let augment = v.augment.unwrap_or(cfg.augment);
        let checkpoint = match trained.get(augment.name()) {
            Some(p) => p.clone(),
            None => {
                let ckpt = models.join(format!("{}.ckpt", augment.name()));
                let trace = models.join(format!("{}.trace.tsv", augment.name()));
                train_model(cfg, augment, &ckpt, &trace).stage("train")?;
                trained.insert(augment.name(), ckpt.clone());
                ckpt
            }
        };
        let vcfg = PipelineConfig {
            augment,
            decision: v.decision.unwrap_or(cfg.decision),
            paths: Paths {
                corpus: cfg.paths.corpus.clone(),
                checkpoint,
                output: out.join(&v.label),
            },
            decode: JointConfig {
                lambda: v.lambda.unwrap_or(cfg.decode.lambda),
                ..cfg.decode
            },
            variants: Vec::new(),
            ..cfg.clone()
        };
        cmd_decode(&vcfg, "test")?;
        if vcfg.decision == DecisionMode::Confidence {
            cmd_decode(&vcfg, "dev")?;
            cmd_calibrate(&vcfg)?;
        }
        cmd_detect(&vcfg, "test")?;
        let (m, _) = cmd_evaluate(&vcfg, "test", &v.label)?;
        rows.push((v.label.clone(), m));
    }
    let table = report_table(&rows).stage("evaluate")?;
    write_text(&out.join("metrics.tsv"), &table.tsv).stage("evaluate")?;
    Ok(RunReport { rows, table })
}
