//! Synthetic prompted-speech corpus: phone inventory, generator and file formats.

pub mod inventory;
pub mod io;
pub mod synth;

pub use inventory::{PhoneInventory, Symbol, BLANK, EOS, FIRST_PHONE, SOS};
pub use synth::{
    apply_annotation, build_splits, duration_stats, split_stats, synthesize_utterance, CorpusSplit,
    DurationStats, ErrorProfile, PositionLabel, SplitSizes, SplitStats, SynthConfig, SynthParams,
    Utterance,
};
