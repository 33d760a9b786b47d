use super::params::Augment;
use crate::corpus::{DurationStats, Symbol};
use crate::error::{Error, Result};

/// Token stream fed to the prompt encoder.
///
/// `Ps` passes the prompt through; `Rps` repeats each phone
/// `round(mean_frames / frames_per_token)` times, at least once.
pub fn build_prompt_stream(
    prompt: &[Symbol],
    mode: Augment,
    stats: Option<&DurationStats>,
    frames_per_token: f64,
) -> Result<Vec<Symbol>> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput("prompt"));
    }
    match mode {
        Augment::None => Err(Error::invalid("no prompt stream without augmentation")),
        Augment::Ps => Ok(prompt.to_vec()),
        Augment::Rps => {
            let stats = stats.ok_or_else(|| Error::invalid("RPS needs duration statistics"))?;
            if !(frames_per_token > 0.0 && frames_per_token.is_finite()) {
                return Err(Error::invalid("frames_per_token must be positive"));
            }
            let mut out = Vec::new();
            for &p in prompt {
                let reps = (stats.mean_frames(p) / frames_per_token).round().max(1.0) as usize;
                out.extend(std::iter::repeat_n(p, reps));
            }
            Ok(out)
        }
    }
}
