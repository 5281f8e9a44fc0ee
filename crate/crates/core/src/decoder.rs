//! Greedy caption generation and caption log-likelihood.

use crate::error::{Error, Result};
use crate::model::{caption_logprobs_from_state, image_state, step, ModelParams};
use crate::vocab::Vocabulary;

pub const DEFAULT_MAX_LEN: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeConfig {
    /// Maximum number of generated words, excluding `<start>`/`<stop>`.
    pub max_len: usize,
    /// Never emit `<unk>`.
    pub forbid_unk: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_len: DEFAULT_MAX_LEN,
            forbid_unk: true,
        }
    }
}

/// Index of the largest value; ties go to the lowest index. `skip` is
/// excluded from consideration.
pub fn argmax(values: &[f64], skip: Option<usize>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Greedy decoding as word indices (sentinels stripped).
pub fn generate_ids(params: &ModelParams, feature: &[f64], cfg: DecodeConfig) -> Result<Vec<usize>> {
    if cfg.max_len == 0 {
        return Err(Error::Param("max_len must be at least 1".into()));
    }
    let skip = cfg.forbid_unk.then_some(Vocabulary::UNK_ID);
    let mut state = image_state(params, feature)?;
    let mut word = Vocabulary::START_ID;
    let mut out = Vec::new();
    while out.len() < cfg.max_len {
        let (next, logits) = step(params, &state, word)?;
        // softmax is monotone, so the argmax of the logits is the argmax of p
        word = argmax(&logits, skip).ok_or_else(|| Error::Param("no candidate words".into()))?;
        if word == Vocabulary::STOP_ID {
            break;
        }
        out.push(word);
        state = next;
    }
    Ok(out)
}

pub fn generate(params: &ModelParams, vocab: &Vocabulary, feature: &[f64], cfg: DecodeConfig) -> Result<Vec<String>> {
    if vocab.len() != params.dims().vocab_size {
        return Err(Error::Config(format!(
            "vocabulary of {} tokens does not match model output size {}",
            vocab.len(),
            params.dims().vocab_size
        )));
    }
    Ok(generate_ids(params, feature, cfg)?
        .into_iter()
        .map(|i| vocab.token(i).expect("index within vocabulary").to_owned())
        .collect())
}

/// `Σ_t ln p_t[w_t]` over every word after `<start>`, including `<stop>`.
pub fn sequence_logprob(params: &ModelParams, feature: &[f64], caption: &[usize]) -> Result<f64> {
    let state = image_state(params, feature)?;
    Ok(caption_logprobs_from_state(params, &state, caption)?.iter().sum())
}
