//! Interface conformance checks any backend must pass before the decoder can
//! rely on it: determinism, fixed embedding dimension, probability bounds and
//! `top_k` ordering.

use thiserror::Error;

use super::{BackendError, Encoder, LanguageModel, TokenId};
use crate::imaging::Image;

#[derive(Debug, Error)]
pub enum ConformanceError {
    #[error("{check}: {detail}")]
    Violation { check: &'static str, detail: String },
    #[error("backend call failed during `{check}`: {source}")]
    Backend {
        check: &'static str,
        #[source]
        source: BackendError,
    },
}

/// Inputs the suite probes the backend with.
#[derive(Debug, Clone)]
pub struct Probes {
    pub texts: Vec<String>,
    /// Text the language model's tokenizer must accept.
    pub prompt: String,
    pub images: Vec<Image>,
    pub k_values: Vec<usize>,
}

impl Default for Probes {
    fn default() -> Self {
        let mut gradient = Image::filled(7, 5, [0, 0, 0]).expect("non-empty");
        for y in 0..5 {
            for x in 0..7 {
                gradient.set(x, y, [(x * 30) as u8, (y * 50) as u8, 128]);
            }
        }
        Self {
            texts: vec!["a photo of".into(), "a red ball".into(), String::new()],
            prompt: "a photo of".into(),
            images: vec![Image::filled(4, 4, [200, 30, 30]).expect("non-empty"), gradient],
            k_values: vec![1, 5, 64],
        }
    }
}

fn violation(check: &'static str, detail: impl Into<String>) -> ConformanceError {
    ConformanceError::Violation {
        check,
        detail: detail.into(),
    }
}

fn call<T>(check: &'static str, r: Result<T, BackendError>) -> Result<T, ConformanceError> {
    r.map_err(|source| ConformanceError::Backend { check, source })
}

pub fn check_encoder(encoder: &dyn Encoder, probes: &Probes) -> Result<(), ConformanceError> {
    let dim = encoder.dim();
    if dim == 0 {
        return Err(violation("encoder dim", "dimension is zero"));
    }
    for text in &probes.texts {
        let a = call("encode_text", encoder.encode_text(text))?;
        let b = call("encode_text", encoder.encode_text(text))?;
        if a.dim() != dim {
            return Err(violation("encode_text dim", format!("{text:?} gave {} ≠ {dim}", a.dim())));
        }
        if a != b {
            return Err(violation("encode_text determinism", format!("{text:?}")));
        }
    }
    for image in &probes.images {
        let a = call("encode_image", encoder.encode_image(image))?;
        let b = call("encode_image", encoder.encode_image(image))?;
        if a.dim() != dim {
            return Err(violation("encode_image dim", format!("{} ≠ {dim}", a.dim())));
        }
        if a != b {
            return Err(violation("encode_image determinism", format!("{image:?}")));
        }
    }
    Ok(())
}

pub fn check_language_model(lm: &dyn LanguageModel, probes: &Probes) -> Result<(), ConformanceError> {
    let vocab = lm.vocab_size();
    if vocab == 0 {
        return Err(violation("vocab_size", "vocabulary is empty"));
    }
    let prompt = call("tokenize", lm.tokenize(&probes.prompt))?;
    if prompt != call("tokenize", lm.tokenize(&probes.prompt))? {
        return Err(violation("tokenize determinism", probes.prompt.clone()));
    }
    let text = call("detokenize", lm.detokenize(&prompt))?;
    if text != call("detokenize", lm.detokenize(&prompt))? {
        return Err(violation("detokenize determinism", text));
    }

    let contexts: Vec<Vec<TokenId>> = vec![Vec::new(), vec![lm.eot_token()], prompt];
    for context in &contexts {
        let mut hidden_dim = None;
        for &k in &probes.k_values {
            let cands = call("top_k", lm.top_k(context, k))?;
            if cands != call("top_k", lm.top_k(context, k))? {
                return Err(violation("top_k determinism", format!("context {context:?}, k {k}")));
            }
            let expected = k.min(vocab);
            if cands.len() != expected {
                return Err(violation(
                    "top_k length",
                    format!("k {k} gave {} candidates, expected {expected}", cands.len()),
                ));
            }
            for c in &cands {
                if !(c.p_model > 0.0 && c.p_model <= 1.0) {
                    return Err(violation("top_k probability", format!("token {} has p {}", c.token, c.p_model)));
                }
                if c.token as usize >= vocab {
                    return Err(violation("top_k token", format!("token {} ≥ vocab {vocab}", c.token)));
                }
                match hidden_dim {
                    None => hidden_dim = Some(c.hidden.dim()),
                    Some(d) if d != c.hidden.dim() => {
                        return Err(violation("top_k hidden dim", format!("{} vs {d}", c.hidden.dim())))
                    }
                    _ => {}
                }
            }
            for pair in cands.windows(2) {
                let (a, b) = (&pair[0], &pair[1]);
                let ordered = a.p_model > b.p_model || (a.p_model == b.p_model && a.token < b.token);
                if !ordered {
                    return Err(violation(
                        "top_k order",
                        format!("({}, {}) before ({}, {})", a.token, a.p_model, b.token, b.p_model),
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Runs both halves of the suite.
pub fn check_backend(
    lm: &dyn LanguageModel,
    encoder: &dyn Encoder,
    probes: &Probes,
) -> Result<(), ConformanceError> {
    check_encoder(encoder, probes)?;
    check_language_model(lm, probes)
}
