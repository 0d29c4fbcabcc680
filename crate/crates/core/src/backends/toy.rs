//! A synthetic world in which every score has a closed form.
//!
//! Text embeds as the L2-normalized indicator of the attribute words it
//! contains (filler words contribute nothing; text without attribute words
//! maps to a reserved extra axis). A region embeds as the normalized indicator
//! of its attribute set, so text/region cosine is
//! `|shared| / sqrt(|text attrs| · |region attrs|)`.
//!
//! Regions are grounded in pixels: [`ToyWorld::render`] paints each region as
//! a solid rectangle whose color encodes its attribute set, and
//! [`ToyEncoder::encode_image`] decodes the dominant valid color back. The
//! crop, blur and mirror views of a rendered region therefore all embed to
//! the region's own attribute indicator.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{BackendError, Candidate, Encoder, LanguageModel, TokenId};
use crate::embedding::Embedding;
use crate::imaging::Image;
use crate::scene::BBox;

/// Attribute masks are carried in the red and green channels.
pub const MAX_ATTRIBUTES: usize = 16;

pub const EOT_TEXT: &str = "<|endoftext|>";

const CELL: u32 = 16;
const GAP: u32 = 16;
const MARGIN: u32 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ToyWorldSpec", into = "ToyWorldSpec")]
pub struct ToyWorld {
    attributes: Vec<String>,
    fillers: Vec<String>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct ToyWorldSpec {
    attributes: Vec<String>,
    fillers: Vec<String>,
}

impl TryFrom<ToyWorldSpec> for ToyWorld {
    type Error = BackendError;

    fn try_from(spec: ToyWorldSpec) -> Result<Self, Self::Error> {
        ToyWorld::new(spec.attributes, spec.fillers)
    }
}

impl From<ToyWorld> for ToyWorldSpec {
    fn from(w: ToyWorld) -> Self {
        Self {
            attributes: w.attributes,
            fillers: w.fillers,
        }
    }
}

impl Default for ToyWorld {
    fn default() -> Self {
        let attributes = [
            "red", "blue", "green", "yellow", "ball", "cube", "cone", "small", "large", "metal",
            "rubber", "wooden",
        ];
        let fillers = ["a", "photo", "of", "the", "."];
        ToyWorld::new(attributes, fillers).expect("default toy world is valid")
    }
}

impl ToyWorld {
    /// Token ids follow vocabulary order: attributes, then fillers, then the
    /// end-of-text token.
    pub fn new<A, F, S1, S2>(attributes: A, fillers: F) -> Result<Self, BackendError>
    where
        A: IntoIterator<Item = S1>,
        F: IntoIterator<Item = S2>,
        S1: Into<String>,
        S2: Into<String>,
    {
        let attributes: Vec<String> = attributes.into_iter().map(Into::into).collect();
        let fillers: Vec<String> = fillers.into_iter().map(Into::into).collect();
        if attributes.is_empty() || attributes.len() > MAX_ATTRIBUTES {
            return Err(BackendError::Config(format!(
                "toy world needs 1..={MAX_ATTRIBUTES} attributes, got {}",
                attributes.len()
            )));
        }
        let mut index = HashMap::new();
        for (i, word) in attributes.iter().chain(&fillers).enumerate() {
            if word.is_empty() || word.chars().any(char::is_whitespace) || *word != word.to_lowercase() {
                return Err(BackendError::Config(format!(
                    "vocabulary word `{word}` must be a non-empty lowercase word"
                )));
            }
            if word.len() > 1 && word.ends_with('.') {
                return Err(BackendError::Config(format!("vocabulary word `{word}` ends with a period")));
            }
            if index.insert(word.clone(), i as TokenId).is_some() {
                return Err(BackendError::Config(format!("duplicate vocabulary word `{word}`")));
            }
        }
        Ok(Self {
            attributes,
            fillers,
            index,
        })
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn fillers(&self) -> &[String] {
        &self.fillers
    }

    /// Attribute and filler words, plus the end-of-text token.
    pub fn vocab_size(&self) -> usize {
        self.attributes.len() + self.fillers.len() + 1
    }

    pub fn eot_token(&self) -> TokenId {
        (self.attributes.len() + self.fillers.len()) as TokenId
    }

    /// Embedding dimension: one axis per attribute plus the reserved axis.
    pub fn dim(&self) -> usize {
        self.attributes.len() + 1
    }

    pub fn token_id(&self, word: &str) -> Option<TokenId> {
        if word == EOT_TEXT {
            return Some(self.eot_token());
        }
        self.index.get(word).copied()
    }

    pub fn word(&self, token: TokenId) -> Option<&str> {
        let i = token as usize;
        if i < self.attributes.len() {
            Some(&self.attributes[i])
        } else if i < self.attributes.len() + self.fillers.len() {
            Some(&self.fillers[i - self.attributes.len()])
        } else if token == self.eot_token() {
            Some(EOT_TEXT)
        } else {
            None
        }
    }

    pub fn attribute_index(&self, word: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a == word)
    }

    /// Lowercases, splits on whitespace and splits trailing periods into
    /// their own token. Unknown words are an error.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        let mut tokens = Vec::new();
        for piece in text.split_whitespace() {
            if piece == EOT_TEXT {
                tokens.push(self.eot_token());
                continue;
            }
            let lower = piece.to_lowercase();
            let stem = lower.trim_end_matches('.');
            let periods = lower.len() - stem.len();
            if !stem.is_empty() {
                tokens.push(
                    self.token_id(stem)
                        .ok_or_else(|| BackendError::UnknownWord(stem.to_string()))?,
                );
            }
            for _ in 0..periods {
                tokens.push(
                    self.token_id(".")
                        .ok_or_else(|| BackendError::UnknownWord(".".into()))?,
                );
            }
        }
        Ok(tokens)
    }

    /// Space-joined words; periods attach to the preceding word and the
    /// end-of-text token renders as nothing.
    pub fn detokenize(&self, tokens: &[TokenId]) -> Result<String, BackendError> {
        let mut out = String::new();
        for &t in tokens {
            if t == self.eot_token() {
                continue;
            }
            let word = self.word(t).ok_or(BackendError::UnknownToken(t))?;
            if !out.is_empty() && word != "." {
                out.push(' ');
            }
            out.push_str(word);
        }
        Ok(out)
    }

    /// Indices of the attribute words occurring in `text`.
    pub fn text_attributes(&self, text: &str) -> BTreeSet<usize> {
        text.split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter_map(|w| self.attribute_index(&w))
            .collect()
    }

    pub fn attribute_indices<I>(&self, words: I) -> Result<BTreeSet<usize>, BackendError>
    where
        I: IntoIterator,
        I::Item: AsRef<str>,
    {
        words
            .into_iter()
            .map(|w| {
                let w = w.as_ref();
                self.attribute_index(w)
                    .ok_or_else(|| BackendError::UnknownWord(w.to_string()))
            })
            .collect()
    }

    /// Normalized indicator over `attrs`, or the reserved axis when empty.
    pub fn embed_attribute_set(&self, attrs: &BTreeSet<usize>) -> Embedding {
        let dim = self.dim();
        if attrs.is_empty() {
            return Embedding::one_hot(dim, dim - 1);
        }
        let weight = 1.0 / (attrs.len() as f64).sqrt();
        let mut v = vec![0.0; dim];
        for &a in attrs {
            v[a] = weight;
        }
        Embedding::new(v).expect("finite by construction")
    }

    pub fn embed_text(&self, text: &str) -> Embedding {
        self.embed_attribute_set(&self.text_attributes(text))
    }

    /// The rendering color for an attribute set: mask in red/green, a check
    /// byte in blue so blended colors almost never decode.
    pub fn attribute_color(&self, attrs: &BTreeSet<usize>) -> [u8; 3] {
        let mask: u16 = attrs.iter().fold(0, |m, &a| m | (1 << a));
        if mask == 0 {
            return [0, 0, 0];
        }
        [(mask >> 8) as u8, mask as u8, check_byte(mask)]
    }

    /// Inverse of [`attribute_color`](Self::attribute_color) for valid colors.
    pub fn decode_color(&self, rgb: [u8; 3]) -> Option<BTreeSet<usize>> {
        let mask = ((rgb[0] as u16) << 8) | rgb[1] as u16;
        if mask == 0 || rgb[2] != check_byte(mask) || (mask as u32) >> self.attributes.len() != 0 {
            return None;
        }
        Some((0..self.attributes.len()).filter(|a| mask & (1 << a) != 0).collect())
    }

    /// Paints one region per attribute set in a row on a black canvas, in
    /// order, and returns the image with each region's box.
    pub fn render(&self, regions: &[BTreeSet<String>]) -> Result<(Image, Vec<BBox>), BackendError> {
        if regions.is_empty() {
            return Err(BackendError::Config("toy scene needs at least one region".into()));
        }
        let n = regions.len() as u32;
        let width = 2 * MARGIN + n * CELL + (n - 1) * GAP;
        let height = 2 * MARGIN + CELL;
        let mut image = Image::filled(width, height, [0, 0, 0]).expect("non-empty canvas");
        let mut boxes = Vec::with_capacity(regions.len());
        for (i, words) in regions.iter().enumerate() {
            let attrs = self.attribute_indices(words)?;
            let bbox = BBox::new(MARGIN + i as u32 * (CELL + GAP), MARGIN, CELL, CELL)
                .expect("positive cell size");
            image
                .fill_rect(bbox, self.attribute_color(&attrs))
                .expect("cell inside canvas");
            boxes.push(bbox);
        }
        Ok((image, boxes))
    }
}

fn check_byte(mask: u16) -> u8 {
    ((mask as u32).wrapping_mul(2_654_435_761) >> 24) as u8 | 1
}

/// Toy text/image encoder.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    world: Arc<ToyWorld>,
}

impl ToyEncoder {
    pub fn new(world: Arc<ToyWorld>) -> Self {
        Self { world }
    }
}

impl Encoder for ToyEncoder {
    fn dim(&self) -> usize {
        self.world.dim()
    }

    fn encode_text(&self, text: &str) -> Result<Embedding, BackendError> {
        Ok(self.world.embed_text(text))
    }

    /// Embeds the attribute set of the most frequent validly coded color,
    /// provided it covers at least 1% of the image; otherwise the reserved
    /// axis. Count ties go to the smaller color value.
    fn encode_image(&self, image: &Image) -> Result<Embedding, BackendError> {
        let mut counts: HashMap<[u8; 3], usize> = HashMap::new();
        for px in image.pixels().chunks_exact(3) {
            let rgb = [px[0], px[1], px[2]];
            if rgb != [0, 0, 0] {
                *counts.entry(rgb).or_default() += 1;
            }
        }
        let total = image.pixels().len() / 3;
        let min_count = total.div_ceil(100).max(1);
        let best = counts
            .into_iter()
            .filter(|&(rgb, n)| n >= min_count && self.world.decode_color(rgb).is_some())
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
        let attrs = best
            .and_then(|(rgb, _)| self.world.decode_color(rgb))
            .unwrap_or_default();
        Ok(self.world.embed_attribute_set(&attrs))
    }
}

/// Weight function of a custom toy table, given the context so far.
pub type WeightFn = Arc<dyn Fn(&[TokenId]) -> Vec<f64> + Send + Sync>;

/// Next-token distribution of the toy language model.
#[derive(Clone, Default)]
pub enum ToyTable {
    /// Every token equally likely.
    #[default]
    Uniform,
    /// Pseudo-random, context-dependent probabilities derived from a seed.
    Seeded(u64),
    /// Caller-supplied positive weights over the whole vocabulary, normalized
    /// by the model.
    Custom(WeightFn),
}

impl std::fmt::Debug for ToyTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ToyTable::Uniform => write!(f, "Uniform"),
            ToyTable::Seeded(s) => write!(f, "Seeded({s})"),
            ToyTable::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Toy causal LM. Hidden states are one-hot token vectors, so the
/// degeneration penalty is exactly 1 for a repeated token and 0 otherwise.
#[derive(Debug, Clone)]
pub struct ToyLm {
    world: Arc<ToyWorld>,
    table: ToyTable,
}

impl ToyLm {
    pub fn new(world: Arc<ToyWorld>, table: ToyTable) -> Self {
        Self { world, table }
    }

    pub fn world(&self) -> &ToyWorld {
        &self.world
    }

    /// Full next-token distribution for `context`, indexed by token id.
    pub fn distribution(&self, context: &[TokenId]) -> Result<Vec<f64>, BackendError> {
        let v = self.world.vocab_size();
        let weights = match &self.table {
            ToyTable::Uniform => vec![1.0; v],
            ToyTable::Seeded(seed) => {
                let ctx = context
                    .iter()
                    .fold(splitmix64(*seed), |h, &t| splitmix64(h ^ t as u64));
                (0..v)
                    .map(|t| {
                        let bits = splitmix64(ctx ^ (t as u64).wrapping_mul(0xA24B_AED4_963E_E407));
                        let u = (bits >> 11) as f64 / (1u64 << 53) as f64;
                        (3.0 * u).exp()
                    })
                    .collect()
            }
            ToyTable::Custom(f) => f(context),
        };
        if weights.len() != v || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(BackendError::Config(format!(
                "toy table must give {v} positive finite weights"
            )));
        }
        let total: f64 = weights.iter().sum();
        Ok(weights.into_iter().map(|w| w / total).collect())
    }
}

impl LanguageModel for ToyLm {
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        self.world.tokenize(text)
    }

    fn detokenize(&self, tokens: &[TokenId]) -> Result<String, BackendError> {
        self.world.detokenize(tokens)
    }

    fn top_k(&self, context: &[TokenId], k: usize) -> Result<Vec<Candidate>, BackendError> {
        let probs = self.distribution(context)?;
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        order.truncate(k);
        Ok(order
            .into_iter()
            .map(|t| Candidate {
                token: t as TokenId,
                p_model: probs[t],
                hidden: Embedding::one_hot(probs.len(), t),
            })
            .collect())
    }

    fn eot_token(&self) -> TokenId {
        self.world.eot_token()
    }

    fn vocab_size(&self) -> usize {
        self.world.vocab_size()
    }
}

/// Builds the toy LM and encoder over one shared world.
pub fn toy_backend(world: ToyWorld, table: ToyTable) -> (ToyLm, ToyEncoder) {
    let world = Arc::new(world);
    (ToyLm::new(world.clone(), table), ToyEncoder::new(world))
}
