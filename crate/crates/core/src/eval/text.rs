//! Caption metrics over normalized word tokens: BLEU, ROUGE-L, CIDEr and
//! vocabulary statistics.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Lowercases, drops punctuation and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts<'_> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and candidate n-gram total for one order.
fn clipped_matches(candidate: &[String], references: &[Vec<String>], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: Counts = HashMap::new();
    for r in references {
        for (gram, c) in ngram_counts(r, n) {
            let e = max_ref.entry(gram).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand
        .iter()
        .map(|(gram, &c)| c.min(max_ref.get(gram).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Reference length closest to `len`; the shorter one on ties.
fn closest_ref_len(len: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(len), r))
        .unwrap_or(0)
}

/// Orders for which the candidate has no n-grams at all are left out of the
/// geometric mean, so short sentences are scored on the orders they have.
fn bleu_from_stats(matched: &[usize], totals: &[usize], cand_len: usize, ref_len: usize) -> f64 {
    let orders: Vec<(usize, usize)> = matched
        .iter()
        .zip(totals)
        .filter(|(_, &t)| t > 0)
        .map(|(&m, &t)| (m, t))
        .collect();
    if orders.is_empty() || orders.iter().any(|&(m, _)| m == 0) {
        return 0.0;
    }
    let n = orders.len() as f64;
    let log_p: f64 = orders
        .iter()
        .map(|&(m, t)| (m as f64 / t as f64).ln() / n)
        .sum();
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * log_p.exp()
}

fn check_bleu_args(n: usize, references: &[Vec<String>]) -> Result<(), EvalError> {
    if n == 0 {
        return Err(EvalError::Empty("n-gram order"));
    }
    if references.is_empty() {
        return Err(EvalError::Empty("reference list"));
    }
    Ok(())
}

/// Sentence BLEU with uniform weights over orders `1..=n`, no smoothing.
pub fn bleu_n(candidate: &[String], references: &[Vec<String>], n: usize) -> Result<f64, EvalError> {
    if candidate.is_empty() {
        return Err(EvalError::Empty("candidate"));
    }
    check_bleu_args(n, references)?;
    let (matched, totals): (Vec<_>, Vec<_>) =
        (1..=n).map(|k| clipped_matches(candidate, references, k)).unzip();
    Ok(bleu_from_stats(
        &matched,
        &totals,
        candidate.len(),
        closest_ref_len(candidate.len(), references),
    ))
}

/// Corpus BLEU: n-gram statistics and lengths are pooled before combining.
pub fn corpus_bleu(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    n: usize,
) -> Result<f64, EvalError> {
    if candidates.is_empty() {
        return Err(EvalError::Empty("candidate list"));
    }
    assert_eq!(candidates.len(), references.len(), "one reference set per candidate");
    let mut matched = vec![0; n];
    let mut totals = vec![0; n];
    let (mut cand_len, mut ref_len) = (0, 0);
    for (cand, refs) in candidates.iter().zip(references) {
        check_bleu_args(n, refs)?;
        for k in 1..=n {
            let (m, t) = clipped_matches(cand, refs, k);
            matched[k - 1] += m;
            totals[k - 1] += t;
        }
        cand_len += cand.len();
        ref_len += closest_ref_len(cand.len(), refs);
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    Ok(bleu_from_stats(&matched, &totals, cand_len, ref_len))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

const ROUGE_BETA: f64 = 1.2;

fn rouge_f(precision: f64, recall: f64) -> f64 {
    if precision == 0.0 || recall == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * precision * recall / (recall + b2 * precision)
}

/// ROUGE-L F-measure with recall weighted by β = 1.2.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> Result<f64, EvalError> {
    rouge_l_multi(candidate, &[reference.to_vec()])
}

/// Multi-reference ROUGE-L: best precision and best recall over references.
pub fn rouge_l_multi(candidate: &[String], references: &[Vec<String>]) -> Result<f64, EvalError> {
    if candidate.is_empty() {
        return Err(EvalError::Empty("candidate"));
    }
    if references.is_empty() || references.iter().any(Vec::is_empty) {
        return Err(EvalError::Empty("reference"));
    }
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for reference in references {
        let lcs = lcs_len(candidate, reference) as f64;
        p = p.max(lcs / candidate.len() as f64);
        r = r.max(lcs / reference.len() as f64);
    }
    Ok(rouge_f(p, r))
}

const CIDER_N: usize = 4;

type NgramVec = HashMap<Vec<String>, f64>;

/// CIDEr with document frequencies taken from a fixed reference corpus, where
/// each document is the reference set of one image.
#[derive(Debug, Clone)]
pub struct CiderScorer {
    doc_freq: HashMap<Vec<String>, usize>,
    log_docs: f64,
}

impl CiderScorer {
    pub fn new(corpus: &[Vec<Vec<String>>]) -> Result<Self, EvalError> {
        if corpus.is_empty() {
            return Err(EvalError::Empty("corpus"));
        }
        let mut doc_freq = HashMap::new();
        for refs in corpus {
            let grams: HashSet<Vec<String>> = refs
                .iter()
                .flat_map(|r| (1..=CIDER_N).flat_map(move |n| r.windows(n).map(<[String]>::to_vec)))
                .collect();
            for g in grams {
                *doc_freq.entry(g).or_insert(0) += 1;
            }
        }
        Ok(Self {
            doc_freq,
            log_docs: (corpus.len() as f64).ln(),
        })
    }

    /// TF-IDF vectors per order and their norms.
    fn vectors(&self, tokens: &[String]) -> (Vec<NgramVec>, Vec<f64>) {
        let mut vecs = vec![NgramVec::new(); CIDER_N];
        for n in 1..=CIDER_N {
            for g in tokens.windows(n) {
                *vecs[n - 1].entry(g.to_vec()).or_insert(0.0) += 1.0;
            }
        }
        let mut norms = vec![0.0; CIDER_N];
        for (vec, norm) in vecs.iter_mut().zip(&mut norms) {
            for (g, w) in vec.iter_mut() {
                let df = self.doc_freq.get(g).copied().unwrap_or(0).max(1) as f64;
                *w *= self.log_docs - df.ln();
                *norm += *w * *w;
            }
            *norm = norm.sqrt();
        }
        (vecs, norms)
    }

    /// Score of one candidate against its references.
    pub fn score(&self, candidate: &[String], references: &[Vec<String>]) -> Result<f64, EvalError> {
        if references.is_empty() {
            return Err(EvalError::Empty("reference list"));
        }
        let (cv, cn) = self.vectors(candidate);
        let mut total = 0.0;
        for reference in references {
            let (rv, rn) = self.vectors(reference);
            for n in 0..CIDER_N {
                let dot: f64 = cv[n]
                    .iter()
                    .filter_map(|(g, w)| rv[n].get(g).map(|r| w * r))
                    .sum();
                if cn[n] != 0.0 && rn[n] != 0.0 {
                    total += dot / (cn[n] * rn[n]);
                }
            }
        }
        Ok(total / CIDER_N as f64 / references.len() as f64 * 10.0)
    }
}

/// Corpus CIDEr: mean score and per-candidate scores, with the references
/// doubling as the document-frequency corpus.
pub fn cider(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<(f64, Vec<f64>), EvalError> {
    assert_eq!(candidates.len(), references.len(), "one reference set per candidate");
    let scorer = CiderScorer::new(references)?;
    let scores = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| scorer.score(c, r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((scores.iter().sum::<f64>() / scores.len() as f64, scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityStats {
    pub vocab_size: usize,
    /// Share of expressions absent from the reference set; 1.0 without one.
    pub novel_fraction: f64,
    /// Every distinct word with its count, most frequent first, ties alphabetical.
    pub top_words: Vec<(String, usize)>,
}

pub fn diversity_stats(expressions: &[String], reference: Option<&[String]>) -> DiversityStats {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for e in expressions {
        for w in normalize(e) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    let mut top_words: Vec<(String, usize)> = counts.into_iter().collect();
    top_words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let novel_fraction = match reference {
        None => 1.0,
        Some(_) if expressions.is_empty() => 0.0,
        Some(refs) => {
            let known: HashSet<Vec<String>> = refs.iter().map(|r| normalize(r)).collect();
            let novel = expressions.iter().filter(|e| !known.contains(&normalize(e))).count();
            novel as f64 / expressions.len() as f64
        }
    };
    DiversityStats {
        vocab_size: top_words.len(),
        novel_fraction,
        top_words,
    }
}
