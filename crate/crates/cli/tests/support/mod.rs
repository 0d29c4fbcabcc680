//! Independent reference implementations used by the acceptance suite. None
//! of these call into the code under test except to read the toy model's
//! next-token distribution, which is an input rather than something checked.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use refexp_core::backends::toy::{ToyLm, ToyWorld};
use refexp_core::TokenId;

// ---------------------------------------------------------------- toy world

/// Cosine between two normalized attribute indicators, written out in closed
/// form. Attribute-less text and regions share one reserved axis.
pub fn toy_similarity(text: &BTreeSet<usize>, region: &BTreeSet<usize>, clipscore: bool) -> f64 {
    let cos = match (text.is_empty(), region.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => {
            let shared = text.intersection(region).count() as f64;
            shared / ((text.len() * region.len()) as f64).sqrt()
        }
    };
    if clipscore {
        2.5 * cos.max(0.0)
    } else {
        cos
    }
}

pub fn attributes_of_tokens(world: &ToyWorld, tokens: &[TokenId]) -> BTreeSet<usize> {
    tokens
        .iter()
        .filter_map(|&t| world.word(t))
        .filter_map(|w| world.attribute_index(w))
        .collect()
}

pub fn attributes_of_words(world: &ToyWorld, words: &BTreeSet<String>) -> BTreeSet<usize> {
    words.iter().filter_map(|w| world.attribute_index(w)).collect()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct OracleHyper {
    pub lambda: f64,
    pub delta: f64,
    pub beta: f64,
    pub alpha: f64,
    pub k: usize,
    pub max_tokens: usize,
    pub softmax: bool,
    pub clipscore: bool,
    pub strip_prompt: bool,
}

/// Step-by-step scorer for toy scenes built directly from region attribute
/// sets, and an exhaustive search over every token sequence.
pub struct ToyOracle<'a> {
    pub world: &'a ToyWorld,
    pub lm: &'a ToyLm,
    pub regions: Vec<BTreeSet<usize>>,
    pub target: usize,
    pub prompt: Vec<TokenId>,
    pub hyper: OracleHyper,
}

impl ToyOracle<'_> {
    fn stops(&self) -> Vec<TokenId> {
        let mut s = vec![self.world.eot_token()];
        s.extend(self.world.token_id("."));
        s
    }

    /// `(token, fused score)` for every top-k candidate after `generated`.
    pub fn step(&self, generated: &[TokenId]) -> Vec<(TokenId, f64)> {
        let h = self.hyper;
        let mut context = self.prompt.clone();
        context.extend_from_slice(generated);
        let probs = self.lm.distribution(&context).expect("toy distribution");
        let mut ids: Vec<usize> = (0..probs.len()).collect();
        ids.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        ids.truncate(h.k);

        // per region, the similarity of every candidate's text
        let per_region: Vec<Vec<f64>> = self
            .regions
            .iter()
            .map(|region| {
                let raw: Vec<f64> = ids
                    .iter()
                    .map(|&c| {
                        let mut text: Vec<TokenId> = if h.strip_prompt { Vec::new() } else { self.prompt.clone() };
                        text.extend_from_slice(generated);
                        text.push(c as TokenId);
                        let s = toy_similarity(&attributes_of_tokens(self.world, &text), region, h.clipscore);
                        h.delta * s + (1.0 - h.delta) * s
                    })
                    .collect();
                if h.softmax {
                    softmax(&raw)
                } else {
                    raw
                }
            })
            .collect();

        ids.iter()
            .enumerate()
            .map(|(i, &c)| {
                let s_plus = per_region[self.target][i];
                let others: Vec<f64> = (0..self.regions.len())
                    .filter(|&r| r != self.target)
                    .map(|r| per_region[r][i])
                    .collect();
                let vis = if others.is_empty() {
                    h.lambda * s_plus
                } else {
                    h.lambda * s_plus - (1.0 - h.lambda) * (others.iter().sum::<f64>() / others.len() as f64)
                };
                let repeated = if generated.contains(&(c as TokenId)) { 1.0 } else { 0.0 };
                let lang = (1.0 - h.alpha) * probs[c] - h.alpha * repeated;
                (c as TokenId, lang + h.beta * vis)
            })
            .collect()
    }

    fn is_greedy_choice(&self, generated: &[TokenId], token: TokenId) -> bool {
        let scores = self.step(generated);
        let Some(&(_, mine)) = scores.iter().find(|(t, _)| *t == token) else {
            return false;
        };
        scores
            .iter()
            .all(|&(t, s)| s < mine || (s == mine && t >= token))
    }

    /// Every complete sequence (ending in a stop token or at the budget)
    /// each of whose tokens is the best-scoring candidate at its step, found
    /// by scoring all vocabulary sequences up to the budget.
    pub fn greedy_sequences(&self) -> Vec<Vec<TokenId>> {
        self.search(false)
    }

    /// Same set as [`Self::greedy_sequences`], but only prefixes that are
    /// already greedy are extended.
    pub fn greedy_sequences_pruned(&self) -> Vec<Vec<TokenId>> {
        self.search(true)
    }

    fn search(&self, prune: bool) -> Vec<Vec<TokenId>> {
        let vocab = self.world.vocab_size() as TokenId;
        let stops = self.stops();
        let mut complete = Vec::new();
        let mut frontier: Vec<Vec<TokenId>> = vec![Vec::new()];
        for _ in 0..self.hyper.max_tokens {
            let mut next = Vec::new();
            for prefix in &frontier {
                for t in 0..vocab {
                    let mut seq = prefix.clone();
                    seq.push(t);
                    if prune && !self.is_greedy_choice(prefix, t) {
                        continue;
                    }
                    if stops.contains(&t) || seq.len() == self.hyper.max_tokens {
                        complete.push(seq);
                    } else {
                        next.push(seq);
                    }
                }
            }
            frontier = next;
        }
        complete
            .into_iter()
            .filter(|seq| (0..seq.len()).all(|i| self.is_greedy_choice(&seq[..i], seq[i])))
            .collect()
    }

    /// Index of the region the closed-form listener picks for `tokens`.
    pub fn listener(&self, tokens: &[TokenId], delta: f64) -> usize {
        let text = attributes_of_tokens(self.world, tokens);
        let mut best = (0, f64::NEG_INFINITY);
        for (i, region) in self.regions.iter().enumerate() {
            let s = toy_similarity(&text, region, false);
            let s = delta * s + (1.0 - delta) * s;
            if s > best.1 {
                best = (i, s);
            }
        }
        best.0
    }
}

// ---------------------------------------------------------------- imaging

/// Direct 2-D Gaussian convolution with clamped borders, rounded to u8.
pub fn direct_blur(pixels: &[u8], w: usize, h: usize, sigma: f64) -> Vec<u8> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut weights = Vec::new();
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let wgt = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            weights.push((dx, dy, wgt));
            total += wgt;
        }
    }
    let mut out = vec![0u8; pixels.len()];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            for c in 0..3 {
                let mut acc = 0.0;
                for &(dx, dy, wgt) in &weights {
                    let sx = (x + dx).clamp(0, w as i64 - 1) as usize;
                    let sy = (y + dy).clamp(0, h as i64 - 1) as usize;
                    acc += wgt * pixels[(sy * w + sx) * 3 + c] as f64;
                }
                out[(y as usize * w + x as usize) * 3 + c] = (acc / total).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

// ---------------------------------------------------------------- metrics

pub fn pixel_iou(a: [u32; 4], b: [u32; 4]) -> f64 {
    let inside = |bx: [u32; 4], x: u32, y: u32| x >= bx[0] && x < bx[0] + bx[2] && y >= bx[1] && y < bx[1] + bx[3];
    let (mut inter, mut union) = (0u64, 0u64);
    let xmax = (a[0] + a[2]).max(b[0] + b[2]);
    let ymax = (a[1] + a[3]).max(b[1] + b[3]);
    for y in 0..ymax {
        for x in 0..xmax {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            if ia && ib {
                inter += 1;
            }
            if ia || ib {
                union += 1;
            }
        }
    }
    inter as f64 / union as f64
}

pub fn tokens(s: &str) -> Vec<String> {
    let cleaned: String = s
        .chars()
        .map(|c| c.to_ascii_lowercase())
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    cleaned.split_whitespace().map(|w| w.to_string()).collect()
}

fn grams(words: &[String], n: usize) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    if words.len() >= n {
        for i in 0..=words.len() - n {
            *m.entry(words[i..i + n].join(" ")).or_insert(0) += 1;
        }
    }
    m
}

/// `(clipped matches, candidate n-grams)` per order 1..=n, candidate length
/// and the closest reference length (shorter on ties).
fn bleu_stats(cand: &[String], refs: &[Vec<String>], n: usize) -> (Vec<(usize, usize)>, usize, usize) {
    let mut stats = Vec::new();
    for order in 1..=n {
        let c = grams(cand, order);
        let mut matched = 0;
        for (g, count) in &c {
            let best = refs.iter().map(|r| grams(r, order).get(g).copied().unwrap_or(0)).max().unwrap_or(0);
            matched += (*count).min(best);
        }
        stats.push((matched, c.values().sum()));
    }
    let mut closest = refs[0].len();
    for r in refs {
        let (d, best_d) = (r.len().abs_diff(cand.len()), closest.abs_diff(cand.len()));
        if d < best_d || (d == best_d && r.len() < closest) {
            closest = r.len();
        }
    }
    (stats, cand.len(), closest)
}

fn bleu_combine(stats: &[(usize, usize)], c: usize, r: usize) -> f64 {
    let used: Vec<&(usize, usize)> = stats.iter().filter(|(_, total)| *total > 0).collect();
    if used.is_empty() || used.iter().any(|(m, _)| *m == 0) {
        return 0.0;
    }
    let product: f64 = used.iter().map(|(m, t)| *m as f64 / *t as f64).product();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * product.powf(1.0 / used.len() as f64)
}

pub fn ref_bleu(cand: &[String], refs: &[Vec<String>], n: usize) -> f64 {
    let (stats, c, r) = bleu_stats(cand, refs, n);
    bleu_combine(&stats, c, r)
}

pub fn ref_corpus_bleu(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], n: usize) -> f64 {
    let mut total = vec![(0, 0); n];
    let (mut c, mut r) = (0, 0);
    for (cand, rs) in cands.iter().zip(refs) {
        let (stats, cl, rl) = bleu_stats(cand, rs, n);
        for (acc, s) in total.iter_mut().zip(stats) {
            acc.0 += s.0;
            acc.1 += s.1;
        }
        c += cl;
        r += rl;
    }
    bleu_combine(&total, c, r)
}

fn lcs_table(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

pub fn ref_rouge_l(cand: &[String], refs: &[Vec<String>]) -> f64 {
    let precisions = refs.iter().map(|r| lcs_table(cand, r) as f64 / cand.len() as f64);
    let recalls = refs.iter().map(|r| lcs_table(cand, r) as f64 / r.len() as f64);
    let p = precisions.fold(0.0, f64::max);
    let r = recalls.fold(0.0, f64::max);
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let beta2 = 1.2f64.powi(2);
    ((1.0 + beta2) * p * r) / (r + beta2 * p)
}

/// CIDEr with document frequencies over the reference sets of `refs`.
pub fn ref_cider(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Vec<f64> {
    let n_docs = refs.len() as f64;
    let mut df: BTreeMap<(usize, String), f64> = BTreeMap::new();
    for rs in refs {
        let mut seen = BTreeSet::new();
        for r in rs {
            for n in 1..=4 {
                for g in grams(r, n).into_keys() {
                    seen.insert((n, g));
                }
            }
        }
        for key in seen {
            *df.entry(key).or_insert(0.0) += 1.0;
        }
    }
    let vector = |words: &[String], n: usize| -> BTreeMap<String, f64> {
        grams(words, n)
            .into_iter()
            .map(|(g, tf)| {
                let d = df.get(&(n, g.clone())).copied().unwrap_or(0.0).max(1.0);
                (g, tf as f64 * (n_docs.ln() - d.ln()))
            })
            .collect()
    };
    let norm = |v: &BTreeMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    cands
        .iter()
        .zip(refs)
        .map(|(cand, rs)| {
            let mut per_order = [0.0f64; 4];
            for r in rs {
                for n in 1..=4 {
                    let (vc, vr) = (vector(cand, n), vector(r, n));
                    let (nc, nr) = (norm(&vc), norm(&vr));
                    if nc > 0.0 && nr > 0.0 {
                        let dot: f64 = vc.iter().map(|(g, x)| x * vr.get(g).copied().unwrap_or(0.0)).sum();
                        per_order[n - 1] += dot / (nc * nr);
                    }
                }
            }
            let mean_over_orders = per_order.iter().sum::<f64>() / 4.0;
            10.0 * mean_over_orders / rs.len() as f64
        })
        .collect()
}
