//! Caption generation metrics: corpus BLEU, exact-match METEOR and CIDEr.
//!
//! Every function takes tokenized sentences. `refs[i]` is the reference set
//! for `hyps[i]`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;
/// Longest sentence pair for which METEOR alignment is searched exhaustively.
pub const METEOR_EXHAUSTIVE_LIMIT: usize = 20;

/// n-gram multiset of a single order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NgramCounts {
    pub order: usize,
    pub counts: BTreeMap<Vec<String>, usize>,
}

impl NgramCounts {
    pub fn from_tokens(tokens: &[String], order: usize) -> Self {
        let mut counts = BTreeMap::new();
        if order > 0 && tokens.len() >= order {
            for w in tokens.windows(order) {
                *counts.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        NgramCounts { order, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn get(&self, gram: &[String]) -> usize {
        self.counts.get(gram).copied().unwrap_or(0)
    }
}

fn check_corpus<T>(hyps: &[Vec<String>], refs: &[Vec<T>]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Param("empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Param(format!(
            "{} hypotheses but {} reference sets",
            hyps.len(),
            refs.len()
        )));
    }
    if refs.iter().any(|r| r.is_empty()) {
        return Err(Error::Param("hypothesis without references".into()));
    }
    Ok(())
}

fn check_order(n: usize) -> Result<()> {
    if !(1..=MAX_ORDER).contains(&n) {
        return Err(Error::Param(format!("n-gram order {n} outside 1..={MAX_ORDER}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Precision {
    pub matches: usize,
    pub total: usize,
    /// No hypothesis n-grams of this order exist; the precision is taken as 0.
    pub degenerate: bool,
}

impl Precision {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.matches as f64 / self.total as f64
        }
    }
}

/// Corpus-pooled clipped n-gram precision.
pub fn modified_precision(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>], n: usize) -> Result<Precision> {
    check_order(n)?;
    check_corpus(hyps, refs)?;
    let (mut matches, mut total) = (0, 0);
    for (hyp, rs) in hyps.iter().zip(refs) {
        let h = NgramCounts::from_tokens(hyp, n);
        let ref_counts: Vec<NgramCounts> = rs.iter().map(|r| NgramCounts::from_tokens(r, n)).collect();
        for (gram, &c) in &h.counts {
            let max_ref = ref_counts.iter().map(|r| r.get(gram)).max().unwrap_or(0);
            matches += c.min(max_ref);
        }
        total += h.total();
    }
    Ok(Precision {
        matches,
        total,
        degenerate: total == 0,
    })
}

pub fn brevity_penalty(ref_len: usize, hyp_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Reference length closest to `hyp_len`, preferring the shorter on ties.
fn closest_ref_len(hyp_len: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(hyp_len), l))
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BleuScore {
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    /// Some order up to N had no hypothesis n-grams at all.
    pub degenerate: bool,
}

pub fn bleu(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>], max_n: usize) -> Result<BleuScore> {
    check_order(max_n)?;
    check_corpus(hyps, refs)?;
    let mut precisions = Vec::with_capacity(max_n);
    let mut degenerate = false;
    for n in 1..=max_n {
        let p = modified_precision(hyps, refs, n)?;
        degenerate |= p.degenerate;
        precisions.push(p.value());
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = hyps.iter().zip(refs).map(|(h, rs)| closest_ref_len(h.len(), rs)).sum();
    let bp = brevity_penalty(r, c);
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        bp * (precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64).exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty: bp,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeteorScore {
    pub score: f64,
    pub matches: usize,
    pub chunks: usize,
    /// Whether the chunk-minimal alignment was found by exhaustive search.
    pub exhaustive: bool,
}

/// `H·(1 − PM)` with `H = 10PR/(R + 9P)` and `PM = ½(C/m)³`.
pub fn meteor_from_counts(matches: usize, chunks: usize, hyp_len: usize, ref_len: usize) -> f64 {
    if matches == 0 {
        return 0.0;
    }
    let p = matches as f64 / hyp_len as f64;
    let r = matches as f64 / ref_len as f64;
    let h = 10.0 * p * r / (r + 9.0 * p);
    let pm = 0.5 * (chunks as f64 / matches as f64).powi(3);
    h * (1.0 - pm)
}

/// METEOR of one hypothesis, the best over its references.
pub fn meteor(hyp: &[String], refs: &[Vec<String>]) -> Result<MeteorScore> {
    if refs.is_empty() {
        return Err(Error::Param("meteor needs at least one reference".into()));
    }
    let mut best: Option<MeteorScore> = None;
    for r in refs {
        let a = align(hyp, r);
        let score = meteor_from_counts(a.matches, a.chunks, hyp.len(), r.len());
        let s = MeteorScore {
            score,
            matches: a.matches,
            chunks: a.chunks,
            exhaustive: a.exhaustive,
        };
        if best.is_none_or(|b| s.score > b.score) {
            best = Some(s);
        }
    }
    Ok(best.expect("at least one reference"))
}

/// Mean sentence METEOR plus the per-sentence scores.
pub fn corpus_meteor(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<(f64, Vec<MeteorScore>)> {
    check_corpus(hyps, refs)?;
    let per: Vec<MeteorScore> = hyps
        .par_iter()
        .zip(refs.par_iter())
        .map(|(h, r)| meteor(h, r))
        .collect::<Result<_>>()?;
    let mean = per.iter().map(|s| s.score).sum::<f64>() / per.len() as f64;
    Ok((mean, per))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
    pub exhaustive: bool,
}

/// Exact-match unigram alignment with the most matches and, among those, the
/// fewest chunks.
pub fn align(hyp: &[String], reference: &[String]) -> Alignment {
    if hyp.len() <= METEOR_EXHAUSTIVE_LIMIT && reference.len() <= METEOR_EXHAUSTIVE_LIMIT {
        let (matches, chunks) = ExactAligner::new(hyp, reference).solve();
        Alignment {
            matches,
            chunks,
            exhaustive: true,
        }
    } else {
        let (matches, chunks) = greedy_align(hyp, reference);
        Alignment {
            matches,
            chunks,
            exhaustive: false,
        }
    }
}

/// Any assignment of each hyp word to a free equal ref word reaches the
/// maximum match count, so the search only has to minimise chunks. The DP
/// walks the hypothesis left to right; its state is the set of used
/// reference positions (restricted to words still to come) and the
/// reference position matched by the previous word.
struct ExactAligner {
    /// Reference positions holding the same word, per hyp position.
    candidates: Vec<Vec<usize>>,
    /// Bit mask of reference positions still relevant from hyp position i on.
    relevant: Vec<u32>,
    memo: HashMap<(usize, u32, usize), (usize, usize)>,
}

const NO_PREV: usize = usize::MAX;

impl ExactAligner {
    fn new(hyp: &[String], reference: &[String]) -> Self {
        let candidates: Vec<Vec<usize>> = hyp
            .iter()
            .map(|w| (0..reference.len()).filter(|&j| &reference[j] == w).collect())
            .collect();
        let mut relevant = vec![0u32; hyp.len() + 1];
        for i in (0..hyp.len()).rev() {
            relevant[i] = relevant[i + 1] | candidates[i].iter().fold(0, |m, &j| m | (1 << j));
        }
        ExactAligner {
            candidates,
            relevant,
            memo: HashMap::new(),
        }
    }

    fn solve(&mut self) -> (usize, usize) {
        self.best(0, 0, NO_PREV)
    }

    /// (matches, chunks) for hyp[i..], maximizing matches then minimizing chunks.
    fn best(&mut self, i: usize, used: u32, prev: usize) -> (usize, usize) {
        if i == self.candidates.len() {
            return (0, 0);
        }
        let used = used & self.relevant[i];
        if let Some(&v) = self.memo.get(&(i, used, prev)) {
            return v;
        }
        let better = |a: (usize, usize), b: (usize, usize)| a.0 > b.0 || (a.0 == b.0 && a.1 < b.1);
        let mut result = None;
        for k in 0..self.candidates[i].len() {
            let j = self.candidates[i][k];
            if used & (1 << j) != 0 {
                continue;
            }
            let (m, c) = self.best(i + 1, used | (1 << j), j);
            let continues = prev != NO_PREV && j == prev + 1;
            let cand = (m + 1, c + usize::from(!continues));
            if result.is_none_or(|r| better(cand, r)) {
                result = Some(cand);
            }
        }
        let skip = self.best(i + 1, used, NO_PREV);
        let result = match result {
            Some(r) if !better(skip, r) => r,
            _ => skip,
        };
        self.memo.insert((i, used, prev), result);
        result
    }
}

/// Left-to-right greedy: extend the current chunk when possible, otherwise
/// start at the free reference position opening the longest common run.
fn greedy_align(hyp: &[String], reference: &[String]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let (mut matches, mut chunks) = (0, 0);
    let mut prev: Option<usize> = None;
    for i in 0..hyp.len() {
        let extend = prev.map(|p| p + 1).filter(|&j| j < reference.len() && !used[j] && reference[j] == hyp[i]);
        let pick = extend.or_else(|| {
            (0..reference.len())
                .filter(|&j| !used[j] && reference[j] == hyp[i])
                .max_by_key(|&j| {
                    let run = (0..)
                        .take_while(|&d| {
                            i + d < hyp.len() && j + d < reference.len() && !used[j + d] && hyp[i + d] == reference[j + d]
                        })
                        .count();
                    (run, std::cmp::Reverse(j))
                })
        });
        match pick {
            Some(j) => {
                used[j] = true;
                matches += 1;
                if extend.is_none() {
                    chunks += 1;
                }
                prev = Some(j);
            }
            None => prev = None,
        }
    }
    (matches, chunks)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CiderScore {
    pub score: f64,
    pub per_image: Vec<f64>,
}

type TfIdf = Vec<(BTreeMap<Vec<String>, f64>, f64)>;

/// CIDEr over orders 1..=4 with per-image document frequencies, ×10.
pub fn cider(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<CiderScore> {
    check_corpus(hyps, refs)?;
    if hyps.len() < 2 {
        return Err(Error::Param("CIDEr needs at least two images for document frequencies".into()));
    }
    let mut df: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    for rs in refs {
        let mut seen = BTreeSet::new();
        for r in rs {
            for n in 1..=MAX_ORDER {
                seen.extend(NgramCounts::from_tokens(r, n).counts.into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (hyps.len() as f64).ln();
    let vectorize = |tokens: &[String]| -> TfIdf {
        (1..=MAX_ORDER)
            .map(|n| {
                let v: BTreeMap<Vec<String>, f64> = NgramCounts::from_tokens(tokens, n)
                    .counts
                    .into_iter()
                    .map(|(g, tf)| {
                        let d = df.get(&g).copied().unwrap_or(0).max(1) as f64;
                        let w = tf as f64 * (log_n - d.ln());
                        (g, w)
                    })
                    .collect();
                let norm = v.values().map(|w| w * w).sum::<f64>().sqrt();
                (v, norm)
            })
            .collect()
    };
    let per_image: Vec<f64> = hyps
        .par_iter()
        .zip(refs.par_iter())
        .map(|(h, rs)| {
            let hv = vectorize(h);
            let mut sum = 0.0;
            for r in rs {
                let rv = vectorize(r);
                for ((hn, h_norm), (rn, r_norm)) in hv.iter().zip(&rv) {
                    let dot: f64 = hn.iter().map(|(g, w)| w * rn.get(g).copied().unwrap_or(0.0)).sum();
                    if *h_norm != 0.0 && *r_norm != 0.0 {
                        sum += dot / (h_norm * r_norm);
                    }
                }
            }
            sum / MAX_ORDER as f64 / rs.len() as f64 * 10.0
        })
        .collect();
    let score = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(CiderScore { score, per_image })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    /// B-1 … B-4.
    pub bleu: [f64; 4],
    pub bleu_degenerate: [bool; 4],
    pub meteor: f64,
    pub meteor_per_sentence: Vec<f64>,
    /// False when some sentence was aligned by the greedy fallback.
    pub meteor_exhaustive: bool,
    /// `None` for single-image corpora, where document frequencies are undefined.
    pub cider: Option<f64>,
    pub cider_per_image: Vec<f64>,
}

pub fn evaluate(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<MetricReport> {
    check_corpus(hyps, refs)?;
    let mut bleu_scores = [0.0; 4];
    let mut bleu_degenerate = [false; 4];
    for n in 1..=4 {
        let b = bleu(hyps, refs, n)?;
        bleu_scores[n - 1] = b.score;
        bleu_degenerate[n - 1] = b.degenerate;
    }
    let (meteor, per) = corpus_meteor(hyps, refs)?;
    let (cider_score, cider_per_image) = if hyps.len() >= 2 {
        let c = cider(hyps, refs)?;
        (Some(c.score), c.per_image)
    } else {
        (None, Vec::new())
    };
    Ok(MetricReport {
        bleu: bleu_scores,
        bleu_degenerate,
        meteor,
        meteor_exhaustive: per.iter().all(|s| s.exhaustive),
        meteor_per_sentence: per.iter().map(|s| s.score).collect(),
        cider: cider_score,
        cider_per_image,
    })
}
