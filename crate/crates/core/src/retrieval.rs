//! Bidirectional image/sentence ranking with the generative model as the
//! scoring function, plus recall-at-K and median-rank metrics.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::CaptionDataset;
use crate::error::{Error, Result};
use crate::model::{caption_logprobs_from_state, image_state, ModelParams};

/// How a caption's log-likelihood becomes a ranking score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Mean log-probability per predicted word (including `<stop>`).
    #[default]
    Normalized,
    /// Total log-probability; favours short captions.
    Raw,
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(ScoreMode::Normalized),
            "raw" => Ok(ScoreMode::Raw),
            other => Err(Error::Config(format!("unknown score mode {other:?}"))),
        }
    }
}

fn finish_score(logprobs: &[f64], mode: ScoreMode) -> f64 {
    let total: f64 = logprobs.iter().sum();
    match mode {
        ScoreMode::Normalized => total / logprobs.len() as f64,
        ScoreMode::Raw => total,
    }
}

pub fn score_pair(params: &ModelParams, feature: &[f64], caption: &[usize], mode: ScoreMode) -> Result<f64> {
    let state = image_state(params, feature)?;
    Ok(finish_score(&caption_logprobs_from_state(params, &state, caption)?, mode))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankResult {
    pub query_id: String,
    pub ranked_candidate_ids: Vec<String>,
    /// Sorted 1-based ranks of every ground-truth candidate.
    pub correct_ranks: Vec<usize>,
}

impl RankResult {
    pub fn best_rank(&self) -> Option<usize> {
        self.correct_ranks.first().copied()
    }

    /// Median of the correct ranks; an even count averages the middle pair.
    pub fn median_correct_rank(&self) -> Option<f64> {
        median(&self.correct_ranks.iter().map(|&r| r as f64).collect::<Vec<_>>())
    }
}

fn median(sorted: &[f64]) -> Option<f64> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2]),
        _ => Some((sorted[n / 2 - 1] + sorted[n / 2]) / 2.0),
    }
}

/// Fraction of queries whose best correct rank is at most `k`.
pub fn recall_at_k(results: &[RankResult], k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Param("recall_at_k needs at least one query".into()));
    }
    if k == 0 {
        return Err(Error::Param("k must be at least 1".into()));
    }
    let hits = results
        .iter()
        .filter(|r| r.best_rank().is_some_and(|b| b <= k))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MedianMode {
    /// Mean over queries of each query's median correct rank.
    #[default]
    MeanOfMedians,
    /// Median over queries of each query's best correct rank.
    Conventional,
}

impl MedianMode {
    pub fn name(self) -> &'static str {
        match self {
            MedianMode::MeanOfMedians => "mean-of-medians",
            MedianMode::Conventional => "conventional",
        }
    }
}

impl fmt::Display for MedianMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MedianMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-of-medians" => Ok(MedianMode::MeanOfMedians),
            "conventional" => Ok(MedianMode::Conventional),
            other => Err(Error::Config(format!("unknown median mode {other:?}"))),
        }
    }
}

pub fn median_rank(results: &[RankResult], mode: MedianMode) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Param("median_rank needs at least one query".into()));
    }
    let missing = || Error::Data("query without any correct candidate".into());
    match mode {
        MedianMode::MeanOfMedians => {
            let mut total = 0.0;
            for r in results {
                total += r.median_correct_rank().ok_or_else(missing)?;
            }
            Ok(total / results.len() as f64)
        }
        MedianMode::Conventional => {
            let mut best = results
                .iter()
                .map(|r| r.best_rank().map(|b| b as f64).ok_or_else(missing))
                .collect::<Result<Vec<_>>>()?;
            best.sort_by(f64::total_cmp);
            Ok(median(&best).expect("nonempty"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    /// Image queries ranked against every caption (sentence retrieval).
    ImageToSentence,
    /// Caption queries ranked against every image (image retrieval).
    SentenceToImage,
}

/// Candidate order: descending score, ties by ascending candidate id.
pub fn rank_order(ids: &[String], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => ids[a].cmp(&ids[b]),
        o => o,
    });
    order
}

/// Scores of every (image, caption) pair in an evaluation pool.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub image_ids: Vec<String>,
    /// `"<image_id>#<k>"` for the k-th caption of each image.
    pub caption_ids: Vec<String>,
    /// Index into `image_ids` of each caption's own image.
    pub caption_owner: Vec<usize>,
    /// `scores[i][j]`: image `i` against caption `j`.
    pub scores: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn compute(params: &ModelParams, dataset: &CaptionDataset, mode: ScoreMode) -> Result<Self> {
        let mut caption_ids = Vec::new();
        let mut caption_owner = Vec::new();
        let mut captions = Vec::new();
        for (i, r) in dataset.records.iter().enumerate() {
            for (k, c) in r.captions.iter().enumerate() {
                caption_ids.push(format!("{}#{k}", r.image_id));
                caption_owner.push(i);
                captions.push(c.as_slice());
            }
        }
        let scores = dataset
            .records
            .par_iter()
            .map(|r| {
                let state = image_state(params, &r.feature)?;
                captions
                    .iter()
                    .map(|c| Ok(finish_score(&caption_logprobs_from_state(params, &state, c)?, mode)))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ScoreMatrix {
            image_ids: dataset.records.iter().map(|r| r.image_id.clone()).collect(),
            caption_ids,
            caption_owner,
            scores,
        })
    }

    pub fn rank(&self, direction: Direction) -> Vec<RankResult> {
        match direction {
            Direction::ImageToSentence => (0..self.image_ids.len())
                .map(|i| {
                    let order = rank_order(&self.caption_ids, &self.scores[i]);
                    self.result(&self.image_ids[i], &order, &self.caption_ids, |j| self.caption_owner[j] == i)
                })
                .collect(),
            Direction::SentenceToImage => (0..self.caption_ids.len())
                .map(|j| {
                    let column: Vec<f64> = self.scores.iter().map(|row| row[j]).collect();
                    let order = rank_order(&self.image_ids, &column);
                    self.result(&self.caption_ids[j], &order, &self.image_ids, |i| self.caption_owner[j] == i)
                })
                .collect(),
        }
    }

    fn result(&self, query: &str, order: &[usize], ids: &[String], correct: impl Fn(usize) -> bool) -> RankResult {
        let correct_ranks = order
            .iter()
            .enumerate()
            .filter(|&(_, &c)| correct(c))
            .map(|(pos, _)| pos + 1)
            .collect();
        RankResult {
            query_id: query.to_owned(),
            ranked_candidate_ids: order.iter().map(|&c| ids[c].clone()).collect(),
            correct_ranks,
        }
    }
}

pub fn rank_bidirectional(
    params: &ModelParams,
    dataset: &CaptionDataset,
    direction: Direction,
    mode: ScoreMode,
) -> Result<Vec<RankResult>> {
    if dataset.is_empty() {
        return Err(Error::Param("cannot rank an empty dataset".into()));
    }
    Ok(ScoreMatrix::compute(params, dataset, mode)?.rank(direction))
}
