//! Recall@k for text-to-audio and audio-to-text retrieval.
//!
//! Candidates are ranked by descending score; equal scores are ordered by
//! candidate index, lower first. A text query hits when its paired clip is
//! in the top k. An audio query hits when any one of its captions is in the
//! top k.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rayon::prelude::*;

use crate::data::RetrievalDataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::RetrievalModel;
use crate::objective::SimilarityMatrix;
use crate::tensor::Tensor;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Caption ↔ audio pairing by index into the score matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    caption_to_audio: Vec<usize>,
    audio_to_captions: Vec<Vec<usize>>,
}

impl GroundTruth {
    pub fn new(caption_to_audio: Vec<usize>, num_audios: usize) -> Result<Self> {
        let mut audio_to_captions = vec![Vec::new(); num_audios];
        for (c, &a) in caption_to_audio.iter().enumerate() {
            let slot = audio_to_captions
                .get_mut(a)
                .ok_or_else(|| Error::Input(format!("caption {c} points at audio {a}, but there are {num_audios}")))?;
            slot.push(c);
        }
        Ok(Self {
            caption_to_audio,
            audio_to_captions,
        })
    }

    pub fn num_captions(&self) -> usize {
        self.caption_to_audio.len()
    }

    pub fn num_audios(&self) -> usize {
        self.audio_to_captions.len()
    }

    pub fn audio_of(&self, caption: usize) -> usize {
        self.caption_to_audio[caption]
    }

    pub fn captions_of(&self, audio: usize) -> &[usize] {
        &self.audio_to_captions[audio]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    T2a,
    A2t,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::T2a => "t2a",
            Direction::A2t => "a2t",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionRecall {
    pub direction: Direction,
    pub num_queries: usize,
    /// k → recall in `[0, 1]`.
    pub r_at: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub t2a: DirectionRecall,
    pub a2t: DirectionRecall,
}

impl RetrievalReport {
    pub fn recall(&self, direction: Direction, k: usize) -> Option<f64> {
        let d = match direction {
            Direction::T2a => &self.t2a,
            Direction::A2t => &self.a2t,
        };
        d.r_at.get(&k).copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("direction,k,recall,num_queries\n");
        for d in [&self.t2a, &self.a2t] {
            for (k, r) in &d.r_at {
                let _ = writeln!(out, "{},{k},{r},{}", d.direction, d.num_queries);
            }
        }
        out
    }

    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for d in [&self.t2a, &self.a2t] {
            let _ = writeln!(out, "{}.num_queries = {}", d.direction, d.num_queries);
            for (k, r) in &d.r_at {
                let _ = writeln!(out, "{}.R@{k} = {r:.4}", d.direction);
            }
        }
        out
    }
}

/// Number of candidates ranked ahead of `target` in one score list.
fn rank_of(scores: impl Iterator<Item = f64>, target: usize, target_score: f64) -> usize {
    scores
        .enumerate()
        .filter(|&(j, s)| s > target_score || (s == target_score && j < target))
        .count()
}

pub fn recall_at_k(
    s: &SimilarityMatrix,
    gt: &GroundTruth,
    ks: &[usize],
    direction: Direction,
) -> Result<DirectionRecall> {
    let (nt, na) = (s.num_texts(), s.num_audios());
    if nt != gt.num_captions() || na != gt.num_audios() {
        return Err(Error::Contract(format!(
            "score matrix is {nt}x{na} but ground truth has {} captions and {} audios",
            gt.num_captions(),
            gt.num_audios()
        )));
    }
    if !s.values.is_finite() {
        return Err(Error::NonFinite { op: "recall_at_k" });
    }
    let candidates = match direction {
        Direction::T2a => na,
        Direction::A2t => nt,
    };
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > candidates) {
        return Err(Error::Contract(format!(
            "k = {k} outside 1..={candidates} candidates for {direction}"
        )));
    }
    let v = &s.values;
    // best (smallest) rank of any target, per query
    let ranks: Vec<usize> = match direction {
        Direction::T2a => (0..nt)
            .map(|c| {
                let a = gt.audio_of(c);
                rank_of(v.row_slice(c).iter().copied(), a, v.at(c, a))
            })
            .collect(),
        Direction::A2t => (0..na)
            .map(|a| {
                gt.captions_of(a)
                    .iter()
                    .map(|&c| rank_of((0..nt).map(|i| v.at(i, a)), c, v.at(c, a)))
                    .min()
                    .unwrap_or(usize::MAX)
            })
            .collect(),
    };
    let queries = ranks.len();
    let r_at = ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r < k).count();
            let recall = if queries == 0 {
                0.0
            } else {
                hits as f64 / queries as f64
            };
            (k, recall)
        })
        .collect();
    Ok(DirectionRecall {
        direction,
        num_queries: queries,
        r_at,
    })
}

pub fn evaluate(s: &SimilarityMatrix, gt: &GroundTruth, ks: &[usize]) -> Result<RetrievalReport> {
    let ks_t2a: Vec<usize> = ks.iter().copied().filter(|&k| k <= s.num_audios()).collect();
    let ks_a2t: Vec<usize> = ks.iter().copied().filter(|&k| k <= s.num_texts()).collect();
    Ok(RetrievalReport {
        t2a: recall_at_k(s, gt, &ks_t2a, Direction::T2a)?,
        a2t: recall_at_k(s, gt, &ks_a2t, Direction::A2t)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    /// Upper bound on (text, audio) pairs scored in one tile.
    pub max_tile_pairs: usize,
    /// Worker threads for tiles; 1 runs everything on the caller's thread.
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_tile_pairs: 64 * 1024,
            workers: 1,
        }
    }
}

/// Full `N_t × N_a` similarity matrix for the given texts and clips.
///
/// Texts and clips are encoded once; scoring then runs tile by tile, each
/// tile covering at most `max_tile_pairs` pairs. Every entry depends only
/// on its own text and clip, so the tiling does not change the result.
pub fn score_matrix_eval(
    model: &RetrievalModel,
    tokens: &[&Tensor],
    frames: &[&Tensor],
    opts: &EvalOptions,
) -> Result<SimilarityMatrix> {
    if tokens.is_empty() || frames.is_empty() {
        return Err(Error::Input("evaluation needs at least one text and one audio".into()));
    }
    let (text_emb, audio_emb) = {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let t = model.embed_texts(&mut g, &vars, tokens)?;
        let a = model.embed_audios(&mut g, &vars, frames)?;
        let text_emb = g.value(t).clone();
        let audio_emb: Vec<Tensor> = a.iter().map(|&v| g.value(v).clone()).collect();
        (text_emb, audio_emb)
    };
    let (nt, na) = (tokens.len(), frames.len());
    let budget = opts.max_tile_pairs.max(1);
    let tile_a = na.min(budget);
    let tile_t = (budget / tile_a).clamp(1, nt);

    let mut tiles = Vec::new();
    for t0 in (0..nt).step_by(tile_t) {
        for a0 in (0..na).step_by(tile_a) {
            tiles.push((t0, tile_t.min(nt - t0), a0, tile_a.min(na - a0)));
        }
    }
    let score_tile = |&(t0, tn, a0, an): &(usize, usize, usize, usize)| -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let t = g.constant(text_emb.slice_rows(t0, tn));
        let a: Vec<_> = audio_emb[a0..a0 + an].iter().map(|x| g.constant(x.clone())).collect();
        let s = model.score(&mut g, &vars, t, &a)?;
        Ok(g.value(s).clone())
    };
    let results: Vec<Result<Tensor>> = if opts.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| Error::Input(format!("thread pool: {e}")))?;
        pool.install(|| tiles.par_iter().map(score_tile).collect())
    } else {
        tiles.iter().map(score_tile).collect()
    };

    let mut out = vec![0.0; nt * na];
    for (&(t0, tn, a0, an), tile) in tiles.iter().zip(results) {
        let tile = tile?;
        for i in 0..tn {
            out[(t0 + i) * na + a0..(t0 + i) * na + a0 + an].copy_from_slice(tile.row_slice(i));
        }
    }
    Ok(SimilarityMatrix {
        values: Tensor::matrix(nt, na, out),
        conditioned: model.pooling.is_text_aware(),
    })
}

/// Scores every caption of `dataset` against every clip and reports recall.
pub fn evaluate_dataset(
    model: &RetrievalModel,
    dataset: &RetrievalDataset,
    ks: &[usize],
    opts: &EvalOptions,
) -> Result<RetrievalReport> {
    let tokens: Vec<&Tensor> = dataset.captions().map(|(_, c)| &c.tokens).collect();
    let frames: Vec<&Tensor> = dataset.items.iter().map(|it| &it.frames).collect();
    let s = score_matrix_eval(model, &tokens, &frames, opts)?;
    evaluate(&s, &dataset.ground_truth()?, ks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sm(r: usize, c: usize, data: Vec<f64>) -> SimilarityMatrix {
        SimilarityMatrix {
            values: Tensor::matrix(r, c, data),
            conditioned: false,
        }
    }

    #[test]
    fn identity_scores_give_perfect_recall() {
        let mut d = vec![0.0; 25];
        for i in 0..5 {
            d[i * 5 + i] = 1.0;
        }
        let gt = GroundTruth::new((0..5).collect(), 5).unwrap();
        let rep = evaluate(&sm(5, 5, d), &gt, &[1]).unwrap();
        assert_eq!(rep.recall(Direction::T2a, 1), Some(1.0));
        assert_eq!(rep.recall(Direction::A2t, 1), Some(1.0));
    }

    #[test]
    fn constant_scores_follow_index_tie_break() {
        let gt = GroundTruth::new((0..10).collect(), 10).unwrap();
        let s = sm(10, 10, vec![0.5; 100]);
        let t2a = recall_at_k(&s, &gt, &[1, 3], Direction::T2a).unwrap();
        // only the query whose target is candidate 0 hits at k = 1
        assert_eq!(t2a.r_at[&1], 0.1);
        assert_eq!(t2a.r_at[&3], 0.3);
    }

    #[test]
    fn audio_query_hits_on_any_caption() {
        // audio 0 has captions 0 and 1; caption 1 ranks first for audio 0
        let gt = GroundTruth::new(vec![0, 0, 1], 2).unwrap();
        let s = sm(3, 2, vec![0.1, 0.0, 0.9, 0.0, 0.5, 1.0]);
        let a2t = recall_at_k(&s, &gt, &[1], Direction::A2t).unwrap();
        assert_eq!(a2t.num_queries, 2);
        assert_eq!(a2t.r_at[&1], 1.0);
    }

    #[test]
    fn k_beyond_candidates_is_rejected() {
        let gt = GroundTruth::new(vec![0, 1], 2).unwrap();
        let s = sm(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            recall_at_k(&s, &gt, &[3], Direction::T2a),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            recall_at_k(&s, &gt, &[0], Direction::T2a),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ground_truth_rejects_dangling_caption() {
        assert!(GroundTruth::new(vec![0, 2], 2).is_err());
        let gt = GroundTruth::new(vec![1, 0, 1], 2).unwrap();
        assert_eq!(gt.captions_of(1), &[0, 2]);
    }

    #[test]
    fn csv_layout() {
        let gt = GroundTruth::new(vec![0, 1], 2).unwrap();
        let rep = evaluate(&sm(2, 2, vec![1.0, 0.0, 0.0, 1.0]), &gt, &[1, 2, 5]).unwrap();
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "direction,k,recall,num_queries");
        assert_eq!(lines[1], "t2a,1,1,2");
        assert_eq!(lines.len(), 5);
        assert!(rep.to_key_values().contains("a2t.R@2 = 1.0000"));
    }
}
