//! Oracles shared by the integration test targets.

use tapir_core::eval::Direction;
use tapir_core::SimilarityMatrix;

/// Candidates ordered by descending score, lower index first on ties.
pub fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Recall@k by sorting every query's candidates and scanning the top k.
pub fn oracle(s: &SimilarityMatrix, caption_to_audio: &[usize], k: usize, dir: Direction) -> f64 {
    let (nt, na) = (s.num_texts(), s.num_audios());
    match dir {
        Direction::T2a => {
            let hits = (0..nt)
                .filter(|&c| {
                    let row: Vec<f64> = (0..na).map(|a| s.get(c, a)).collect();
                    ranked(&row)[..k].contains(&caption_to_audio[c])
                })
                .count();
            hits as f64 / nt as f64
        }
        Direction::A2t => {
            let hits = (0..na)
                .filter(|&a| {
                    let col: Vec<f64> = (0..nt).map(|c| s.get(c, a)).collect();
                    ranked(&col)[..k].iter().any(|&c| caption_to_audio[c] == a)
                })
                .count();
            hits as f64 / na as f64
        }
    }
}
