//! Similarity matrices and the two contrastive objectives.
//!
//! Both losses take a square `B × B` similarity matrix whose diagonal holds
//! the positive pairs.
//!
//! * NT-Xent: cross-entropy of the diagonal under a row softmax (t2a) and a
//!   column softmax (a2t) of `S / τ`.
//! * PMR: before each softmax the similarity matrix is multiplied
//!   element-wise by a prior computed in the *other* direction. The t2a
//!   prior is the column softmax of `ω S`; the a2t prior is its row softmax.
//!   A pair that looks strong text-to-audio but weak audio-to-text is
//!   damped, and vice versa.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::Axis;
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 0.07;
/// Prior scale matching the loss temperature, so each prior is the
/// cross-direction retrieval distribution itself. Near `ω = 1` cosine
/// similarities give almost uniform priors.
pub const DEFAULT_OMEGA: f64 = 1.0 / DEFAULT_TAU;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    NtXent,
    Pmr,
}

impl LossKind {
    pub const ALL: [LossKind; 2] = [LossKind::NtXent, LossKind::Pmr];
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::NtXent => "ntxent",
            LossKind::Pmr => "pmr",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ntxent" => Ok(LossKind::NtXent),
            "pmr" => Ok(LossKind::Pmr),
            other => Err(Error::Config(format!(
                "unknown loss '{other}' (expected ntxent or pmr)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Temperature τ > 0.
    pub tau: f64,
    /// Prior logit scale ω.
    pub omega: f64,
    /// Treat the prior matrices as constants during backward.
    pub stop_gradient_prior: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            omega: DEFAULT_OMEGA,
            stop_gradient_prior: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be finite and > 0, got {}", self.tau)));
        }
        if !self.omega.is_finite() {
            return Err(Error::Config(format!("omega must be finite, got {}", self.omega)));
        }
        Ok(())
    }
}

/// `B_t × B_a` matrix of cosine similarities, entry `(i, j) = s(t_i, a_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor,
    /// Whether the audio side was pooled conditioned on each text.
    pub conditioned: bool,
}

impl SimilarityMatrix {
    pub fn num_texts(&self) -> usize {
        self.values.rows()
    }

    pub fn num_audios(&self) -> usize {
        self.values.cols()
    }

    pub fn get(&self, text: usize, audio: usize) -> f64 {
        self.values.at(text, audio)
    }
}

fn check_nonzero_rows(side: &'static str, t: &Tensor) -> Result<()> {
    for i in 0..t.rows() {
        let norm_sq: f64 = t.row_slice(i).iter().map(|v| v * v).sum();
        if !norm_sq.is_finite() || norm_sq <= 0.0 {
            return Err(Error::ZeroNorm { side, index: i });
        }
    }
    Ok(())
}

/// Cosine similarities between `B_t × D` text rows and `B_a × D` audio rows.
pub fn cosine_similarity(g: &mut Graph, texts: Var, audios: Var) -> Result<Var> {
    check_nonzero_rows("text", g.value(texts))?;
    check_nonzero_rows("audio", g.value(audios))?;
    let nt = g.l2_normalize_rows(texts)?;
    let na = g.l2_normalize_rows(audios)?;
    let nat = g.transpose(na)?;
    g.matmul(nt, nat)
}

/// Cosine similarities against text-conditioned audio embeddings.
///
/// `pooled[j]` is `B_t × D` with row `i` holding `z_{a_j | t_i}`; the
/// result is `B_t × B_a`.
pub fn conditioned_similarity(g: &mut Graph, texts: Var, pooled: &[Var]) -> Result<Var> {
    if pooled.is_empty() {
        return Err(Error::Input("no audio embeddings".into()));
    }
    check_nonzero_rows("text", g.value(texts))?;
    let nt = g.l2_normalize_rows(texts)?;
    let mut cols = Vec::with_capacity(pooled.len());
    for (j, &z) in pooled.iter().enumerate() {
        if check_nonzero_rows("audio", g.value(z)).is_err() {
            return Err(Error::ZeroNorm {
                side: "audio",
                index: j,
            });
        }
        let nz = g.l2_normalize_rows(z)?;
        let prod = g.mul(nt, nz)?;
        cols.push(g.sum_axis(prod, Axis::Cols)?);
    }
    g.concat_cols(&cols)
}

/// Audio side of [`similarity_matrix`].
pub enum AudioEmbeddings<'a> {
    /// `B_a × D`, one embedding per clip.
    Shared(&'a Tensor),
    /// `[B_t, B_a, D]`, one embedding per (text, clip) pair.
    Conditioned(&'a Tensor),
}

pub fn similarity_matrix(texts: &Tensor, audios: AudioEmbeddings<'_>) -> Result<SimilarityMatrix> {
    let mut g = Graph::new();
    let t = g.constant(texts.clone());
    match audios {
        AudioEmbeddings::Shared(a) => {
            let a = g.constant(a.clone());
            let s = cosine_similarity(&mut g, t, a)?;
            Ok(SimilarityMatrix {
                values: g.value(s).clone(),
                conditioned: false,
            })
        }
        AudioEmbeddings::Conditioned(z) => {
            let [bt, ba, d] = z.shape() else {
                return Err(Error::Input(format!(
                    "conditioned embeddings must be [B_t, B_a, D], got {:?}",
                    z.shape()
                )));
            };
            let (bt, ba, d) = (*bt, *ba, *d);
            if texts.rows() != bt || texts.cols() != d {
                return Err(Error::Shape {
                    op: "similarity_matrix",
                    left: texts.shape().to_vec(),
                    right: z.shape().to_vec(),
                });
            }
            let pooled: Vec<Var> = (0..ba)
                .map(|j| {
                    let rows = (0..bt)
                        .flat_map(|i| z.data()[(i * ba + j) * d..(i * ba + j + 1) * d].to_vec())
                        .collect();
                    g.constant(Tensor::matrix(bt, d, rows))
                })
                .collect();
            let s = conditioned_similarity(&mut g, t, &pooled)?;
            Ok(SimilarityMatrix {
                values: g.value(s).clone(),
                conditioned: true,
            })
        }
    }
}

fn square_size(g: &Graph, s: Var, what: &str) -> Result<usize> {
    let (r, c) = g
        .value(s)
        .dims2()
        .ok_or_else(|| Error::Contract(format!("{what}: similarity must be a matrix")))?;
    if r != c || r == 0 {
        return Err(Error::Contract(format!(
            "{what} needs a non-empty square similarity matrix, got {r}x{c}"
        )));
    }
    Ok(r)
}

/// `-(1/B) Σ_i log_softmax_rows(logits)[i][i]`
fn diagonal_xent(g: &mut Graph, logits: Var, b: usize) -> Result<Var> {
    let lsm = g.log_softmax_rows(logits)?;
    let eye = g.constant(Tensor::identity(b));
    let diag = g.mul(lsm, eye)?;
    let total = g.sum_all(diag)?;
    g.scale(total, -1.0 / b as f64)
}

pub fn ntxent_var(g: &mut Graph, s: Var, tau: f64) -> Result<Var> {
    let b = square_size(g, s, "ntxent_loss")?;
    let logits = g.scale(s, 1.0 / tau)?;
    let t2a = diagonal_xent(g, logits, b)?;
    let logits_t = g.transpose(logits)?;
    let a2t = diagonal_xent(g, logits_t, b)?;
    g.add(t2a, a2t)
}

/// Column-wise softmax of `ω S`: entry `(i, j)` is how strongly audio `j`
/// prefers text `i` among all texts.
pub fn prior_t2a_var(g: &mut Graph, s: Var, omega: f64) -> Result<Var> {
    let scaled = g.scale(s, omega)?;
    let st = g.transpose(scaled)?;
    let p = g.softmax_rows(st)?;
    g.transpose(p)
}

/// Row-wise softmax of `ω S`: entry `(i, j)` is how strongly text `i`
/// prefers audio `j` among all clips.
pub fn prior_a2t_var(g: &mut Graph, s: Var, omega: f64) -> Result<Var> {
    let scaled = g.scale(s, omega)?;
    g.softmax_rows(scaled)
}

/// PMR loss given explicit prior matrices.
pub fn pmr_with_priors_var(g: &mut Graph, s: Var, prior_t2a: Var, prior_a2t: Var, tau: f64) -> Result<Var> {
    let b = square_size(g, s, "pmr_loss")?;
    let revised_t2a = g.mul(s, prior_t2a)?;
    let logits_t2a = g.scale(revised_t2a, 1.0 / tau)?;
    let loss_t2a = diagonal_xent(g, logits_t2a, b)?;

    let revised_a2t = g.mul(s, prior_a2t)?;
    let logits_a2t = g.scale(revised_a2t, 1.0 / tau)?;
    let logits_a2t = g.transpose(logits_a2t)?;
    let loss_a2t = diagonal_xent(g, logits_a2t, b)?;
    g.add(loss_t2a, loss_a2t)
}

pub fn pmr_var(g: &mut Graph, s: Var, cfg: &LossConfig) -> Result<Var> {
    square_size(g, s, "pmr_loss")?;
    let base = if cfg.stop_gradient_prior { g.detach(s) } else { s };
    let prior_t2a = prior_t2a_var(g, base, cfg.omega)?;
    let prior_a2t = prior_a2t_var(g, base, cfg.omega)?;
    pmr_with_priors_var(g, s, prior_t2a, prior_a2t, cfg.tau)
}

pub fn loss_var(g: &mut Graph, kind: LossKind, s: Var, cfg: &LossConfig) -> Result<Var> {
    match kind {
        LossKind::NtXent => ntxent_var(g, s, cfg.tau),
        LossKind::Pmr => pmr_var(g, s, cfg),
    }
}

fn eval_scalar(s: &SimilarityMatrix, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(s.values.clone());
    let out = f(&mut g, v)?;
    Ok(g.value(out).data()[0])
}

fn eval_matrix(s: &SimilarityMatrix, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(s.values.clone());
    let out = f(&mut g, v)?;
    Ok(g.value(out).clone())
}

pub fn ntxent_loss(s: &SimilarityMatrix, tau: f64) -> Result<f64> {
    eval_scalar(s, |g, v| ntxent_var(g, v, tau))
}

pub fn pmr_loss(s: &SimilarityMatrix, cfg: &LossConfig) -> Result<f64> {
    eval_scalar(s, |g, v| pmr_var(g, v, cfg))
}

pub fn prior_matrix_t2a(s: &SimilarityMatrix, omega: f64) -> Result<Tensor> {
    eval_matrix(s, |g, v| {
        square_size(g, v, "prior_matrix_t2a")?;
        prior_t2a_var(g, v, omega)
    })
}

pub fn prior_matrix_a2t(s: &SimilarityMatrix, omega: f64) -> Result<Tensor> {
    eval_matrix(s, |g, v| {
        square_size(g, v, "prior_matrix_a2t")?;
        prior_a2t_var(g, v, omega)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sim(b: usize, data: Vec<f64>) -> SimilarityMatrix {
        SimilarityMatrix {
            values: Tensor::matrix(b, b, data),
            conditioned: false,
        }
    }

    fn random_sim(rng: &mut ChaCha8Rng, b: usize) -> SimilarityMatrix {
        sim(b, (0..b * b).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    // log-sum-exp cross-entropy written out directly
    fn ntxent_oracle(s: &SimilarityMatrix, tau: f64) -> f64 {
        let b = s.num_texts();
        let mut total = 0.0;
        for i in 0..b {
            let row: f64 = (0..b).map(|j| (s.get(i, j) / tau).exp()).sum();
            let col: f64 = (0..b).map(|j| (s.get(j, i) / tau).exp()).sum();
            total += (s.get(i, i) / tau) - row.ln();
            total += (s.get(i, i) / tau) - col.ln();
        }
        -total / b as f64
    }

    #[test]
    fn cosine_basics() {
        let t = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let a = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 3.0]);
        let s = similarity_matrix(&t, AudioEmbeddings::Shared(&a)).unwrap();
        assert_eq!(s.values.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert!(!s.conditioned);
    }

    #[test]
    fn cosine_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        let a = Tensor::matrix(2, 4, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        let base = similarity_matrix(&t, AudioEmbeddings::Shared(&a)).unwrap();
        let scaled = similarity_matrix(&t.map(|x| 10.0 * x), AudioEmbeddings::Shared(&a)).unwrap();
        assert!(base.values.max_abs_diff(&scaled.values) <= 1e-12);
        for v in base.values.data() {
            assert!(v.abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn zero_norm_names_the_index() {
        let t = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 1.0]);
        let a = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        match similarity_matrix(&t, AudioEmbeddings::Shared(&a)) {
            Err(Error::ZeroNorm {
                side: "audio",
                index: 1,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conditioned_matches_shared_when_audio_ignores_text() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        let a = Tensor::matrix(2, 4, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut z = Vec::new();
        for _ in 0..3 {
            z.extend_from_slice(a.data());
        }
        let z = Tensor::new(vec![3, 2, 4], z).unwrap();
        let s1 = similarity_matrix(&t, AudioEmbeddings::Shared(&a)).unwrap();
        let s2 = similarity_matrix(&t, AudioEmbeddings::Conditioned(&z)).unwrap();
        assert!(s2.conditioned);
        assert!(s1.values.max_abs_diff(&s2.values) <= 1e-12);
    }

    #[test]
    fn ntxent_closed_forms() {
        assert_eq!(ntxent_loss(&sim(1, vec![0.3]), 0.07).unwrap(), 0.0);
        let l = ntxent_loss(&sim(4, vec![0.25; 16]), 0.07).unwrap();
        assert!((l - 2.0 * 4f64.ln()).abs() <= 1e-12);

        let mut d = vec![-1.0; 64];
        for i in 0..8 {
            d[i * 8 + i] = 1.0;
        }
        let l = ntxent_loss(&sim(8, d), 0.07).unwrap();
        assert!((0.0..=1e-9).contains(&l), "{l}");
    }

    #[test]
    fn ntxent_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for b in [2, 3, 6] {
            let s = random_sim(&mut rng, b);
            let got = ntxent_loss(&s, 0.1).unwrap();
            assert!((got - ntxent_oracle(&s, 0.1)).abs() <= 1e-12);
        }
    }

    #[test]
    fn losses_reject_non_square() {
        let s = SimilarityMatrix {
            values: Tensor::zeros(&[2, 3]),
            conditioned: false,
        };
        assert!(matches!(ntxent_loss(&s, 0.1), Err(Error::Contract(_))));
        assert!(matches!(pmr_loss(&s, &LossConfig::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn priors_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_sim(&mut rng, 4);
        let omega = 1.7;
        let t2a = prior_matrix_t2a(&s, omega).unwrap();
        let a2t = prior_matrix_a2t(&s, omega).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let col: f64 = (0..4).map(|k| (omega * s.get(k, j)).exp()).sum();
                let row: f64 = (0..4).map(|k| (omega * s.get(i, k)).exp()).sum();
                assert!((t2a.at(i, j) - (omega * s.get(i, j)).exp() / col).abs() <= 1e-12);
                assert!((a2t.at(i, j) - (omega * s.get(i, j)).exp() / row).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn priors_uniform_at_zero_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = random_sim(&mut rng, 5);
        for p in [prior_matrix_t2a(&s, 0.0).unwrap(), prior_matrix_a2t(&s, 0.0).unwrap()] {
            assert!(p.data().iter().all(|&x| x == 0.2));
        }
        assert_eq!(prior_matrix_t2a(&sim(1, vec![0.9]), 3.0).unwrap().data(), &[1.0]);
    }

    #[test]
    fn prior_transpose_duality() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_sim(&mut rng, 4);
        let st = sim(4, s.values.transpose().into_data());
        let lhs = prior_matrix_a2t(&s, 1.3).unwrap();
        let rhs = prior_matrix_t2a(&st, 1.3).unwrap().transpose();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn pmr_closed_forms() {
        let cfg = LossConfig::default();
        assert_eq!(pmr_loss(&sim(1, vec![0.4]), &cfg).unwrap(), 0.0);
        let l = pmr_loss(&sim(4, vec![-0.3; 16]), &cfg).unwrap();
        assert!((l - 2.0 * 4f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn pmr_at_zero_scale_is_rescaled_ntxent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for b in [2, 4, 8] {
            let s = random_sim(&mut rng, b);
            let cfg = LossConfig {
                tau: 0.07,
                omega: 0.0,
                stop_gradient_prior: false,
            };
            let pmr = pmr_loss(&s, &cfg).unwrap();
            let nt = ntxent_loss(&s, 0.07 * b as f64).unwrap();
            assert!((pmr - nt).abs() <= 1e-12);
        }
    }

    #[test]
    fn loss_kind_parses() {
        for k in LossKind::ALL {
            assert_eq!(k.to_string().parse::<LossKind>().unwrap(), k);
        }
        assert!("triplet".parse::<LossKind>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = LossConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.tau = 0.0;
        assert!(cfg.validate().is_err());
        cfg.tau = 0.1;
        cfg.omega = f64::NAN;
        assert!(cfg.validate().is_err());
    }
}
