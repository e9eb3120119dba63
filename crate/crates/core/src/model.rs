//! Stand-in encoders, text-agnostic poolings and text-aware attention pooling.
//!
//! The encoders are small two-layer MLPs that turn token features into a
//! text embedding `c_t ∈ R^D` and audio frame features into frame
//! embeddings `c_a ∈ R^{T×D}`. Audio clips are then aggregated either by a
//! text-agnostic pooling (mean, max, mean+max) or by [`tap_pool`], which
//! attends from the text to the frames:
//!
//! ```text
//! Q = LN_text(c_t) W_Q        K = LN_audio(c_a) W_K        V = LN_audio(c_a) W_V
//! w = softmax(Q Kᵀ / √D_p)    z_{a|t} = LN_out(w V W_O)
//! ```
//!
//! Every parameter tensor has a stable dotted name (`tap.w_q`,
//! `tap.ln_out.gamma`, `text.hidden.weight`, ...) used by checkpoints.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::Axis;
use crate::tensor::Tensor;

pub const DEFAULT_LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pooling {
    Mean,
    Max,
    MeanMax,
    Tap,
}

impl Pooling {
    pub const ALL: [Pooling; 4] = [Pooling::Mean, Pooling::Max, Pooling::MeanMax, Pooling::Tap];

    pub fn is_text_aware(self) -> bool {
        self == Pooling::Tap
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
            Pooling::MeanMax => "meanmax",
            Pooling::Tap => "tap",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            "meanmax" => Ok(Pooling::MeanMax),
            "tap" => Ok(Pooling::Tap),
            other => Err(Error::Config(format!(
                "unknown pooling '{other}' (expected mean, max, meanmax or tap)"
            ))),
        }
    }
}

/// Layer sizes shared by the encoders and the attention pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Width of raw token/frame features.
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Shared embedding width `D`.
    pub dim: usize,
    /// Attention projection width `D_p`.
    pub proj_dim: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("dim", self.dim),
            ("proj_dim", self.proj_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Uniform Glorot initialisation: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(fan_in, fan_out, data)
}

type Visitor<'a, 'b> = &'b mut dyn FnMut(String, &'a Tensor);
type VisitorMut<'b> = &'b mut dyn FnMut(String, &mut Tensor);

#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    /// `in × out`
    pub weight: Tensor,
    /// `1 × out`
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub weight: Var,
    pub bias: Var,
}

impl Affine {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: glorot_uniform(rng, fan_in, fan_out),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: Visitor<'a, '_>) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: VisitorMut<'_>) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }

    fn bind(&self, g: &mut Graph, bind: Binder) -> AffineVars {
        AffineVars {
            weight: bind(g, &self.weight),
            bias: bind(g, &self.bias),
        }
    }
}

impl AffineVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_row(y, self.bias)
    }

    fn collect(&self, out: &mut Vec<Var>) {
        out.extend([self.weight, self.bias]);
    }
}

/// Two affine layers with a tanh in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub hidden: Affine,
    pub output: Affine,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub hidden: AffineVars,
    pub output: AffineVars,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            hidden: Affine::init(rng, input, hidden),
            output: Affine::init(rng, hidden, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.output.weight.cols()
    }

    fn visit<'a>(&'a self, prefix: &str, f: Visitor<'a, '_>) {
        self.hidden.visit(&format!("{prefix}.hidden"), f);
        self.output.visit(&format!("{prefix}.output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: VisitorMut<'_>) {
        self.hidden.visit_mut(&format!("{prefix}.hidden"), f);
        self.output.visit_mut(&format!("{prefix}.output"), f);
    }

    fn bind(&self, g: &mut Graph, bind: Binder) -> MlpVars {
        MlpVars {
            hidden: self.hidden.bind(g, bind),
            output: self.output.bind(g, bind),
        }
    }
}

impl MlpVars {
    /// Applies the MLP to every row of `x`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.tanh(h)?;
        self.output.forward(g, h)
    }

    fn collect(&self, out: &mut Vec<Var>) {
        self.hidden.collect(out);
        self.output.collect(out);
    }
}

/// Stand-in text and audio encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub text: Mlp,
    pub audio: Mlp,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub text: MlpVars,
    pub audio: MlpVars,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, dims: &ModelDims) -> Self {
        Self {
            text: Mlp::init(rng, dims.input_dim, dims.hidden_dim, dims.dim),
            audio: Mlp::init(rng, dims.input_dim, dims.hidden_dim, dims.dim),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EncoderVars {
        let bind = binder(trainable);
        EncoderVars {
            text: self.text.bind(g, bind),
            audio: self.audio.bind(g, bind),
        }
    }
}

impl EncoderVars {
    /// `L × D_in` token features → `1 × D` text embedding (mean over tokens).
    pub fn encode_text(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        if g.value(tokens).rows() == 0 {
            return Err(Error::Input("empty token sequence".into()));
        }
        let h = self.text.forward(g, tokens)?;
        g.mean_axis(h, Axis::Rows)
    }

    /// `T × D_in` frame features → `T × D` frame embeddings.
    pub fn encode_audio(&self, g: &mut Graph, frames: Var) -> Result<Var> {
        if g.value(frames).rows() == 0 {
            return Err(Error::Input("empty frame sequence".into()));
        }
        self.audio.forward(g, frames)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormVars {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNormParams {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Tensor::full(&[1, width], 1.0),
            beta: Tensor::zeros(&[1, width]),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: Visitor<'a, '_>) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: VisitorMut<'_>) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }

    fn bind(&self, g: &mut Graph, bind: Binder) -> LayerNormVars {
        LayerNormVars {
            gamma: bind(g, &self.gamma),
            beta: bind(g, &self.beta),
        }
    }
}

/// Learnable weights of the text-aware attention pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct TapParams {
    /// `D × D_p`
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// `D_p × D`
    pub w_o: Tensor,
    pub ln_text: LayerNormParams,
    pub ln_audio: LayerNormParams,
    pub ln_out: LayerNormParams,
    pub eps: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct TapVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln_text: LayerNormVars,
    pub ln_audio: LayerNormVars,
    pub ln_out: LayerNormVars,
    pub eps: f64,
}

impl TapParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, dim: usize, proj_dim: usize) -> Self {
        Self {
            w_q: glorot_uniform(rng, dim, proj_dim),
            w_k: glorot_uniform(rng, dim, proj_dim),
            w_v: glorot_uniform(rng, dim, proj_dim),
            w_o: glorot_uniform(rng, proj_dim, dim),
            ln_text: LayerNormParams::new(dim),
            ln_audio: LayerNormParams::new(dim),
            ln_out: LayerNormParams::new(dim),
            eps: DEFAULT_LN_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn proj_dim(&self) -> usize {
        self.w_q.cols()
    }

    fn visit<'a>(&'a self, prefix: &str, f: Visitor<'a, '_>) {
        f(format!("{prefix}.w_q"), &self.w_q);
        f(format!("{prefix}.w_k"), &self.w_k);
        f(format!("{prefix}.w_v"), &self.w_v);
        f(format!("{prefix}.w_o"), &self.w_o);
        self.ln_text.visit(&format!("{prefix}.ln_text"), f);
        self.ln_audio.visit(&format!("{prefix}.ln_audio"), f);
        self.ln_out.visit(&format!("{prefix}.ln_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: VisitorMut<'_>) {
        f(format!("{prefix}.w_q"), &mut self.w_q);
        f(format!("{prefix}.w_k"), &mut self.w_k);
        f(format!("{prefix}.w_v"), &mut self.w_v);
        f(format!("{prefix}.w_o"), &mut self.w_o);
        self.ln_text.visit_mut(&format!("{prefix}.ln_text"), f);
        self.ln_audio.visit_mut(&format!("{prefix}.ln_audio"), f);
        self.ln_out.visit_mut(&format!("{prefix}.ln_out"), f);
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> TapVars {
        let bind = binder(trainable);
        TapVars {
            w_q: bind(g, &self.w_q),
            w_k: bind(g, &self.w_k),
            w_v: bind(g, &self.w_v),
            w_o: bind(g, &self.w_o),
            ln_text: self.ln_text.bind(g, bind),
            ln_audio: self.ln_audio.bind(g, bind),
            ln_out: self.ln_out.bind(g, bind),
            eps: self.eps,
        }
    }
}

/// Text-side attention queries together with the audio-side keys and values.
pub struct TapAttention {
    /// `B_t × T` attention weights, one row per text.
    pub weights: Var,
    /// `B_t × D` pooled audio embeddings `z_{a|t}`, one row per text.
    pub pooled: Var,
}

impl TapVars {
    /// `B × D` text embeddings → `B × D_p` queries.
    pub fn queries(&self, g: &mut Graph, texts: Var) -> Result<Var> {
        let n = g.layer_norm(texts, self.ln_text.gamma, self.ln_text.beta, self.eps)?;
        g.matmul(n, self.w_q)
    }

    /// `T × D` frame embeddings → `(K, V)`, both `T × D_p`.
    pub fn keys_values(&self, g: &mut Graph, frames: Var) -> Result<(Var, Var)> {
        if g.value(frames).rows() == 0 {
            return Err(Error::Input("empty frame sequence".into()));
        }
        let n = g.layer_norm(frames, self.ln_audio.gamma, self.ln_audio.beta, self.eps)?;
        Ok((g.matmul(n, self.w_k)?, g.matmul(n, self.w_v)?))
    }

    /// Pools one clip for every query row.
    pub fn attend(&self, g: &mut Graph, queries: Var, keys: Var, values: Var) -> Result<TapAttention> {
        let proj_dim = g.value(queries).cols();
        let kt = g.transpose(keys)?;
        let logits = g.matmul(queries, kt)?;
        let logits = g.scale(logits, 1.0 / (proj_dim as f64).sqrt())?;
        let weights = g.softmax_rows(logits)?;
        let context = g.matmul(weights, values)?;
        let out = g.matmul(context, self.w_o)?;
        let pooled = g.layer_norm(out, self.ln_out.gamma, self.ln_out.beta, self.eps)?;
        Ok(TapAttention { weights, pooled })
    }

    fn collect(&self, out: &mut Vec<Var>) {
        out.extend([self.w_q, self.w_k, self.w_v, self.w_o]);
        for ln in [self.ln_text, self.ln_audio, self.ln_out] {
            out.extend([ln.gamma, ln.beta]);
        }
    }
}

type Binder = fn(&mut Graph, &Tensor) -> Var;

fn binder(trainable: bool) -> Binder {
    if trainable {
        |g, t| g.param(t.clone())
    } else {
        |g, t| g.constant(t.clone())
    }
}

/// Every learnable tensor of a retrieval model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    /// Present only for text-aware pooling.
    pub tap: Option<TapParams>,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub tap: Option<TapVars>,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, dims: &ModelDims, pooling: Pooling) -> Self {
        let encoder = EncoderParams::init(rng, dims);
        let tap = pooling
            .is_text_aware()
            .then(|| TapParams::init(rng, dims.dim, dims.proj_dim));
        Self { encoder, tap }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input_dim: self.encoder.text.input_dim(),
            hidden_dim: self.encoder.text.hidden.weight.cols(),
            dim: self.encoder.text.output_dim(),
            proj_dim: self.tap.as_ref().map_or(0, TapParams::proj_dim),
        }
    }

    /// `(name, tensor)` pairs in registration order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        let mut push = |name: String, t| out.push((name, t));
        self.encoder.text.visit("text", &mut push);
        self.encoder.audio.visit("audio", &mut push);
        if let Some(tap) = &self.tap {
            tap.visit("tap", &mut push);
        }
        out
    }

    /// Calls `f` on every tensor, in the same order as [`ModelParams::named`].
    pub fn for_each_mut(&mut self, mut f: impl FnMut(String, &mut Tensor)) {
        self.encoder.text.visit_mut("text", &mut f);
        self.encoder.audio.visit_mut("audio", &mut f);
        if let Some(tap) = &mut self.tap {
            tap.visit_mut("tap", &mut f);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        ModelVars {
            encoder: self.encoder.bind(g, trainable),
            tap: self.tap.as_ref().map(|t| t.bind(g, trainable)),
        }
    }
}

impl ModelVars {
    /// Graph handles in the same order as [`ModelParams::named`].
    pub fn in_order(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.encoder.text.collect(&mut out);
        self.encoder.audio.collect(&mut out);
        if let Some(tap) = &self.tap {
            tap.collect(&mut out);
        }
        out
    }
}

/// Text-agnostic pooling of `T × D` frame embeddings into `1 × D`.
pub fn pool_var(g: &mut Graph, pooling: Pooling, frames: Var) -> Result<Var> {
    if g.value(frames).rows() == 0 {
        return Err(Error::Input("cannot pool zero frames".into()));
    }
    match pooling {
        Pooling::Mean => g.mean_axis(frames, Axis::Rows),
        Pooling::Max => g.max_axis(frames, Axis::Rows),
        Pooling::MeanMax => {
            let mean = g.mean_axis(frames, Axis::Rows)?;
            let max = g.max_axis(frames, Axis::Rows)?;
            g.add(mean, max)
        }
        Pooling::Tap => Err(Error::Contract(
            "text-aware pooling needs a text; use TapVars::attend".into(),
        )),
    }
}

/// A pooling choice together with its parameters: everything needed to
/// score texts against audio clips.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalModel {
    pub pooling: Pooling,
    pub params: ModelParams,
}

impl RetrievalModel {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, dims: &ModelDims, pooling: Pooling) -> Self {
        Self {
            pooling,
            params: ModelParams::init(rng, dims, pooling),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        self.params.bind(g, trainable)
    }

    /// Encodes each token sequence and stacks the results into `B_t × D`.
    pub fn embed_texts(&self, g: &mut Graph, vars: &ModelVars, tokens: &[&Tensor]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Input("empty text batch".into()));
        }
        let mut rows = Vec::with_capacity(tokens.len());
        for t in tokens {
            check_matrix("token sequence", t)?;
            let x = g.constant((*t).clone());
            rows.push(vars.encoder.encode_text(g, x)?);
        }
        g.concat_rows(&rows)
    }

    /// Encodes each clip into its `T_j × D` frame embeddings.
    pub fn embed_audios(&self, g: &mut Graph, vars: &ModelVars, frames: &[&Tensor]) -> Result<Vec<Var>> {
        if frames.is_empty() {
            return Err(Error::Input("empty audio batch".into()));
        }
        frames
            .iter()
            .map(|f| {
                check_matrix("frame sequence", f)?;
                let x = g.constant((*f).clone());
                vars.encoder.encode_audio(g, x)
            })
            .collect()
    }

    /// `B_t × B_a` cosine similarities from text embeddings and frame embeddings.
    pub fn score(&self, g: &mut Graph, vars: &ModelVars, texts: Var, audios: &[Var]) -> Result<Var> {
        if audios.is_empty() {
            return Err(Error::Input("empty audio batch".into()));
        }
        match self.pooling {
            Pooling::Tap => {
                let tap = vars
                    .tap
                    .ok_or_else(|| Error::Contract("tap pooling without tap parameters".into()))?;
                let q = tap.queries(g, texts)?;
                let mut pooled = Vec::with_capacity(audios.len());
                for &a in audios {
                    let (k, v) = tap.keys_values(g, a)?;
                    pooled.push(tap.attend(g, q, k, v)?.pooled);
                }
                crate::objective::conditioned_similarity(g, texts, &pooled)
            }
            pooling => {
                let pooled = audios
                    .iter()
                    .map(|&a| pool_var(g, pooling, a))
                    .collect::<Result<Vec<_>>>()?;
                let za = g.concat_rows(&pooled)?;
                crate::objective::cosine_similarity(g, texts, za)
            }
        }
    }

    /// Full forward pass from raw features to the similarity matrix.
    pub fn similarity(&self, g: &mut Graph, vars: &ModelVars, tokens: &[&Tensor], frames: &[&Tensor]) -> Result<Var> {
        let texts = self.embed_texts(g, vars, tokens)?;
        let audios = self.embed_audios(g, vars, frames)?;
        self.score(g, vars, texts, &audios)
    }
}

fn as_row(t: &Tensor) -> Result<Tensor> {
    let n = t.numel();
    match t.shape() {
        [_] => t.reshape(vec![1, n]),
        [1, _] => Ok(t.clone()),
        other => Err(Error::Input(format!("expected a vector, got shape {other:?}"))),
    }
}

fn into_vector(t: &Tensor) -> Tensor {
    Tensor::vector(t.data().to_vec())
}

fn check_matrix(what: &str, t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::Input(format!(
            "{what} must be a matrix, got shape {:?}",
            t.shape()
        )));
    }
    if t.rows() == 0 {
        return Err(Error::Input(format!("{what} is empty")));
    }
    Ok(())
}

/// `L × D_in` tokens → `c_t ∈ R^D`.
pub fn encode_text(tokens: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    check_matrix("token sequence", tokens)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let x = g.constant(tokens.clone());
    let c = vars.encode_text(&mut g, x)?;
    Ok(into_vector(g.value(c)))
}

/// `T × D_in` frames → `c_a ∈ R^{T×D}`.
pub fn encode_audio(frames: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    check_matrix("frame sequence", frames)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let x = g.constant(frames.clone());
    let c = vars.encode_audio(&mut g, x)?;
    Ok(g.value(c).clone())
}

fn pool_plain(pooling: Pooling, frames: &Tensor) -> Result<Tensor> {
    check_matrix("frame embeddings", frames)?;
    let mut g = Graph::new();
    let x = g.constant(frames.clone());
    let z = pool_var(&mut g, pooling, x)?;
    Ok(into_vector(g.value(z)))
}

pub fn pool_mean(frames: &Tensor) -> Result<Tensor> {
    pool_plain(Pooling::Mean, frames)
}

pub fn pool_max(frames: &Tensor) -> Result<Tensor> {
    pool_plain(Pooling::Max, frames)
}

/// Element-wise sum of mean and max pooling.
pub fn pool_meanmax(frames: &Tensor) -> Result<Tensor> {
    pool_plain(Pooling::MeanMax, frames)
}

fn tap_single(text: &Tensor, frames: &Tensor, params: &TapParams) -> Result<(Tensor, Tensor)> {
    check_matrix("frame embeddings", frames)?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let t = g.constant(as_row(text)?);
    let a = g.constant(frames.clone());
    let q = vars.queries(&mut g, t)?;
    let (k, v) = vars.keys_values(&mut g, a)?;
    let att = vars.attend(&mut g, q, k, v)?;
    Ok((into_vector(g.value(att.weights)), into_vector(g.value(att.pooled))))
}

/// Text-conditioned clip embedding `z_{a|t}` for `c_t ∈ R^D`, `c_a ∈ R^{T×D}`.
pub fn tap_pool(text: &Tensor, frames: &Tensor, params: &TapParams) -> Result<Tensor> {
    tap_single(text, frames, params).map(|(_, z)| z)
}

/// Attention weights over the `T` frames for one text.
pub fn tap_attention(text: &Tensor, frames: &Tensor, params: &TapParams) -> Result<Tensor> {
    tap_single(text, frames, params).map(|(w, _)| w)
}

/// `[B_t, B_a, D]` tensor whose entry `[i][j]` is `tap_pool(texts[i], audios[j])`.
pub fn tap_pool_batch(texts: &Tensor, audios: &[Tensor], params: &TapParams) -> Result<Tensor> {
    check_matrix("text embeddings", texts)?;
    if audios.is_empty() {
        return Err(Error::Input("empty audio batch".into()));
    }
    let (bt, ba, d) = (texts.rows(), audios.len(), params.dim());
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let t = g.constant(texts.clone());
    let q = vars.queries(&mut g, t)?;
    let mut out = vec![0.0; bt * ba * d];
    for (j, frames) in audios.iter().enumerate() {
        check_matrix("frame embeddings", frames)?;
        let a = g.constant(frames.clone());
        let (k, v) = vars.keys_values(&mut g, a)?;
        let att = vars.attend(&mut g, q, k, v)?;
        let pooled = g.value(att.pooled);
        for i in 0..bt {
            let dst = (i * ba + j) * d;
            out[dst..dst + d].copy_from_slice(pooled.row_slice(i));
        }
    }
    Tensor::new(vec![bt, ba, d], out)
}
