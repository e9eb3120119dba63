//! Central finite-difference check of every model parameter gradient.

use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::graph::Graph;
use crate::model::{ModelDims, Pooling, RetrievalModel};
use crate::objective::{
    loss_var, pmr_with_priors_var, prior_matrix_a2t, prior_matrix_t2a, LossConfig, LossKind, SimilarityMatrix,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub batch_size: usize,
    pub frames: usize,
    /// Token count of the longest caption; captions use 1..=this many.
    pub max_tokens: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub dim: usize,
    pub proj_dim: usize,
    /// Finite-difference step.
    pub h: f64,
    /// Largest allowed `|analytic − fd| / max(1, |fd|)`.
    pub tolerance: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            frames: 6,
            max_tokens: 3,
            input_dim: 8,
            hidden_dim: 12,
            dim: 16,
            proj_dim: 8,
            h: 1e-5,
            tolerance: 1e-4,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub analytic: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub pooling: Pooling,
    pub loss: LossKind,
    pub stop_gradient_prior: bool,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tolerance)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "pooling={} loss={} stop_gradient_prior={} max_rel_error={:.3e} {}",
            self.pooling,
            self.loss,
            self.stop_gradient_prior,
            self.max_rel_error(),
            if self.passed() { "PASS" } else { "FAIL" }
        );
        for p in &self.params {
            let mark = if p.max_rel_error <= self.tolerance {
                "ok"
            } else {
                "FAIL"
            };
            let _ = writeln!(out, "  {:<24} {:.3e} {mark}", p.name, p.max_rel_error);
        }
        f.write_str(out.trim_end())
    }
}

struct Inputs {
    tokens: Vec<Tensor>,
    frames: Vec<Tensor>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect(),
    )
}

fn similarity(
    model: &RetrievalModel,
    g: &mut Graph,
    vars: &crate::model::ModelVars,
    inputs: &Inputs,
) -> Result<crate::graph::Var> {
    let tokens: Vec<&Tensor> = inputs.tokens.iter().collect();
    let frames: Vec<&Tensor> = inputs.frames.iter().collect();
    model.similarity(g, vars, &tokens, &frames)
}

/// Loss with parameters as constants. With `priors`, the PMR prior matrices
/// are held fixed at the given values.
fn loss_value(
    model: &RetrievalModel,
    inputs: &Inputs,
    kind: LossKind,
    cfg: &LossConfig,
    priors: Option<&(Tensor, Tensor)>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let s = similarity(model, &mut g, &vars, inputs)?;
    let loss = match priors {
        Some((t2a, a2t)) => {
            let t2a = g.constant(t2a.clone());
            let a2t = g.constant(a2t.clone());
            pmr_with_priors_var(&mut g, s, t2a, a2t, cfg.tau)?
        }
        None => loss_var(&mut g, kind, s, cfg)?,
    };
    Ok(g.value(loss).data()[0])
}

fn set_param(model: &mut RetrievalModel, param: usize, elem: usize, value: f64) {
    let mut i = 0;
    model.params.for_each_mut(|_, t| {
        if i == param {
            t.data_mut()[elem] = value;
        }
        i += 1;
    });
}

pub fn gradcheck(pooling: Pooling, kind: LossKind, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let dims = ModelDims {
        input_dim: cfg.input_dim,
        hidden_dim: cfg.hidden_dim,
        dim: cfg.dim,
        proj_dim: cfg.proj_dim,
    };
    dims.validate()?;
    cfg.loss.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = RetrievalModel::init(&mut rng, &dims, pooling);
    // move LayerNorm affines off their (1, 0) initial values
    model.params.for_each_mut(|name, t| {
        if name.contains(".ln_") {
            for x in t.data_mut() {
                *x += 0.2 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    });
    let inputs = Inputs {
        tokens: (0..cfg.batch_size)
            .map(|_| {
                let len = rng.random_range(1..=cfg.max_tokens.max(1));
                normal_matrix(&mut rng, len, cfg.input_dim)
            })
            .collect(),
        frames: (0..cfg.batch_size)
            .map(|_| normal_matrix(&mut rng, cfg.frames, cfg.input_dim))
            .collect(),
    };

    let (analytic, s_value) = {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let s = similarity(&model, &mut g, &vars, &inputs)?;
        let loss = loss_var(&mut g, kind, s, &cfg.loss)?;
        let mut grads = g.backward(loss)?;
        let analytic: Vec<Tensor> = vars
            .in_order()
            .into_iter()
            .map(|v| grads.take(v).expect("parameters are trainable leaves"))
            .collect();
        (analytic, g.value(s).clone())
    };

    let frozen = (kind == LossKind::Pmr && cfg.loss.stop_gradient_prior)
        .then(|| -> Result<(Tensor, Tensor)> {
            let s = SimilarityMatrix {
                values: s_value,
                conditioned: pooling.is_text_aware(),
            };
            Ok((
                prior_matrix_t2a(&s, cfg.loss.omega)?,
                prior_matrix_a2t(&s, cfg.loss.omega)?,
            ))
        })
        .transpose()?;

    let names: Vec<String> = model.params.named().into_iter().map(|(n, _)| n).collect();
    let mut params = Vec::with_capacity(names.len());
    for (pi, (name, grad)) in names.into_iter().zip(analytic).enumerate() {
        let mut worst = 0.0f64;
        let base = model.params.named()[pi].1.clone();
        for (ei, &x) in base.data().iter().enumerate() {
            set_param(&mut model, pi, ei, x + cfg.h);
            let plus = loss_value(&model, &inputs, kind, &cfg.loss, frozen.as_ref())?;
            set_param(&mut model, pi, ei, x - cfg.h);
            let minus = loss_value(&model, &inputs, kind, &cfg.loss, frozen.as_ref())?;
            set_param(&mut model, pi, ei, x);
            let fd = (plus - minus) / (2.0 * cfg.h);
            let rel = (grad.data()[ei] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
        }
        params.push(ParamCheck {
            name,
            max_rel_error: worst,
            analytic: grad,
        });
    }
    Ok(GradcheckReport {
        pooling,
        loss: kind,
        stop_gradient_prior: cfg.loss.stop_gradient_prior,
        tolerance: cfg.tolerance,
        params,
    })
}

/// Every pooling × loss combination under one loss configuration.
pub fn gradcheck_all(cfg: &GradcheckConfig) -> Result<Vec<GradcheckReport>> {
    let mut out = Vec::new();
    for pooling in Pooling::ALL {
        for kind in [LossKind::NtXent, LossKind::Pmr] {
            out.push(gradcheck(pooling, kind, cfg)?);
        }
    }
    Ok(out)
}
