//! Properties of the differentiation engine on randomly composed graphs.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tapir_core::ops;
use tapir_core::{Axis, Graph, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

/// A graph built from a fixed recipe, so it can be rebuilt at perturbed
/// parameter values.
struct Recipe {
    ops: Vec<u8>,
    seed: u64,
}

struct Built {
    graph: Graph,
    params: Vec<Var>,
    loss: Var,
}

impl Recipe {
    /// Parameter tensors at the base point, in creation order.
    fn base_params(&self) -> Vec<Tensor> {
        let mut sink = Vec::new();
        self.build(None, &mut sink);
        sink
    }

    fn build(&self, overrides: Option<&[Tensor]>, created: &mut Vec<Tensor>) -> Built {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut g = Graph::new();
        let mut params = Vec::new();
        let mut param = |g: &mut Graph, t: Tensor, params: &mut Vec<Var>| {
            let t = match overrides {
                Some(o) => o[params.len()].clone(),
                None => t,
            };
            created.push(t.clone());
            let v = g.param(t);
            params.push(v);
            v
        };
        let x0 = random(&mut rng, 3, 4);
        let mut a = param(&mut g, x0, &mut params);
        for &op in &self.ops {
            let (m, n) = g.value(a).dims2().unwrap();
            a = match op % 12 {
                0 => {
                    let s = g.scale(a, 0.3).unwrap();
                    g.exp(s).unwrap()
                }
                1 => g.tanh(a).unwrap(),
                2 => g.softmax_rows(a).unwrap(),
                3 => g.log_softmax_rows(a).unwrap(),
                4 => {
                    let gamma = random(&mut rng, 1, n).map(|x| 1.0 + 0.3 * x);
                    let beta = random(&mut rng, 1, n);
                    let gm = param(&mut g, gamma, &mut params);
                    let bt = param(&mut g, beta, &mut params);
                    g.layer_norm(a, gm, bt, 1e-5).unwrap()
                }
                5 => g.l2_normalize_rows(a).unwrap(),
                6 => g.mul(a, a).unwrap(),
                7 => {
                    let w = random(&mut rng, n, n);
                    let w = param(&mut g, w, &mut params);
                    g.matmul(a, w).unwrap()
                }
                8 => {
                    let mean = g.mean_axis(a, Axis::Rows).unwrap();
                    let neg = g.scale(mean, -1.0).unwrap();
                    g.add_row(a, neg).unwrap()
                }
                9 => {
                    let mx = g.max_axis(a, Axis::Cols).unwrap();
                    g.concat_cols(&[a, mx]).unwrap()
                }
                10 => {
                    let sm = g.softmax_rows(a).unwrap();
                    g.log(sm).unwrap()
                }
                _ => {
                    let t = g.transpose(a).unwrap();
                    let b = random(&mut rng, m, n);
                    let b = param(&mut g, b, &mut params);
                    let tb = g.transpose(b).unwrap();
                    let s = g.sub(t, tb).unwrap();
                    g.transpose(s).unwrap()
                }
            };
        }
        let (m, n) = g.value(a).dims2().unwrap();
        let c = g.constant(random(&mut rng, m, n));
        let weighted = g.mul(a, c).unwrap();
        let loss = g.sum_all(weighted).unwrap();
        Built { graph: g, params, loss }
    }

    fn loss_at(&self, values: &[Tensor]) -> f64 {
        let b = self.build(Some(values), &mut Vec::new());
        b.graph.value(b.loss).data()[0]
    }

    /// Largest `|analytic − fd| / max(1, |fd|)` over every parameter entry.
    fn max_rel_error(&self) -> f64 {
        let base = self.base_params();
        let built = self.build(Some(&base), &mut Vec::new());
        let grads = built.graph.backward(built.loss).unwrap();
        let mut worst = 0.0f64;
        for (pi, &v) in built.params.iter().enumerate() {
            let analytic = grads.get(v).unwrap();
            for e in 0..base[pi].numel() {
                let mut p = base.clone();
                p[pi].data_mut()[e] += H;
                let plus = self.loss_at(&p);
                p[pi].data_mut()[e] = base[pi].data()[e] - H;
                let minus = self.loss_at(&p);
                let fd = (plus - minus) / (2.0 * H);
                worst = worst.max((analytic.data()[e] - fd).abs() / fd.abs().max(1.0));
            }
        }
        worst
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn composed_graphs_pass_gradcheck(ops in prop::collection::vec(0u8..12, 1..6), seed in 0u64..1000) {
        let recipe = Recipe { ops, seed };
        let err = recipe.max_rel_error();
        prop_assert!(err <= TOL, "max relative error {err:e}");
    }

    #[test]
    fn replay_reproduces_forward(ops in prop::collection::vec(0u8..12, 1..6), seed in 0u64..1000) {
        let built = Recipe { ops, seed }.build(None, &mut Vec::new());
        let replayed = built.graph.replay().unwrap();
        prop_assert_eq!(replayed.len(), built.graph.len());
        for (t, v) in replayed.iter().zip(built.graph.vars()) {
            prop_assert_eq!(t, built.graph.value(v));
        }
    }

    #[test]
    fn backward_is_deterministic(ops in prop::collection::vec(0u8..12, 1..6), seed in 0u64..1000) {
        let recipe = Recipe { ops, seed };
        let a = recipe.build(None, &mut Vec::new());
        let b = recipe.build(None, &mut Vec::new());
        let ga = a.graph.backward(a.loss).unwrap();
        let gb = b.graph.backward(b.loss).unwrap();
        for (&va, &vb) in a.params.iter().zip(&b.params) {
            prop_assert_eq!(ga.get(va), gb.get(vb));
        }
    }

    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-50.0f64..50.0, 12), shift in -100.0f64..100.0) {
        let x = Tensor::matrix(3, 4, data);
        let p = ops::softmax_rows(&x).unwrap();
        for r in 0..3 {
            let row = p.row_slice(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let shifted = ops::softmax_rows(&x.map(|v| v + shift)).unwrap();
        prop_assert!(p.max_abs_diff(&shifted) <= 1e-12);
    }

    #[test]
    fn exp_inverts_log(data in prop::collection::vec(1e-3f64..1e3, 1..20)) {
        let x = Tensor::row(data);
        let back = ops::exp(&ops::log(&x).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0));
        }
    }
}

#[test]
fn random_matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, 5, 7);
    let b = random(&mut rng, 7, 3);
    let c = ops::matmul(&a, &b).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            let mut want = 0.0;
            for l in 0..7 {
                want += a.at(i, l) * b.at(l, j);
            }
            assert!((c.at(i, j) - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn unreached_leaf_gets_zero_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::row(vec![1.0, 2.0]));
    let y = g.param(Tensor::row(vec![3.0, 4.0]));
    let loss = g.sum_all(x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
    assert_eq!(grads.get(y).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn fan_out_sums_gradients() {
    // d/dx of sum(x * x + x) = 2x + 1
    let mut g = Graph::new();
    let x = g.param(Tensor::row(vec![0.5, -2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.add(sq, x).unwrap();
    let loss = g.sum_all(s).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, -3.0, 7.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(Tensor::row(vec![1.0, 2.0]));
    assert!(g.backward(x).is_err());
}
