//! Finite-difference agreement of analytic gradients across the full model.

use tapir_core::gradcheck::{gradcheck, gradcheck_all, GradcheckConfig};
use tapir_core::{LossConfig, LossKind, Pooling};

#[test]
fn every_pooling_and_loss_passes() {
    let reports = gradcheck_all(&GradcheckConfig::default()).unwrap();
    assert_eq!(reports.len(), 8);
    for rep in &reports {
        println!("{}", rep.to_string().lines().next().unwrap());
        assert!(rep.passed(), "{rep}");
    }
}

#[test]
fn stop_gradient_prior_passes_and_changes_gradients() {
    let mut cfg = GradcheckConfig::default();
    let full = gradcheck(Pooling::Tap, LossKind::Pmr, &cfg).unwrap();
    cfg.loss = LossConfig {
        stop_gradient_prior: true,
        ..LossConfig::default()
    };
    let stopped = gradcheck(Pooling::Tap, LossKind::Pmr, &cfg).unwrap();
    assert!(full.passed(), "{full}");
    assert!(stopped.passed(), "{stopped}");
    let differs = full
        .params
        .iter()
        .zip(&stopped.params)
        .any(|(a, b)| a.analytic.max_abs_diff(&b.analytic) > 1e-9);
    assert!(differs, "stopping the prior gradient had no effect");
}

#[test]
fn other_seeds_and_loss_settings() {
    for seed in 1..4 {
        for (tau, omega) in [(0.07, 1.0), (0.5, 3.0), (0.2, 0.0)] {
            let cfg = GradcheckConfig {
                seed,
                loss: LossConfig {
                    tau,
                    omega,
                    stop_gradient_prior: false,
                },
                ..GradcheckConfig::default()
            };
            for pooling in [Pooling::MeanMax, Pooling::Tap] {
                let rep = gradcheck(pooling, LossKind::Pmr, &cfg).unwrap();
                assert!(rep.passed(), "seed {seed} tau {tau} omega {omega}: {rep}");
            }
        }
    }
}
