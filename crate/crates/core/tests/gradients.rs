#[allow(dead_code)]
mod common;

use codistill_core::losses::{hard_ce, kl_div, logit_mse, soft_ce};
use codistill_core::{seed, Matrix};
use common::gradcheck::check_case;
use common::{fd_gradient, max_rel_err, random_matrix, random_probs, FD_STEP};

#[test]
fn parameter_gradients_match_finite_differences() {
    for case in 0..10u64 {
        for (loss, err) in check_case(1000 + case) {
            assert!(err < 1e-4, "case {case} loss {loss}: max rel err {err:e}");
        }
    }
}

fn logit_fd(z: &Matrix, f: impl Fn(&Matrix) -> f64) -> Vec<f64> {
    fd_gradient(z.as_slice(), FD_STEP, |v| f(&Matrix::from_vec(z.rows(), z.cols(), v.to_vec()).unwrap()))
}

#[test]
fn loss_gradients_match_finite_differences() {
    for case in 0..20u64 {
        let mut rng = seed::rng(case);
        let (b, k) = (1 + case as usize % 4, 2 + case as usize % 5);
        let z = random_matrix(&mut rng, b, k, 3.0);
        let t = random_probs(&mut rng, b, k);
        let tz = random_matrix(&mut rng, b, k, 3.0);
        let labels: Vec<usize> = (0..b).map(|i| (i * 7 + case as usize) % k).collect();

        let a = hard_ce(&labels, &z).unwrap();
        let n = logit_fd(&z, |m| hard_ce(&labels, m).unwrap().loss);
        assert!(max_rel_err(a.grad.as_slice(), &n) < 1e-6, "hard_ce case {case}");

        let a = soft_ce(&t, &z).unwrap();
        let n = logit_fd(&z, |m| soft_ce(&t, m).unwrap().loss);
        assert!(max_rel_err(a.grad.as_slice(), &n) < 1e-6, "soft_ce case {case}");

        let a = kl_div(&t, &z).unwrap();
        let n = logit_fd(&z, |m| kl_div(&t, m).unwrap().loss);
        assert!(max_rel_err(a.grad.as_slice(), &n) < 1e-6, "kl case {case}");

        let a = logit_mse(&tz, &z).unwrap();
        let n = logit_fd(&z, |m| logit_mse(&tz, m).unwrap().loss);
        assert!(max_rel_err(a.grad.as_slice(), &n) < 1e-6, "logit_mse case {case}");
    }
}
