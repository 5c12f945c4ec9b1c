//! Finite-difference verification of analytic gradients.
//!
//! Every backward pass in [`crate::tensor::ops`] is registered here and
//! checked at float64 with central differences (step 1e-5).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

/// Default central-difference step at float64.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default per-op tolerance on the max relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when a non-finite value was produced, with its location.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn expect_pass(&self) {
        assert!(
            self.passed,
            "gradient check failed for {}: max rel err {:.3e} at index {} (tol {:.1e}){}",
            self.op,
            self.max_rel_err,
            self.worst_index,
            self.tolerance,
            self.failure
                .as_ref()
                .map(|f| format!("; {f}"))
                .unwrap_or_default()
        );
    }
}

/// Central finite-difference gradient of a scalar-valued function.
pub fn numerical_grad(
    f: &mut dyn FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    step: f64,
) -> Result<Tensor<f64>> {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}

fn relative_error(analytic: f64, numerical: f64) -> f64 {
    let denom = analytic.abs().max(numerical.abs()).max(1e-6);
    (analytic - numerical).abs() / denom
}

/// Compare an analytic gradient against central differences of `f` at `x`.
pub fn check_gradient(
    op: &str,
    f: &mut dyn FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if analytic.shape() != x.shape() {
        return Err(Error::Dimension(format!(
            "analytic gradient shape {:?} does not match input {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    if !analytic.all_finite() {
        let idx = analytic
            .data()
            .iter()
            .position(|v| !v.is_finite())
            .unwrap_or(0);
        return Ok(GradCheckReport {
            op: op.to_string(),
            max_rel_err: f64::INFINITY,
            worst_index: idx,
            tolerance,
            passed: false,
            failure: Some(format!("non-finite analytic gradient at index {idx}")),
        });
    }
    let numerical = numerical_grad(f, x, step)?;
    if !numerical.all_finite() {
        let idx = numerical
            .data()
            .iter()
            .position(|v| !v.is_finite())
            .unwrap_or(0);
        return Ok(GradCheckReport {
            op: op.to_string(),
            max_rel_err: f64::INFINITY,
            worst_index: idx,
            tolerance,
            passed: false,
            failure: Some(format!("non-finite numerical gradient at index {idx}")),
        });
    }
    let mut max_rel = 0.0;
    let mut worst = 0;
    for i in 0..x.len() {
        let rel = relative_error(analytic.data()[i], numerical.data()[i]);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_err: max_rel,
        worst_index: worst,
        tolerance,
        passed: max_rel <= tolerance,
        failure: None,
    })
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// A named gradient check runnable at any seed.
pub struct OpCheck {
    pub name: &'static str,
    pub run: Box<dyn Fn(u64) -> Result<GradCheckReport> + Send + Sync>,
}

/// Loss used by the checks below: sum of the op output weighted by a fixed
/// random projection, so every output element influences the scalar.
fn weighted_sum(out: &Tensor<f64>, weights: &Tensor<f64>) -> f64 {
    out.data()
        .iter()
        .zip(weights.data())
        .map(|(&o, &w)| o * w)
        .sum()
}

/// Every differentiable op in this crate, each wired to a scalar loss and
/// its analytic input gradient.
pub fn registered_op_checks() -> Vec<OpCheck> {
    let mut checks: Vec<OpCheck> = Vec::new();

    checks.push(OpCheck {
        name: "matmul",
        run: Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&mut rng, &[4, 5]);
            let b = rand_tensor(&mut rng, &[5, 3]);
            let w = rand_tensor(&mut rng, &[4, 3]);
            let (da, _) = ops::matmul_backward(&a, &b, &w)?;
            let b2 = b.clone();
            let w2 = w.clone();
            check_gradient(
                "matmul",
                &mut |x| Ok(weighted_sum(&ops::matmul(x, &b2)?, &w2)),
                &a,
                &da,
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
            )
        }),
    });

    checks.push(OpCheck {
        name: "matmul_rhs",
        run: Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&mut rng, &[4, 5]);
            let b = rand_tensor(&mut rng, &[5, 3]);
            let w = rand_tensor(&mut rng, &[4, 3]);
            let (_, db) = ops::matmul_backward(&a, &b, &w)?;
            let a2 = a.clone();
            let w2 = w.clone();
            check_gradient(
                "matmul_rhs",
                &mut |x| Ok(weighted_sum(&ops::matmul(&a2, x)?, &w2)),
                &b,
                &db,
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
            )
        }),
    });

    checks.push(OpCheck {
        name: "conv2d_input",
        run: Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[3, 6, 6]);
            let k = rand_tensor(&mut rng, &[2, 3, 3, 3]);
            let out = ops::conv2d(&x, &k, 1, 1)?;
            let w = rand_tensor(&mut rng, out.shape());
            let (dx, _) = ops::conv2d_backward(&x, &k, 1, 1, &w)?;
            let k2 = k.clone();
            let w2 = w.clone();
            check_gradient(
                "conv2d_input",
                &mut |xp| Ok(weighted_sum(&ops::conv2d(xp, &k2, 1, 1)?, &w2)),
                &x,
                &dx,
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
            )
        }),
    });

    checks.push(OpCheck {
        name: "conv2d_kernel",
        run: Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[3, 6, 6]);
            let k = rand_tensor(&mut rng, &[2, 3, 3, 3]);
            let out = ops::conv2d(&x, &k, 2, 1)?;
            let w = rand_tensor(&mut rng, out.shape());
            let (_, dk) = ops::conv2d_backward(&x, &k, 2, 1, &w)?;
            let x2 = x.clone();
            let w2 = w.clone();
            check_gradient(
                "conv2d_kernel",
                &mut |kp| Ok(weighted_sum(&ops::conv2d(&x2, kp, 2, 1)?, &w2)),
                &k,
                &dk,
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
            )
        }),
    });

    checks.push(OpCheck {
        name: "layer_norm",
        run: Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[2, 8]);
            let gamma = rand_tensor(&mut rng, &[8]);
            let beta = rand_tensor(&mut rng, &[8]);
            let w = rand_tensor(&mut rng, &[2, 8]);
            let eps = 1e-5;
            let (dx, _, _) = ops::layer_norm_backward(&x, &gamma, eps, &w)?;
            let (g2, b2, w2) = (gamma.clone(), beta.clone(), w.clone());
            check_gradient(
                "layer_norm",
                &mut |xp| Ok(weighted_sum(&ops::layer_norm(xp, &g2, &b2, eps)?, &w2)),
                &x,
                &dx,
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
            )
        }),
    });

    checks.push(OpCheck {
        name: "attention_q",
        run: Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = rand_tensor(&mut rng, &[4, 8]);
            let k = rand_tensor(&mut rng, &[4, 8]);
            let v = rand_tensor(&mut rng, &[4, 8]);
            let w = rand_tensor(&mut rng, &[4, 8]);
            let (_, cache) = ops::attention(&q, &k, &v, 2)?;
            let (dq, _, _) = ops::attention_backward(&cache, &w)?;
            let (k2, v2, w2) = (k.clone(), v.clone(), w.clone());
            check_gradient(
                "attention_q",
                &mut |qp| Ok(weighted_sum(&ops::attention(qp, &k2, &v2, 2)?.0, &w2)),
                &q,
                &dq,
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
            )
        }),
    });

    checks.push(OpCheck {
        name: "attention_k",
        run: Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = rand_tensor(&mut rng, &[4, 8]);
            let k = rand_tensor(&mut rng, &[4, 8]);
            let v = rand_tensor(&mut rng, &[4, 8]);
            let w = rand_tensor(&mut rng, &[4, 8]);
            let (_, cache) = ops::attention(&q, &k, &v, 2)?;
            let (_, dk, _) = ops::attention_backward(&cache, &w)?;
            let (q2, v2, w2) = (q.clone(), v.clone(), w.clone());
            check_gradient(
                "attention_k",
                &mut |kp| Ok(weighted_sum(&ops::attention(&q2, kp, &v2, 2)?.0, &w2)),
                &k,
                &dk,
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
            )
        }),
    });

    checks.push(OpCheck {
        name: "attention_v",
        run: Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = rand_tensor(&mut rng, &[4, 8]);
            let k = rand_tensor(&mut rng, &[4, 8]);
            let v = rand_tensor(&mut rng, &[4, 8]);
            let w = rand_tensor(&mut rng, &[4, 8]);
            let (_, cache) = ops::attention(&q, &k, &v, 2)?;
            let (_, _, dv) = ops::attention_backward(&cache, &w)?;
            let (q2, k2, w2) = (q.clone(), k.clone(), w.clone());
            check_gradient(
                "attention_v",
                &mut |vp| Ok(weighted_sum(&ops::attention(&q2, &k2, vp, 2)?.0, &w2)),
                &v,
                &dv,
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
            )
        }),
    });

    checks.push(OpCheck {
        name: "softmax_cross_entropy",
        run: Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = rand_tensor(&mut rng, &[3, 5]);
            let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..5)).collect();
            let (_, dlogits) = ops::softmax_cross_entropy(&logits, &labels)?;
            let labels2 = labels.clone();
            check_gradient(
                "softmax_cross_entropy",
                &mut |lp| Ok(ops::softmax_cross_entropy(lp, &labels2)?.0),
                &logits,
                &dlogits,
                DEFAULT_STEP,
                1e-5,
            )
        }),
    });

    checks.push(OpCheck {
        name: "gelu",
        run: Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[3, 7]);
            let w = rand_tensor(&mut rng, &[3, 7]);
            let dx = ops::gelu_backward(&x, &w)?;
            let w2 = w.clone();
            check_gradient(
                "gelu",
                &mut |xp| Ok(weighted_sum(&ops::gelu(xp), &w2)),
                &x,
                &dx,
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
            )
        }),
    });

    checks.push(OpCheck {
        name: "relu",
        run: Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Keep sample points away from the kink at zero.
            let x = Tensor::from_fn(&[4, 4], |_| {
                let v: f64 = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            });
            let w = rand_tensor(&mut rng, &[4, 4]);
            let dx = ops::relu_backward(&x, &w)?;
            let w2 = w.clone();
            check_gradient(
                "relu",
                &mut |xp| Ok(weighted_sum(&ops::relu(xp), &w2)),
                &x,
                &dx,
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
            )
        }),
    });

    checks.push(OpCheck {
        name: "add_bias",
        run: Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[3, 6]);
            let b = rand_tensor(&mut rng, &[6]);
            let w = rand_tensor(&mut rng, &[3, 6]);
            let db = ops::bias_grad(&w)?;
            let (x2, w2) = (x.clone(), w.clone());
            check_gradient(
                "add_bias",
                &mut |bp| Ok(weighted_sum(&ops::add_bias(&x2, bp)?, &w2)),
                &b,
                &db,
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
            )
        }),
    });

    checks
}
