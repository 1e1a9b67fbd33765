//! Central finite-difference verification of backward passes.
//!
//! The oracle only ever calls forward passes, so it stays independent of the
//! reverse-mode code it checks. Everything here runs in `f64`: at `f32` the
//! difference quotient drowns in rounding noise.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::{Scalar, Tensor};
use crate::error::Result;

/// Step for central differences.
pub const FD_EPS: f64 = 1e-5;
/// Primitive ops must agree to this relative error.
pub const OP_TOL: f64 = 1e-6;
/// Composite blocks accumulate a little more noise.
pub const BLOCK_TOL: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub rel_err: f64,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.rel_err.is_finite() && self.rel_err < self.tol
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} rel_err {:.3e} (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.rel_err,
            self.tol
        )
    }
}

/// A scalar-valued function of several tensor inputs.
pub type ScalarFn = dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>;

/// Central finite differences of `f` w.r.t. every entry of every input.
pub fn finite_diff(f: &ScalarFn, inputs: &[Tensor<f64>]) -> Vec<Vec<f64>> {
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        f(tensors).expect("gradcheck forward must succeed").item()
    };
    let mut grads = Vec::with_capacity(inputs.len());
    for (which, input) in inputs.iter().enumerate() {
        let mut g = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let bump = |delta: f64| -> f64 {
                let mut data = input.data().to_vec();
                data[j] += delta;
                let perturbed: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        if i == which {
                            Tensor::new(data.clone(), input.shape()).unwrap()
                        } else {
                            t.detach()
                        }
                    })
                    .collect();
                eval(&perturbed)
            };
            g[j] = (bump(FD_EPS) - bump(-FD_EPS)) / (2.0 * FD_EPS);
        }
        grads.push(g);
    }
    grads
}

/// Relative disagreement between an autodiff gradient and the FD oracle:
/// max-norm of the difference over the max-norm of either side.
pub fn rel_err(ad: &[f64], fd: &[f64]) -> f64 {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (&a, &b) in ad.iter().zip(fd) {
        diff = diff.max((a - b).abs());
        scale = scale.max(a.abs()).max(b.abs());
    }
    diff / scale.max(1e-8)
}

/// Run one check: build leaf variables from `inputs`, compare backward()
/// against central differences.
pub fn check(name: &str, inputs: Vec<Tensor<f64>>, f: Box<ScalarFn>, tol: f64) -> GradReport {
    let vars: Vec<Tensor<f64>> = inputs.iter().map(|t| t.to_var()).collect();
    let loss = f(&vars).expect("gradcheck forward must succeed");
    loss.backward().expect("gradcheck backward must succeed");
    let fd = finite_diff(f.as_ref(), &inputs);
    let mut worst: f64 = 0.0;
    for (v, fd_g) in vars.iter().zip(&fd) {
        let ad = v
            .grad()
            .unwrap_or_else(|| vec![0.0; v.numel()]);
        worst = worst.max(rel_err(&ad, fd_g));
    }
    GradReport {
        name: name.to_string(),
        rel_err: worst,
        tol,
    }
}

/// Uniform random tensor in `[lo, hi]`.
pub fn rand_tensor(rng: &mut StdRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(data, shape).unwrap()
}

/// Random tensor kept away from zero (for kinked ops such as |x|).
pub fn rand_tensor_off_zero(rng: &mut StdRng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(margin..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(data, shape).unwrap()
}

/// Fixed random projection so reductions of op outputs have dense gradients.
fn proj(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
    rand_tensor(rng, shape, -1.0, 1.0)
}

fn dot_loss(y: &Tensor<f64>, w: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(y.mul(w)?.sum_all())
}

/// The registered-op suite: every differentiable primitive, five seeds each.
pub fn op_suite(seeds: &[u64]) -> Vec<GradReport> {
    let mut reports = Vec::new();
    for &seed in seeds {
        reports.extend(op_suite_once(seed));
    }
    reports
}

fn op_suite_once(seed: u64) -> Vec<GradReport> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut reports: Vec<GradReport> = Vec::new();
    let mut run = |name: String, inputs: Vec<Tensor<f64>>, f: Box<ScalarFn>| {
        reports.push(check(&format!("{name}#{seed}"), inputs, f, OP_TOL));
    };

    // binary elementwise, broadcast both ways
    {
        let a = rand_tensor(&mut rng, &[2, 3, 1], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[1, 3, 4], -1.0, 1.0);
        let w = proj(&mut rng, &[2, 3, 4]);
        let wc = w.clone();
        run("add".into(), vec![a.clone(), b.clone()], Box::new(move |t| dot_loss(&t[0].add(&t[1])?, &wc)));
        let wc = w.clone();
        run("sub".into(), vec![a.clone(), b.clone()], Box::new(move |t| dot_loss(&t[0].sub(&t[1])?, &wc)));
        let wc = w.clone();
        run("mul".into(), vec![a.clone(), b.clone()], Box::new(move |t| dot_loss(&t[0].mul(&t[1])?, &wc)));
        // keep the divisor away from zero
        let bdiv = rand_tensor_off_zero(&mut rng, &[1, 3, 4], 0.4);
        let wc = w.clone();
        run("div".into(), vec![a, bdiv], Box::new(move |t| dot_loss(&t[0].div(&t[1])?, &wc)));
    }

    // unary elementwise
    for (name, lo_zero) in [
        ("gelu", false),
        ("sigmoid", false),
        ("tanh", false),
        ("softplus", false),
        ("leaky_relu", true),
        ("abs", true),
    ] {
        let x = if lo_zero {
            rand_tensor_off_zero(&mut rng, &[3, 5], 0.1)
        } else {
            rand_tensor(&mut rng, &[3, 5], -2.0, 2.0)
        };
        let w = proj(&mut rng, &[3, 5]);
        let nm = name;
        run(
            name.into(),
            vec![x],
            Box::new(move |t| {
                let y = match nm {
                    "gelu" => t[0].gelu(),
                    "sigmoid" => t[0].sigmoid(),
                    "tanh" => t[0].tanh_act(),
                    "softplus" => t[0].softplus(),
                    "leaky_relu" => t[0].leaky_relu(0.2),
                    _ => t[0].abs(),
                };
                dot_loss(&y, &w)
            }),
        );
    }
    {
        let x = rand_tensor(&mut rng, &[3, 4], 0.5, 2.0);
        let w = proj(&mut rng, &[3, 4]);
        run("sqrt".into(), vec![x], Box::new(move |t| dot_loss(&t[0].sqrt(), &w)));
        let x = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let w = proj(&mut rng, &[3, 4]);
        run("scale".into(), vec![x], Box::new(move |t| dot_loss(&t[0].scale(-1.7), &w)));
    }

    // matmul: plain and batched-broadcast
    {
        let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        let w = proj(&mut rng, &[3, 2]);
        run("matmul".into(), vec![a, b], Box::new(move |t| dot_loss(&t[0].matmul(&t[1])?, &w)));

        let a = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        let w = proj(&mut rng, &[2, 3, 2]);
        run(
            "matmul_batched".into(),
            vec![a, b],
            Box::new(move |t| dot_loss(&t[0].matmul(&t[1])?, &w)),
        );
    }

    // linear
    {
        let x = rand_tensor(&mut rng, &[2, 4, 5], -1.0, 1.0);
        let wt = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        let w = proj(&mut rng, &[2, 4, 3]);
        run(
            "linear".into(),
            vec![x, wt, bias],
            Box::new(move |t| dot_loss(&t[0].linear(&t[1], Some(&t[2]))?, &w)),
        );
    }

    // conv2d, stride 1 and 2
    for (name, stride, pad) in [("conv2d_s1", 1usize, 1usize), ("conv2d_s2", 2, 1)] {
        let x = rand_tensor(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[4, 3, 3, 3], -0.6, 0.6);
        let bias = rand_tensor(&mut rng, &[4], -0.3, 0.3);
        let oh = (6 + 2 * pad - 3) / stride + 1;
        let w = proj(&mut rng, &[2, 4, oh, oh]);
        run(
            name.into(),
            vec![x, k, bias],
            Box::new(move |t| dot_loss(&t[0].conv2d(&t[1], Some(&t[2]), stride, pad)?, &w)),
        );
    }

    // softmax
    {
        let x = rand_tensor(&mut rng, &[2, 5, 3], -2.0, 2.0);
        let w = proj(&mut rng, &[2, 5, 3]);
        run("softmax".into(), vec![x], Box::new(move |t| dot_loss(&t[0].softmax(1)?, &w)));
    }

    // reductions
    {
        let x = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
        run("sum".into(), vec![x.clone()], Box::new(|t| Ok(t[0].sum_all())));
        let w = proj(&mut rng, &[2, 1, 4]);
        run(
            "sum_axes".into(),
            vec![x.clone()],
            Box::new(move |t| dot_loss(&t[0].sum_axes(&[1], true)?, &w)),
        );
        let w = proj(&mut rng, &[2, 4]);
        run(
            "mean_axes".into(),
            vec![x],
            Box::new(move |t| dot_loss(&t[0].mean_axes(&[1], false)?, &w)),
        );
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let w = proj(&mut rng, &[2, 3]);
        run(
            "avgpool_global".into(),
            vec![x],
            Box::new(move |t| dot_loss(&t[0].avgpool_global()?, &w)),
        );
    }

    // shape ops
    {
        let x = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
        let w = proj(&mut rng, &[4, 6]);
        run(
            "reshape".into(),
            vec![x.clone()],
            Box::new(move |t| dot_loss(&t[0].reshape(&[4, 6])?, &w)),
        );
        let w = proj(&mut rng, &[4, 2, 3]);
        run(
            "permute".into(),
            vec![x.clone()],
            Box::new(move |t| dot_loss(&t[0].permute(&[2, 0, 1])?, &w)),
        );
        let w = proj(&mut rng, &[2, 4, 3]);
        run(
            "transpose".into(),
            vec![x.clone()],
            Box::new(move |t| dot_loss(&t[0].transpose()?, &w)),
        );
        let w = proj(&mut rng, &[2, 2, 4]);
        run(
            "narrow".into(),
            vec![x.clone()],
            Box::new(move |t| dot_loss(&t[0].narrow(1, 1, 2)?, &w)),
        );
        let b = rand_tensor(&mut rng, &[2, 2, 4], -1.0, 1.0);
        let w = proj(&mut rng, &[2, 5, 4]);
        run(
            "concat".into(),
            vec![x.clone(), b],
            Box::new(move |t| dot_loss(&super::concat(&[&t[0], &t[1]], 1)?, &w)),
        );
        let map: Vec<i64> = {
            let n = x.numel() as i64;
            (0..30)
                .map(|_| {
                    if rng.random_bool(0.15) {
                        -1
                    } else {
                        rng.random_range(0..n)
                    }
                })
                .collect()
        };
        let map = std::sync::Arc::new(map);
        let w = proj(&mut rng, &[5, 6]);
        run(
            "gather".into(),
            vec![x.clone()],
            Box::new(move |t| dot_loss(&t[0].gather_flat(map.clone(), &[5, 6]), &w)),
        );
        let w = proj(&mut rng, &[3, 2, 3, 4]);
        run(
            "tile_batch".into(),
            vec![x],
            Box::new(move |t| dot_loss(&t[0].tile_batch(3), &w)),
        );
    }

    // resampling
    {
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        let w = proj(&mut rng, &[1, 2, 8, 8]);
        run(
            "upsample_bilinear".into(),
            vec![x.clone()],
            Box::new(move |t| dot_loss(&t[0].upsample_bilinear2x()?, &w)),
        );
        let w = proj(&mut rng, &[1, 2, 8, 8]);
        run(
            "upsample_nearest".into(),
            vec![x.clone()],
            Box::new(move |t| dot_loss(&t[0].upsample_nearest2x()?, &w)),
        );
        let w = proj(&mut rng, &[1, 2, 3, 3]);
        run(
            "bilinear_resize_box".into(),
            vec![x.clone()],
            Box::new(move |t| {
                dot_loss(&t[0].bilinear_resize_box(3, 3, (0.1, 0.2, 0.9, 0.8))?, &w)
            }),
        );
        let w = proj(&mut rng, &[1, 2, 2, 2]);
        run(
            "avgpool2d".into(),
            vec![x],
            Box::new(move |t| dot_loss(&t[0].avgpool2d(2)?, &w)),
        );
    }

    // Haar step and its inverse
    {
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        let w = proj(&mut rng, &[1, 8, 2, 2]);
        run(
            "dwt2".into(),
            vec![x.clone()],
            Box::new(move |t| dot_loss(&t[0].dwt2_stack()?, &w)),
        );
        let q = rand_tensor(&mut rng, &[1, 8, 2, 2], -1.0, 1.0);
        let w = proj(&mut rng, &[1, 2, 4, 4]);
        run(
            "idwt2".into(),
            vec![q],
            Box::new(move |t| dot_loss(&t[0].idwt2_stack()?, &w)),
        );
    }

    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_op_matches_finite_differences() {
        for r in op_suite(&[11, 12, 13, 14, 15]) {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn composite_net_matches_finite_differences() {
        // conv -> gelu -> matmul -> softmax -> weighted sum
        let mut rng = StdRng::seed_from_u64(99);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
        let m = rand_tensor(&mut rng, &[16, 4], -0.7, 0.7);
        let w = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let r = check(
            "composite",
            vec![x, k, m],
            Box::new(move |t| {
                let y = t[0].conv2d(&t[1], None, 1, 1)?.gelu();
                let y = y.reshape(&[3, 16])?.matmul(&t[2])?;
                let y = y.softmax(1)?;
                Ok(y.mul(&w)?.sum_all())
            }),
            1e-5,
        );
        assert!(r.passed(), "{r}");
    }
}
