//! Central finite differences as a gradient oracle.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Default perturbation for f64 checks.
pub const FD_EPS: f64 = 1e-5;

/// Default pass threshold on [`relative_error`].
pub const GRAD_TOL: f64 = 1e-4;

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every element of `x`.
pub fn finite_diff_grad<T: Real>(f: impl Fn(&Tensor<T>) -> T, x: &Tensor<T>, eps: T) -> Tensor<T> {
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_diff_at(&f, x, eps, &all)
}

/// Central differences at the listed flat indices only; other entries are 0.
pub fn finite_diff_at<T: Real>(f: &impl Fn(&Tensor<T>) -> T, x: &Tensor<T>, eps: T, indices: &[usize]) -> Tensor<T> {
    let mut out = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    let two = T::lit(2.0);
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (two * eps);
    }
    out
}

/// `|analytic − numeric| / max(|analytic|, 1)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Outcome of checking one differentiable site.
#[derive(Clone, Debug)]
pub struct SiteReport {
    pub name: String,
    pub worst_rel_err: f64,
    pub checked: usize,
}

impl SiteReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst_rel_err <= tol
    }
}

/// Checks autodiff against central differences for a graph-building closure.
///
/// Every input becomes a trainable leaf; the scalar probed is
/// `Σ out ⊙ R` for a fixed random `R`, so every output component matters.
/// When `samples_per_input` is set only that many randomly chosen elements of
/// each input are perturbed.
pub fn check_site<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    build: F,
    eps: f64,
    samples_per_input: Option<usize>,
    rng: &mut impl Rng,
) -> Result<SiteReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.parameter(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let weights = Tensor::new(g.shape(out).to_vec(), (0..g.value(out).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    let grads = g.backward(loss)?;

    let probe = |values: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).expect("forward succeeded once already");
        g.value(out).data().iter().zip(weights.data()).fold(0.0, |acc, (&a, &b)| acc + a * b)
    };

    let mut worst = 0.0f64;
    let mut checked = 0;
    for (k, (input, &v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.wrt_or_zeros(v);
        let indices: Vec<usize> = match samples_per_input {
            Some(s) if s < input.numel() => (0..s).map(|_| rng.gen_range(0..input.numel())).collect(),
            _ => (0..input.numel()).collect(),
        };
        let f = |x: &Tensor<f64>| {
            let mut vals = inputs.to_vec();
            vals[k] = x.clone();
            probe(&vals)
        };
        let numeric = finite_diff_at(&f, input, eps, &indices);
        for &i in &indices {
            worst = worst.max(relative_error(analytic.data()[i], numeric.data()[i]));
            checked += 1;
        }
    }
    Ok(SiteReport { name: name.to_string(), worst_rel_err: worst, checked })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_vec(vec![3.0]);
        let g = finite_diff_grad(|t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let g = finite_diff_grad(|_: &Tensor<f64>| 7.0, &x, 1e-5);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_slope_is_independent_of_eps() {
        let x = Tensor::from_vec(vec![0.25]);
        for eps in [1e-2, 1e-4, 1e-6] {
            let g = finite_diff_grad(|t: &Tensor<f64>| 2.5 * t.data()[0] + 1.0, &x, eps);
            assert!((g.data()[0] - 2.5).abs() < 1e-9, "eps {eps}");
        }
    }
}
