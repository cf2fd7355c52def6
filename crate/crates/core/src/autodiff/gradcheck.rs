//! Central-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_pcg::Pcg32;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::graph::{Graph, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over components of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst component.
    pub worst: Option<(usize, usize)>,
    pub components: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Reduce a possibly non-scalar output to a scalar with a fixed cotangent so
/// every output component contributes to the check.
fn project(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let n = g.value(out).len();
    if n == 1 {
        return g.sum(out);
    }
    let mut rng = Pcg32::seed_from_u64(0x9e37_79b9);
    let w: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(Tensor::new(&shape, w)?);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let loss = project(&mut g, out)?;
    Ok(g.value(loss).item())
}

/// Compare reverse-mode gradients of `f` with respect to every element of
/// every input against central differences with step `h`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let loss = project(&mut g, out)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| g.grad(*v).cloned().expect("inputs require grad"))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        components: 0,
        tolerance: tol,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.len() {
            let orig = probe[ti].data()[ei];
            probe[ti].data_mut()[ei] = orig + h;
            let up = evaluate(&f, &probe)?;
            probe[ti].data_mut()[ei] = orig - h;
            let down = evaluate(&f, &probe)?;
            probe[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[ei];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at input {ti} element {ei} (analytic {a}, numeric {numeric})"
                )));
            }
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.components += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((ti, ei));
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), h, tol)
}
