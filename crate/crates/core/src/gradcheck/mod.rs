//! Central finite-difference gradient checking in 64-bit.

mod suite;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::seeded;
use crate::tensor::Tensor;

pub use suite::{gradient_suite, SuiteCase, PRIMITIVE_IDS};

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub probes: usize,
    pub max_abs_err: f64,
    /// max |analytic − numeric| / max(max |numeric|, 1e-8) over probes.
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compares the taped gradient of `f` against central differences for every
/// element of every parameter.
pub fn grad_check<F>(params: &[Tensor<f64>], eps: f64, tol: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(params, eps, tol, usize::MAX, 0, f)
}

/// Like [`grad_check`], probing at most `max_probes` seeded-random elements
/// per parameter.
pub fn grad_check_sampled<F>(
    params: &[Tensor<f64>],
    eps: f64,
    tol: f64,
    max_probes: usize,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("eps must be positive, got {eps}")));
    }
    let mut params: Vec<Tensor<f64>> = params.iter().map(|p| p.clone().with_requires_grad(true)).collect();

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.scalar(loss))
    };

    let first = eval(&params)?;
    let second = eval(&params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
        let loss = f(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter()
            .zip(&params)
            .map(|(&v, p)| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect()
    };

    let mut rng = seeded(seed);
    let mut report = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let n = params[pi].numel();
        let probes: Vec<usize> = if n <= max_probes {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, max_probes).into_vec();
            v.sort_unstable();
            v
        };
        let mut max_abs = 0.0f64;
        let mut max_num = 0.0f64;
        for &i in &probes {
            let orig = params[pi].data()[i];
            params[pi].data_mut()[i] = orig + eps;
            let up = eval(&params)?;
            params[pi].data_mut()[i] = orig - eps;
            let down = eval(&params)?;
            params[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            max_abs = max_abs.max((analytic[pi][i] - numeric).abs());
            max_num = max_num.max(numeric.abs());
        }
        let rel = max_abs / max_num.max(1e-8);
        report.push(ParamCheck {
            index: pi,
            probes: probes.len(),
            max_abs_err: max_abs,
            max_rel_err: rel,
            passed: rel < tol,
        });
    }
    Ok(GradCheckReport { params: report, tol })
}
