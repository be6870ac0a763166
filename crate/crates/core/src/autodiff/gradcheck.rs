use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar from the given parameters inside a fresh graph. At most
/// `max_per_param` entries of each parameter are probed (all of them when `None`), chosen by
/// a ChaCha8 generator seeded with `seed`. Relative error is `|a − n| / (|a| + |n| + 1e-12)`.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    tol: f64,
    max_per_param: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut checked = 0;
    for pi in 0..params.len() {
        let n = params[pi].numel();
        let idx: Vec<usize> = match max_per_param {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for i in idx {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi].data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        checked,
        pass: max_rel_err <= tol,
    })
}
