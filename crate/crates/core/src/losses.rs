//! Differentiable training objectives.
//!
//! All reductions are means, so loss weights keep their meaning across image sizes.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Real, Var};
use crate::error::{Error, Result};

/// Smoothing term inside every square root, keeps gradients finite at flat regions.
pub const SQRT_EPS: f64 = 1e-8;

/// Default weight of the gradient term in the illumination loss.
pub const DEFAULT_BETA: f64 = 0.01;

/// Per-pixel forward-difference gradient magnitude `√(dx² + dy² + ε²)` on the valid region.
pub fn gradient_magnitude<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let dx = g.diff_x(x)?;
    let dy = g.diff_y(x)?;
    let dx2 = g.mul(dx, dx)?;
    let dy2 = g.mul(dy, dy)?;
    let s = g.add(dx2, dy2)?;
    let s = g.add_scalar(s, T::from_f64(SQRT_EPS * SQRT_EPS));
    Ok(g.sqrt(s))
}

/// Total variation: sum of gradient magnitudes over all channels.
pub fn tv_raw<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let m = gradient_magnitude(g, x)?;
    g.sum(m)
}

/// [`tv_raw`] divided by `C·(H−1)·(W−1)`.
pub fn tv_loss<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let m = gradient_magnitude(g, x)?;
    g.mean(m)
}

pub fn mse_loss<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

pub fn l1_loss<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let ab = g.abs(d);
    g.mean(ab)
}

/// Mean squared difference between the gradient magnitudes of `pred` and `target`.
pub fn grad_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    if g.value(pred).shape() != g.value(target).shape() {
        return Err(Error::Shape(format!(
            "grad_loss: {:?} vs {:?}",
            g.value(pred).shape(),
            g.value(target).shape()
        )));
    }
    let mp = gradient_magnitude(g, pred)?;
    let mt = gradient_magnitude(g, target)?;
    mse_loss(g, mp, mt)
}

/// Graph handles of the illumination objective and its parts.
#[derive(Clone, Copy, Debug)]
pub struct IllumLoss {
    pub total: Var,
    pub grad: Var,
    pub mse: Var,
    pub tv: Var,
}

/// `β·grad_loss + mse_loss + tv_weight·tv_loss(pred)`.
///
/// `tv_weight` is 1 for the standard objective; 0 drops the smoothness term.
pub fn illum_total_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    beta: f64,
    tv_weight: f64,
) -> Result<IllumLoss> {
    let grad = grad_loss(g, pred, target)?;
    let mse = mse_loss(g, pred, target)?;
    let tv = tv_loss(g, pred)?;
    let wg = g.scale(grad, T::from_f64(beta));
    let wt = g.scale(tv, T::from_f64(tv_weight));
    let total = g.add(wg, mse)?;
    let total = g.add(total, wt)?;
    Ok(IllumLoss {
        total,
        grad,
        mse,
        tv,
    })
}

/// Numeric summary of the illumination objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub beta: f64,
    /// Unweighted terms.
    pub grad: f64,
    pub mse: f64,
    pub tv: f64,
}

impl LossReport {
    pub fn from_graph<T: Real>(g: &Graph<T>, loss: &IllumLoss, beta: f64) -> Self {
        let v = |x: Var| g.value(x).item().to_f64();
        Self {
            total: v(loss.total),
            beta,
            grad: v(loss.grad),
            mse: v(loss.mse),
            tv: v(loss.tv),
        }
    }

    /// Terms with their weights applied; they sum to `total`.
    pub fn components(&self) -> BTreeMap<&'static str, f64> {
        BTreeMap::from([
            ("grad", self.beta * self.grad),
            ("mse", self.mse),
            ("tv", self.tv),
        ])
    }
}

/// Evaluates [`illum_total_loss`] outside of training.
pub fn illum_report(
    pred: &crate::autodiff::Tensor<f64>,
    target: &crate::autodiff::Tensor<f64>,
    beta: f64,
) -> Result<LossReport> {
    let mut g = Graph::<f64>::new();
    let p = g.constant(pred.clone());
    let t = g.constant(target.clone());
    let l = illum_total_loss(&mut g, p, t, beta, 1.0)?;
    Ok(LossReport::from_graph(&g, &l, beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn eval(f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>, shape: &[usize], data: &[f64]) -> f64 {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(shape.to_vec(), data.to_vec()).unwrap());
        let y = f(&mut g, x).unwrap();
        g.value(y).item()
    }

    #[test]
    fn tv_hand_values() {
        let v = eval(tv_raw, &[1, 2, 2], &[0.0, 1.0, 0.0, 1.0]);
        assert!((v - 1.0).abs() < 1e-12);
        let v = eval(tv_raw, &[1, 2, 2], &[0.0, 0.0, 1.0, 1.0]);
        assert!((v - 1.0).abs() < 1e-12);
        let v = eval(tv_loss, &[1, 2, 2], &[0.0, 1.0, 0.0, 1.0]);
        assert!((v - 1.0).abs() < 1e-12);
        let v = eval(tv_raw, &[2, 3, 3], &[0.4; 18]);
        assert!(v < 1e-7);
    }

    #[test]
    fn tv_needs_two_by_two() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 5]));
        assert!(matches!(tv_raw(&mut g, x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn grad_loss_ramp_vs_constant() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::new(vec![1, 2, 3], vec![0.0, 0.1, 0.2, 0.0, 0.1, 0.2]).unwrap());
        let t = g.constant(Tensor::filled(&[1, 2, 3], 0.5));
        let l = grad_loss(&mut g, p, t).unwrap();
        assert!((g.value(l).item() - 0.01).abs() < 1e-8);

        let a = g.constant(Tensor::filled(&[1, 3, 3], 0.2));
        let b = g.constant(Tensor::filled(&[1, 3, 3], 0.9));
        let l = grad_loss(&mut g, a, b).unwrap();
        assert!(g.value(l).item().abs() < 1e-15);
        let bad = g.constant(Tensor::filled(&[1, 3, 4], 0.9));
        assert!(matches!(grad_loss(&mut g, a, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn mse_of_constant_offset() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::filled(&[1, 4, 4], 0.3));
        let b = g.constant(Tensor::filled(&[1, 4, 4], 0.4));
        let l = mse_loss(&mut g, a, b).unwrap();
        assert!((g.value(l).item() - 0.01).abs() < 1e-12);
        let z = mse_loss(&mut g, a, a).unwrap();
        assert_eq!(g.value(z).item(), 0.0);
    }

    #[test]
    fn illum_total_zero_for_equal_constants() {
        let c = Tensor::filled(&[1, 4, 4], 0.6);
        let r = illum_report(&c, &c, DEFAULT_BETA).unwrap();
        assert!(r.total.abs() < 1e-7);
    }
}
