//! Retinex fusion: global and local illumination coefficients combined with the reflectance
//! and illumination maps into the six-channel input of the light-curve network.
//!
//! Channel layout of the fused stack:
//!
//! | channel | content                                  |
//! |---------|------------------------------------------|
//! | 0       | `S_local = t_local · 1`, resized to H×W   |
//! | 1       | cropped low illumination, resized to H×W  |
//! | 2..=4   | `S_global = t_global · R_low`             |
//! | 5       | `I_low`, copied unchanged                 |

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::{CropWindow, Image};

pub const FUSED_CHANNELS: usize = 6;
/// Index of the untouched low illumination map inside the fused stack.
pub const ILLUM_CHANNEL: usize = 5;
pub const DEFAULT_CROP_FRACTION: f64 = 0.5;
pub const DEFAULT_TARGET_MEAN: f64 = 0.5;

/// Where the coefficients come from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CoeffSource {
    /// Training: ratio of low to normal illumination.
    Paired(Var),
    /// Inference: ratio of the low illumination mean to a target brightness.
    Inferred { target_mean: f64 },
}

/// Graph handles produced by [`fuse_graph`].
#[derive(Clone, Copy, Debug)]
pub struct FusedVars {
    pub x_rf: Var,
    pub t_global: Var,
    pub t_local: Var,
}

fn check_maps(g: &Graph<impl Real>, i_low: Var, r_low: Var) -> Result<(usize, usize)> {
    let (ci, h, w) = g.value(i_low).dims3()?;
    let (cr, hr, wr) = g.value(r_low).dims3()?;
    if ci != 1 || cr != 3 || (h, w) != (hr, wr) {
        return Err(Error::Shape(format!(
            "fusion expects 1×H×W illumination and 3×H×W reflectance, got {:?} and {:?}",
            g.value(i_low).shape(),
            g.value(r_low).shape()
        )));
    }
    Ok((h, w))
}

/// `mean(low / (normal + eps))` as a graph scalar.
pub fn ratio_coeff<T: Real>(g: &mut Graph<T>, low: Var, normal: Var, eps: f64) -> Result<Var> {
    if g.value(low).shape() != g.value(normal).shape() {
        return Err(Error::Shape(format!(
            "coefficient maps differ: {:?} vs {:?}",
            g.value(low).shape(),
            g.value(normal).shape()
        )));
    }
    let den = g.add_scalar(normal, T::from_f64(eps));
    let q = g.div(low, den)?;
    g.mean(q)
}

/// `clamp(mean(I_low) / (target_mean + eps), eps, 1)`.
pub fn infer_coeff_values<T: Real>(i_low: &[T], target_mean: f64, eps: f64) -> f64 {
    let mean = i_low.iter().map(|v| v.to_f64()).sum::<f64>() / i_low.len() as f64;
    (mean / (target_mean + eps)).clamp(eps, 1.0)
}

pub fn infer_coeff(i_low: &Image, target_mean: f64, eps: f64) -> Result<f64> {
    if !(target_mean > 0.0 && target_mean <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target mean must lie in (0, 1], got {target_mean}"
        )));
    }
    Ok(infer_coeff_values(i_low.data(), target_mean, eps))
}

/// Builds the fused stack from `I_low` (1×H×W) and `R_low` (3×H×W).
///
/// Both coefficient crops use the same `window`. Differentiable with respect to every
/// tensor input.
pub fn fuse_graph<T: Real>(
    g: &mut Graph<T>,
    i_low: Var,
    r_low: Var,
    source: CoeffSource,
    window: CropWindow,
    eps: f64,
) -> Result<FusedVars> {
    let (h, w) = check_maps(g, i_low, r_low)?;
    let low_crop = g.crop(i_low, window)?;
    let (t_global, t_local) = match source {
        CoeffSource::Paired(i_normal) => {
            let tg = ratio_coeff(g, i_low, i_normal, eps)?;
            let normal_crop = g.crop(i_normal, window)?;
            let tl = ratio_coeff(g, low_crop, normal_crop, eps)?;
            (tg, tl)
        }
        CoeffSource::Inferred { target_mean } => {
            if !(target_mean > 0.0 && target_mean <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "target mean must lie in (0, 1], got {target_mean}"
                )));
            }
            let tg = infer_coeff_values(g.value(i_low).data(), target_mean, eps);
            let tl = infer_coeff_values(g.value(low_crop).data(), target_mean, eps);
            (g.scalar(T::from_f64(tg)), g.scalar(T::from_f64(tl)))
        }
    };
    let s_global = g.scale_by(r_low, t_global)?;
    let s_local = g.expand(t_local, &[1, window.height, window.width])?;
    let s_local = g.resize_bilinear(s_local, h, w)?;
    let low_crop = g.resize_bilinear(low_crop, h, w)?;
    let x_rf = g.concat(&[s_local, low_crop, s_global, i_low])?;
    Ok(FusedVars {
        x_rf,
        t_global,
        t_local,
    })
}

/// Plain-value inputs of the fusion step.
#[derive(Clone, Debug)]
pub struct FusionInputs<'a> {
    pub i_low: &'a Image,
    /// Present while training, absent at inference.
    pub i_normal: Option<&'a Image>,
    pub r_low: &'a Image,
    pub crop_fraction: f64,
    pub target_mean: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedStack {
    pub x_rf: Tensor<f32>,
    pub t_global: f64,
    pub t_local: f64,
}

impl FusedStack {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.x_rf.shape()[1] * self.x_rf.shape()[2];
        &self.x_rf.data()[c * n..(c + 1) * n]
    }
}

/// Fusion with a deterministic centre crop.
pub fn fuse(inputs: &FusionInputs<'_>) -> Result<FusedStack> {
    let (h, w) = (inputs.i_low.height(), inputs.i_low.width());
    let window = CropWindow::center(h, w, inputs.crop_fraction)?;
    let mut g = Graph::<f32>::new();
    let i_low = g.constant(Tensor::from_image(inputs.i_low));
    let r_low = g.constant(Tensor::from_image(inputs.r_low));
    let source = match inputs.i_normal {
        Some(n) => {
            if (n.height(), n.width(), n.channels()) != (h, w, 1) {
                return Err(Error::Shape("normal illumination differs from low".into()));
            }
            CoeffSource::Paired(g.constant(Tensor::from_image(n)))
        }
        None => CoeffSource::Inferred {
            target_mean: inputs.target_mean,
        },
    };
    let f = fuse_graph(&mut g, i_low, r_low, source, window, inputs.eps)?;
    Ok(FusedStack {
        x_rf: g.value(f.x_rf).clone(),
        t_global: g.value(f.t_global).item().to_f64(),
        t_local: g.value(f.t_local).item().to_f64(),
    })
}

/// Whole-map coefficient `mean(I_low / (I_normal + eps))`.
pub fn global_coeff(i_low: &Image, i_normal: &Image, eps: f64) -> Result<f64> {
    if !i_low.same_dims(i_normal) {
        return Err(Error::Shape("illumination maps differ in size".into()));
    }
    Ok(i_low
        .data()
        .iter()
        .zip(i_normal.data())
        .map(|(&l, &n)| l as f64 / (n as f64 + eps))
        .sum::<f64>()
        / i_low.data().len() as f64)
}

/// Same ratio restricted to one crop window shared by both maps.
pub fn local_coeff(i_low: &Image, i_normal: &Image, window: CropWindow, eps: f64) -> Result<f64> {
    let l = i_low.crop(window.y0, window.x0, window.height, window.width)?;
    let n = i_normal.crop(window.y0, window.x0, window.height, window.width)?;
    global_coeff(&l, &n, eps)
}

/// `S_global = t_global · R_low`.
pub fn build_s_global(r_low: &Image, t_global: f64) -> Tensor<f64> {
    let mut t = Tensor::<f64>::from_image(r_low);
    t.data_mut().iter_mut().for_each(|v| *v *= t_global);
    t
}

/// `S_local = t_local · E` with `E` the all-ones map of the crop size.
pub fn build_s_local(crop_h: usize, crop_w: usize, t_local: f64) -> Result<Tensor<f64>> {
    if crop_h == 0 || crop_w == 0 {
        return Err(Error::InvalidArgument("empty local map".into()));
    }
    Ok(Tensor::filled(&[1, crop_h, crop_w], t_local))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::RETINEX_EPS;

    fn map(h: usize, w: usize, v: &[f32]) -> Image {
        Image::new(h, w, 1, v.to_vec()).unwrap()
    }

    #[test]
    fn global_coeff_cases() {
        let l = Image::filled(3, 3, 1, 0.2).unwrap();
        let n = Image::filled(3, 3, 1, 0.4).unwrap();
        let t = global_coeff(&l, &n, RETINEX_EPS).unwrap();
        assert!((t - 0.2 / 0.4001).abs() < 1e-6);
        let t = global_coeff(&n, &n, RETINEX_EPS).unwrap();
        assert!((t - 1.0).abs() < 1e-3);

        let l = map(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let n = Image::filled(2, 2, 1, 0.5).unwrap();
        let t = global_coeff(&l, &n, RETINEX_EPS).unwrap();
        assert!((t - 1.0 / 0.5001 * 0.25).abs() < 1e-6);
        assert!((t - 0.5).abs() < 1e-3);
    }

    #[test]
    fn local_coeff_cases() {
        let mut lv = vec![0.1f32; 16];
        let mut nv = vec![0.5f32; 16];
        for k in [5, 6, 9, 10] {
            lv[k] = 0.4;
            nv[k] = 0.8;
        }
        let (l, n) = (map(4, 4, &lv), map(4, 4, &nv));
        let win = CropWindow::center(4, 4, 0.5).unwrap();
        let t = local_coeff(&l, &n, win, RETINEX_EPS).unwrap();
        assert!((t - 0.4 / 0.8001).abs() < 1e-6);
        let full = CropWindow::center(4, 4, 1.0).unwrap();
        assert_eq!(
            local_coeff(&l, &n, full, RETINEX_EPS).unwrap(),
            global_coeff(&l, &n, RETINEX_EPS).unwrap()
        );
        assert!(CropWindow::center(4, 4, 0.1).is_err());
    }

    #[test]
    fn s_maps() {
        let r = Image::filled(2, 2, 3, 0.8).unwrap();
        assert!(build_s_global(&r, 0.5).data().iter().all(|&v| (v - 0.4).abs() < 1e-7));
        assert!(build_s_global(&r, 0.0).data().iter().all(|&v| v == 0.0));
        let s = build_s_local(2, 2, 0.7).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.7));
        assert!(build_s_local(0, 2, 0.7).is_err());

        let mut g = Graph::<f64>::new();
        let v = g.constant(s);
        let big = g.resize_bilinear(v, 9, 7).unwrap();
        assert!(g.value(big).data().iter().all(|&x| (x - 0.7).abs() < 1e-9));
    }

    #[test]
    fn infer_coeff_cases() {
        let m = Image::filled(2, 2, 1, 0.25).unwrap();
        assert!((infer_coeff(&m, 0.5, RETINEX_EPS).unwrap() - 0.25 / 0.5001).abs() < 1e-7);
        let m = Image::filled(2, 2, 1, 0.9).unwrap();
        assert_eq!(infer_coeff(&m, 0.5, RETINEX_EPS).unwrap(), 1.0);
        let m = Image::filled(2, 2, 1, 0.0).unwrap();
        assert_eq!(infer_coeff(&m, 0.5, RETINEX_EPS).unwrap(), RETINEX_EPS);
        assert!(infer_coeff(&m, 0.0, RETINEX_EPS).is_err());
    }

    #[test]
    fn fuse_rejects_bad_shapes() {
        let i = Image::filled(4, 4, 1, 0.2).unwrap();
        let r = Image::filled(4, 5, 3, 0.6).unwrap();
        let inputs = FusionInputs {
            i_low: &i,
            i_normal: None,
            r_low: &r,
            crop_fraction: 0.5,
            target_mean: 0.5,
            eps: RETINEX_EPS,
        };
        assert!(matches!(fuse(&inputs), Err(Error::Shape(_))));
    }

    #[test]
    fn inference_mode_uses_target_mean() {
        let i = Image::filled(4, 4, 1, 0.25).unwrap();
        let r = Image::filled(4, 4, 3, 0.6).unwrap();
        let f = fuse(&FusionInputs {
            i_low: &i,
            i_normal: None,
            r_low: &r,
            crop_fraction: 0.5,
            target_mean: 0.5,
            eps: RETINEX_EPS,
        })
        .unwrap();
        assert!((f.t_global - 0.25 / 0.5001).abs() < 1e-6);
        assert!(f.channel(2).iter().all(|&v| (v as f64 - 0.6 * f.t_global).abs() < 1e-6));
    }
}
