//! Reflectance restoration: a small encoder-decoder that denoises `R_low` guided by `I_low`.

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{mse_loss, tv_loss};
use crate::nn::{Bound, ConvSpec, Params, UNet};

pub const DEFAULT_LAMBDA_TV: f64 = 0.1;

pub type RestoreParams = Params<f32>;

pub fn network() -> UNet {
    UNet {
        in_channels: 4,
        heads: vec![("head_r".into(), 3)],
    }
}

pub fn layers() -> Vec<ConvSpec> {
    network().layers()
}

pub fn init_params(seed: u64) -> RestoreParams {
    Params::init(&layers(), seed)
}

/// Input is `R_low ∥ I_low`; output a 3-channel reflectance in (0, 1).
pub fn forward<T: Real>(g: &mut Graph<T>, p: &Bound, i_low: Var, r_low: Var) -> Result<Var> {
    let x = g.concat(&[r_low, i_low])?;
    Ok(network().forward(g, p, x)?[0])
}

pub fn restore(params: &RestoreParams, i_low: &Image, r_low: &Image) -> Result<Image> {
    if i_low.channels() != 1 || r_low.channels() != 3 {
        return Err(Error::Shape(format!(
            "restore expects 1- and 3-channel maps, got {} and {}",
            i_low.channels(),
            r_low.channels()
        )));
    }
    let mut g = Graph::<f32>::new();
    let b = params.bind(&mut g, false);
    let i = g.constant(Tensor::from_image(i_low));
    let r = g.constant(Tensor::from_image(r_low));
    let out = forward(&mut g, &b, i, r)?;
    g.value(out).to_image()
}

/// `mse(R_out, R_normal) + λ_tv · tv_loss(R_out)`.
pub fn restore_loss<T: Real>(g: &mut Graph<T>, r_out: Var, r_normal: Var, lambda_tv: f64) -> Result<Var> {
    let m = mse_loss(g, r_out, r_normal)?;
    let tv = tv_loss(g, r_out)?;
    let tv = g.scale(tv, T::from_f64(lambda_tv));
    g.add(m, tv)
}
