//! Retinex decomposition of an RGB image into a one-channel illumination map and a
//! three-channel reflectance map.

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{l1_loss, mse_loss, tv_loss};
use crate::nn::{Bound, ConvSpec, Params, UNet};

/// Guard added to every Retinex division.
pub const RETINEX_EPS: f64 = 1e-4;
pub const DEFAULT_LAMBDA_RC: f64 = 0.01;
pub const DEFAULT_LAMBDA_IS: f64 = 0.1;

pub type DecomParams = Params<f32>;

#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedPair {
    pub illumination: Image,
    pub reflectance: Image,
}

impl DecomposedPair {
    /// `I ⊗ R` with the illumination broadcast over the three reflectance channels.
    pub fn reconstruct(&self) -> Image {
        let n = self.illumination.height() * self.illumination.width();
        let i = self.illumination.data();
        let data = self
            .reflectance
            .data()
            .iter()
            .enumerate()
            .map(|(k, &r)| r * i[k % n])
            .collect();
        Image::from_clamped(
            self.reflectance.height(),
            self.reflectance.width(),
            3,
            data,
        )
        .expect("dimensions come from a valid image")
    }

    /// Mean absolute reconstruction error against `img`.
    pub fn reconstruction_error(&self, img: &Image) -> Result<f64> {
        let rec = self.reconstruct();
        if !rec.same_dims(img) {
            return Err(Error::Shape("reconstruction and image differ in size".into()));
        }
        Ok(rec
            .data()
            .iter()
            .zip(img.data())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>()
            / img.data().len() as f64)
    }
}

pub fn network() -> UNet {
    UNet {
        in_channels: 3,
        heads: vec![("head_r".into(), 3), ("head_i".into(), 1)],
    }
}

pub fn layers() -> Vec<ConvSpec> {
    network().layers()
}

pub fn init_params(seed: u64) -> DecomParams {
    Params::init(&layers(), seed)
}

/// Graph-level decomposition, returns `(illumination, reflectance)`.
pub fn forward<T: Real>(g: &mut Graph<T>, p: &Bound, img: Var) -> Result<(Var, Var)> {
    let outs = network().forward(g, p, img)?;
    Ok((outs[1], outs[0]))
}

pub fn decompose(params: &DecomParams, img: &Image) -> Result<DecomposedPair> {
    if img.channels() != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            found: img.channels(),
        });
    }
    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(Tensor::from_image(img));
    let (i, r) = forward(&mut g, &bound, x)?;
    Ok(DecomposedPair {
        illumination: g.value(i).to_image()?,
        reflectance: g.value(r).to_image()?,
    })
}

/// Closed-form reference: `I = max_c img`, `R = clamp(img / (I + eps), 0, 1)`.
pub fn classical_decompose(img: &Image, eps: f64) -> Result<DecomposedPair> {
    if img.channels() != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            found: img.channels(),
        });
    }
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let illum: Vec<f32> = (0..n)
        .map(|k| img.plane(0)[k].max(img.plane(1)[k]).max(img.plane(2)[k]))
        .collect();
    let refl = img
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| (v as f64 / (illum[k % n] as f64 + eps)) as f32)
        .collect();
    Ok(DecomposedPair {
        illumination: Image::new(h, w, 1, illum)?,
        reflectance: Image::from_clamped(h, w, 3, refl)?,
    })
}

/// Weights of the decomposition objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecomWeights {
    pub lambda_rc: f64,
    pub lambda_is: f64,
}

impl Default for DecomWeights {
    fn default() -> Self {
        Self {
            lambda_rc: DEFAULT_LAMBDA_RC,
            lambda_is: DEFAULT_LAMBDA_IS,
        }
    }
}

/// `I ⊗ R` inside a graph.
pub fn recompose<T: Real>(g: &mut Graph<T>, illum: Var, refl: Var) -> Result<Var> {
    let (c, _, _) = g.value(refl).dims3()?;
    let ib = g.broadcast_channels(illum, c)?;
    g.mul(ib, refl)
}

/// Reconstruction MSE of both images, reflectance consistency and illumination smoothness.
///
/// Pairs are `(illumination, reflectance)`.
pub fn decom_loss<T: Real>(
    g: &mut Graph<T>,
    low: (Var, Var),
    normal: (Var, Var),
    in_low: Var,
    in_normal: Var,
    w: DecomWeights,
) -> Result<Var> {
    let rec_l = recompose(g, low.0, low.1)?;
    let rec_n = recompose(g, normal.0, normal.1)?;
    let m_l = mse_loss(g, rec_l, in_low)?;
    let m_n = mse_loss(g, rec_n, in_normal)?;
    let rc = l1_loss(g, low.1, normal.1)?;
    let tv_l = tv_loss(g, low.0)?;
    let tv_n = tv_loss(g, normal.0)?;
    let tv = g.add(tv_l, tv_n)?;
    let rc = g.scale(rc, T::from_f64(w.lambda_rc));
    let tv = g.scale(tv, T::from_f64(w.lambda_is));
    let total = g.add(m_l, m_n)?;
    let total = g.add(total, rc)?;
    g.add(total, tv)
}
